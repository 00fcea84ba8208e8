//! Uniform-grid discretization of a box Ω ⊂ ℝ³: fields, second-order
//! difference operators, ball/shell quadrature, and a Dirichlet Poisson
//! solver.
//!
//! The domain is the closed box `[origin, origin + (n−1)h]` with nodes at
//! `origin + (i,j,k)·h`. Node storage is row-major with the third index
//! fastest: `idx = (i·n₂ + j)·n₃ + k`. Gradients of rotation fields are
//! extrinsic: matrix entries are differenced like any other field, so
//! `|∇R|` is the Frobenius norm of the full gradient.
//!
//! Fields are immutable after construction as far as the operators are
//! concerned; every operator reads its inputs and allocates its output, and
//! reductions run in a fixed order so results are bit-reproducible.

use crate::geometry::Rotation;
use nalgebra::{Matrix3, Vector3};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid needs at least 3 nodes per axis and positive spacing, got {dims:?}, h = {h}")]
    BadGrid { dims: [usize; 3], h: f64 },
    #[error("field value count {got} does not match grid node count {expect}")]
    SizeMismatch { got: usize, expect: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("ball of radius {r} at {center:?} is not contained in the domain interior")]
    BallOutsideDomain { center: [f64; 3], r: f64 },
    #[error("linear solver did not converge: residual {residual:.3e} after {iters} iterations")]
    SolverFailure { residual: f64, iters: usize },
    #[error("non-finite value in field data")]
    NonFinite,
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad snapshot: {0}")]
    BadSnapshot(String),
    #[error("snapshot node {index} is not a rotation: {source}")]
    BadSnapshotRotation {
        index: usize,
        source: crate::geometry::GeometryError,
    },
}

/// Uniform node lattice on an axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    h: f64,
    origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], h: f64, origin: [f64; 3]) -> Result<Self, FieldError> {
        if dims.iter().any(|&n| n < 3) || !(h > 0.0) {
            return Err(FieldError::BadGrid { dims, h });
        }
        Ok(Grid { dims, h, origin })
    }

    /// The box `[0,1]³` sampled with `n` nodes per axis.
    pub fn unit_box(n: usize) -> Self {
        Grid::new([n, n, n], 1.0 / (n as f64 - 1.0), [0.0; 3]).expect("n >= 3")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Number of cells per axis.
    pub fn cell_dims(&self) -> [usize; 3] {
        [self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + i as f64 * self.h,
            self.origin[1] + j as f64 * self.h,
            self.origin[2] + k as f64 * self.h,
        )
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        i == 0
            || j == 0
            || k == 0
            || i == self.dims[0] - 1
            || j == self.dims[1] - 1
            || k == self.dims[2] - 1
    }

    pub fn box_min(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0], self.origin[1], self.origin[2])
    }

    pub fn box_max(&self) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (self.dims[0] as f64 - 1.0) * self.h,
            self.origin[1] + (self.dims[1] as f64 - 1.0) * self.h,
            self.origin[2] + (self.dims[2] as f64 - 1.0) * self.h,
        )
    }

    /// Distance from `x` to the boundary of the box (negative outside).
    pub fn dist_to_boundary(&self, x: &Vector3<f64>) -> f64 {
        let lo = self.box_min();
        let hi = self.box_max();
        let mut d = f64::INFINITY;
        for a in 0..3 {
            d = d.min(x[a] - lo[a]).min(hi[a] - x[a]);
        }
        d
    }

    /// Trapezoidal node weight: h³ scaled by 1/2 per boundary-face direction.
    pub fn node_weight(&self, i: usize, j: usize, k: usize) -> f64 {
        let mut w = self.h * self.h * self.h;
        for (a, &c) in [i, j, k].iter().enumerate() {
            if c == 0 || c == self.dims[a] - 1 {
                w *= 0.5;
            }
        }
        w
    }
}

/// Value types the difference stencils apply to.
pub trait Linear: Copy {
    fn zero() -> Self;
    /// `self + s · other`
    fn add_scaled(self, other: Self, s: f64) -> Self;
}

impl Linear for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add_scaled(self, other: Self, s: f64) -> Self {
        self + s * other
    }
}

impl Linear for Vector3<f64> {
    fn zero() -> Self {
        Vector3::zeros()
    }
    fn add_scaled(self, other: Self, s: f64) -> Self {
        self + other * s
    }
}

impl Linear for Matrix3<f64> {
    fn zero() -> Self {
        Matrix3::zeros()
    }
    fn add_scaled(self, other: Self, s: f64) -> Self {
        self + other * s
    }
}

/// One value of type `T` per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    grid: Grid,
    data: Vec<T>,
}

pub type ScalarField = Field<f64>;
pub type VectorField = Field<Vector3<f64>>;
pub type MatrixField = Field<Matrix3<f64>>;

impl<T: Clone> Field<T> {
    pub fn constant(grid: Grid, value: T) -> Self {
        Field {
            grid,
            data: vec![value; grid.node_count()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Vector3<f64>) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.node_count());
        for i in 0..grid.dims[0] {
            for j in 0..grid.dims[1] {
                for k in 0..grid.dims[2] {
                    data.push(f(grid.position(i, j, k)));
                }
            }
        }
        Field { grid, data }
    }

    pub fn from_values(grid: Grid, data: Vec<T>) -> Result<Self, FieldError> {
        if data.len() != grid.node_count() {
            return Err(FieldError::SizeMismatch {
                got: data.len(),
                expect: grid.node_count(),
            });
        }
        Ok(Field { grid, data })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> &T {
        &self.data[self.grid.idx(i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut T {
        let idx = self.grid.idx(i, j, k);
        &mut self.data[idx]
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// A field of validated rotations; the SO(3) invariant holds at every node.
#[derive(Debug, Clone)]
pub struct RotationField {
    grid: Grid,
    data: Vec<Rotation>,
}

impl RotationField {
    pub fn constant(grid: Grid, r: Rotation) -> Self {
        RotationField {
            grid,
            data: vec![r; grid.node_count()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Vector3<f64>) -> Rotation) -> Self {
        let mut data = Vec::with_capacity(grid.node_count());
        for i in 0..grid.dims()[0] {
            for j in 0..grid.dims()[1] {
                for k in 0..grid.dims()[2] {
                    data.push(f(grid.position(i, j, k)));
                }
            }
        }
        RotationField { grid, data }
    }

    pub fn from_values(grid: Grid, data: Vec<Rotation>) -> Result<Self, FieldError> {
        if data.len() != grid.node_count() {
            return Err(FieldError::SizeMismatch {
                got: data.len(),
                expect: grid.node_count(),
            });
        }
        Ok(RotationField { grid, data })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> &Rotation {
        &self.data[self.grid.idx(i, j, k)]
    }

    pub fn values(&self) -> &[Rotation] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [Rotation] {
        &mut self.data
    }

    /// Extrinsic view: the rotation entries as a plain matrix field, for
    /// differencing.
    pub fn as_matrix_field(&self) -> MatrixField {
        Field {
            grid: self.grid,
            data: self.data.iter().map(|r| *r.matrix()).collect(),
        }
    }

    /// Largest orthogonality defect over all nodes.
    pub fn max_defect(&self) -> f64 {
        self.data
            .iter()
            .map(|r| r.orthogonality_defect())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Difference operators: second-order central in the interior, one-sided
// second-order at the faces.
// ---------------------------------------------------------------------------

/// First difference along `axis`.
fn diff_axis<T: Linear>(f: &Field<T>, axis: usize) -> Field<T> {
    let grid = f.grid;
    let n = grid.dims();
    let inv2h = 1.0 / (2.0 * grid.h());
    let stride = match axis {
        0 => n[1] * n[2],
        1 => n[2],
        _ => 1,
    };
    let mut out = vec![T::zero(); grid.node_count()];
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                let idx = grid.idx(i, j, k);
                let c = [i, j, k][axis];
                let last = n[axis] - 1;
                let v = if c == 0 {
                    // (−3f₀ + 4f₁ − f₂) / 2h
                    T::zero()
                        .add_scaled(f.data[idx], -3.0 * inv2h)
                        .add_scaled(f.data[idx + stride], 4.0 * inv2h)
                        .add_scaled(f.data[idx + 2 * stride], -inv2h)
                } else if c == last {
                    T::zero()
                        .add_scaled(f.data[idx], 3.0 * inv2h)
                        .add_scaled(f.data[idx - stride], -4.0 * inv2h)
                        .add_scaled(f.data[idx - 2 * stride], inv2h)
                } else {
                    T::zero()
                        .add_scaled(f.data[idx + stride], inv2h)
                        .add_scaled(f.data[idx - stride], -inv2h)
                };
                out[idx] = v;
            }
        }
    }
    Field { grid, data: out }
}

/// Second difference along `axis` (exact on quadratics everywhere).
fn second_diff_axis<T: Linear>(f: &Field<T>, axis: usize) -> Field<T> {
    let grid = f.grid;
    let n = grid.dims();
    let invh2 = 1.0 / (grid.h() * grid.h());
    let stride = match axis {
        0 => n[1] * n[2],
        1 => n[2],
        _ => 1,
    };
    let mut out = vec![T::zero(); grid.node_count()];
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                let idx = grid.idx(i, j, k);
                let c = [i, j, k][axis];
                let last = n[axis] - 1;
                let v = if c == 0 {
                    // (2f₀ − 5f₁ + 4f₂ − f₃) / h²
                    T::zero()
                        .add_scaled(f.data[idx], 2.0 * invh2)
                        .add_scaled(f.data[idx + stride], -5.0 * invh2)
                        .add_scaled(f.data[idx + 2 * stride], 4.0 * invh2)
                        .add_scaled(f.data[idx + 3 * stride], -invh2)
                } else if c == last {
                    T::zero()
                        .add_scaled(f.data[idx], 2.0 * invh2)
                        .add_scaled(f.data[idx - stride], -5.0 * invh2)
                        .add_scaled(f.data[idx - 2 * stride], 4.0 * invh2)
                        .add_scaled(f.data[idx - 3 * stride], -invh2)
                } else {
                    T::zero()
                        .add_scaled(f.data[idx], -2.0 * invh2)
                        .add_scaled(f.data[idx + stride], invh2)
                        .add_scaled(f.data[idx - stride], invh2)
                };
                out[idx] = v;
            }
        }
    }
    Field { grid, data: out }
}

/// ∇s of a scalar field, one vector per node.
pub fn gradient_scalar(f: &ScalarField) -> VectorField {
    let d = [diff_axis(f, 0), diff_axis(f, 1), diff_axis(f, 2)];
    Field {
        grid: f.grid,
        data: (0..f.grid.node_count())
            .map(|n| Vector3::new(d[0].data[n], d[1].data[n], d[2].data[n]))
            .collect(),
    }
}

/// ∇φ of a vector field with the convention `(∇φ)_{cd} = ∂φ^c/∂x_d`.
pub fn gradient_vector(f: &VectorField) -> MatrixField {
    let d = [diff_axis(f, 0), diff_axis(f, 1), diff_axis(f, 2)];
    Field {
        grid: f.grid,
        data: (0..f.grid.node_count())
            .map(|n| Matrix3::from_columns(&[d[0].data[n], d[1].data[n], d[2].data[n]]))
            .collect(),
    }
}

/// The three partials `∂_d M` of a matrix field.
pub fn gradient_matrix(f: &MatrixField) -> [MatrixField; 3] {
    [diff_axis(f, 0), diff_axis(f, 1), diff_axis(f, 2)]
}

/// div v = Σ_d ∂_d v_d.
pub fn divergence_vector(f: &VectorField) -> ScalarField {
    let d = [diff_axis(f, 0), diff_axis(f, 1), diff_axis(f, 2)];
    Field {
        grid: f.grid,
        data: (0..f.grid.node_count())
            .map(|n| d[0].data[n].x + d[1].data[n].y + d[2].data[n].z)
            .collect(),
    }
}

/// Row-wise divergence of a matrix field: `(div M)_c = Σ_d ∂_d M_{cd}`.
pub fn divergence_matrix(f: &MatrixField) -> VectorField {
    let d = [diff_axis(f, 0), diff_axis(f, 1), diff_axis(f, 2)];
    Field {
        grid: f.grid,
        data: (0..f.grid.node_count())
            .map(|n| {
                Vector3::new(
                    d[0].data[n][(0, 0)] + d[1].data[n][(0, 1)] + d[2].data[n][(0, 2)],
                    d[0].data[n][(1, 0)] + d[1].data[n][(1, 1)] + d[2].data[n][(1, 2)],
                    d[0].data[n][(2, 0)] + d[1].data[n][(2, 1)] + d[2].data[n][(2, 2)],
                )
            })
            .collect(),
    }
}

/// 7-point Laplacian (second-order one-sided at faces).
pub fn laplacian_scalar(f: &ScalarField) -> ScalarField {
    combine3(
        f.grid,
        second_diff_axis(f, 0),
        second_diff_axis(f, 1),
        second_diff_axis(f, 2),
    )
}

/// Componentwise Laplacian of a vector field.
pub fn laplacian_vector(f: &VectorField) -> VectorField {
    combine3(
        f.grid,
        second_diff_axis(f, 0),
        second_diff_axis(f, 1),
        second_diff_axis(f, 2),
    )
}

fn combine3<T: Linear>(grid: Grid, a: Field<T>, b: Field<T>, c: Field<T>) -> Field<T> {
    Field {
        grid,
        data: (0..grid.node_count())
            .map(|n| a.data[n].add_scaled(b.data[n], 1.0).add_scaled(c.data[n], 1.0))
            .collect(),
    }
}

/// Directional derivative toward `x` from `x₀`:
/// `⟨∇F(x), (x−x₀)/|x−x₀|⟩`, defined as 0 at `x = x₀`.
pub fn radial_derivative(f: &ScalarField, x0: &Vector3<f64>) -> ScalarField {
    let grad = gradient_scalar(f);
    let grid = f.grid;
    let mut data = vec![0.0; grid.node_count()];
    for n in 0..grid.node_count() {
        let [i, j, k] = grid.coords(n);
        let r = grid.position(i, j, k) - x0;
        let rn = r.norm();
        if rn > 1e-14 {
            data[n] = grad.data[n].dot(&r) / rn;
        }
    }
    Field { grid, data }
}

/// `|∂φ/∂r|²` of a vector field as a scalar field.
pub fn radial_derivative_sq_vector(f: &VectorField, x0: &Vector3<f64>) -> ScalarField {
    let grad = gradient_vector(f);
    let grid = f.grid;
    let mut data = vec![0.0; grid.node_count()];
    for n in 0..grid.node_count() {
        let [i, j, k] = grid.coords(n);
        let r = grid.position(i, j, k) - x0;
        let rn = r.norm();
        if rn > 1e-14 {
            let d = grad.data[n] * (r / rn);
            data[n] = d.norm_squared();
        }
    }
    Field { grid, data }
}

/// `|∂M/∂r|²` of a matrix field as a scalar field.
pub fn radial_derivative_sq_matrix(f: &MatrixField, x0: &Vector3<f64>) -> ScalarField {
    let parts = gradient_matrix(f);
    let grid = f.grid;
    let mut data = vec![0.0; grid.node_count()];
    for n in 0..grid.node_count() {
        let [i, j, k] = grid.coords(n);
        let r = grid.position(i, j, k) - x0;
        let rn = r.norm();
        if rn > 1e-14 {
            let d = parts[0].data[n] * (r.x / rn)
                + parts[1].data[n] * (r.y / rn)
                + parts[2].data[n] * (r.z / rn);
            data[n] = d.norm_squared();
        }
    }
    Field { grid, data }
}

// ---------------------------------------------------------------------------
// Poisson solver: Jacobi-preconditioned CG on the 7-point system.
// ---------------------------------------------------------------------------

/// Residual targets for [`poisson_solve`]:
/// `‖Δu − rhs‖_∞ ≤ REL·‖rhs‖_∞ + ABS`.
pub const POISSON_REL_TOL: f64 = 1e-10;
pub const POISSON_ABS_TOL: f64 = 1e-14;

/// Solves `Δu = rhs` with Dirichlet data taken from the boundary nodes of
/// `boundary`. Interior values of `boundary` are ignored. Deterministic:
/// identical inputs give bit-identical outputs.
pub fn poisson_solve(rhs: &ScalarField, boundary: &ScalarField) -> Result<ScalarField, FieldError> {
    if rhs.grid != boundary.grid {
        return Err(FieldError::GridMismatch);
    }
    let grid = rhs.grid;
    let n = grid.dims();
    let h2 = grid.h() * grid.h();
    let count = grid.node_count();

    let interior: Vec<usize> = (0..count)
        .filter(|&idx| {
            let [i, j, k] = grid.coords(idx);
            !grid.is_boundary(i, j, k)
        })
        .collect();
    let strides = [n[1] * n[2], n[2], 1];

    // Full-lattice vector holding boundary values at boundary nodes and the
    // current iterate at interior nodes.
    let mut u = boundary.data.clone();
    for &idx in &interior {
        u[idx] = 0.0;
    }

    // A x = b with A = −Δ_h on interior unknowns (SPD); x is zero at
    // boundary slots so the stencil can be applied uniformly.
    let apply = |x: &[f64], out: &mut [f64]| {
        for &idx in &interior {
            let mut acc = 6.0 * x[idx];
            for s in strides {
                acc -= x[idx + s] + x[idx - s];
            }
            out[idx] = acc / h2;
        }
    };

    // b = −rhs + boundary couplings
    let mut b = vec![0.0; count];
    for &idx in &interior {
        let mut acc = -rhs.data[idx];
        for s in strides {
            acc += (u[idx - s] + u[idx + s]) / h2;
        }
        b[idx] = acc;
    }

    let rhs_inf = rhs.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let bc_inf = boundary
        .data
        .iter()
        .enumerate()
        .filter(|(idx, _)| {
            let [i, j, k] = grid.coords(*idx);
            grid.is_boundary(i, j, k)
        })
        .fold(0.0_f64, |m, (_, v)| m.max(v.abs()));
    // The stored f64 solution cannot beat quantization: evaluating the
    // stencil on correctly rounded O(‖u‖) values leaves a residual of order
    // eps·‖u‖/h². That floor is added to the nominal tolerance.
    let float_floor = 64.0 * f64::EPSILON * (bc_inf + h2 * rhs_inf) / h2;
    let target = POISSON_REL_TOL * rhs_inf + POISSON_ABS_TOL + float_floor;

    // Jacobi preconditioner: the diagonal is the constant 6/h².
    let minv = h2 / 6.0;

    let mut x = vec![0.0; count];
    let mut ax = vec![0.0; count];
    let mut r = vec![0.0; count];
    let mut z = vec![0.0; count];
    let mut p = vec![0.0; count];
    let mut ap = vec![0.0; count];

    apply(&x, &mut ax);
    for &idx in &interior {
        r[idx] = b[idx] - ax[idx];
        z[idx] = minv * r[idx];
        p[idx] = z[idx];
    }
    let mut rz: f64 = interior.iter().map(|&idx| r[idx] * z[idx]).sum();

    let residual_inf = |x: &[f64], u: &[f64]| -> f64 {
        // ∞-norm of Δ(u+x) − rhs over the interior
        let mut worst = 0.0_f64;
        for &idx in &interior {
            let mut acc = -6.0 * (u[idx] + x[idx]);
            for s in strides {
                acc += u[idx + s] + x[idx + s] + u[idx - s] + x[idx - s];
            }
            worst = worst.max((acc / h2 - rhs.data[idx]).abs());
        }
        worst
    };

    let max_iters = 20 * count + 100;
    let mut iters = 0;
    for iter in 0..max_iters {
        iters = iter;
        if iter % 8 == 0 && residual_inf(&x, &u) <= target {
            break;
        }
        apply(&p, &mut ap);
        let pap: f64 = interior.iter().map(|&idx| p[idx] * ap[idx]).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for &idx in &interior {
            x[idx] += alpha * p[idx];
            r[idx] -= alpha * ap[idx];
            z[idx] = minv * r[idx];
        }
        let rz_new: f64 = interior.iter().map(|&idx| r[idx] * z[idx]).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for &idx in &interior {
            p[idx] = z[idx] + beta * p[idx];
        }
    }
    for &idx in &interior {
        u[idx] += x[idx];
    }

    // Jacobi polish: CG settles a few ulps above the attainable residual;
    // the fixed-point sweep u ← (Σ neighbors − h² rhs)/6 removes that noise
    // (and is exact on dyadic data).
    let full_residual = |u: &[f64]| -> f64 {
        let mut worst = 0.0_f64;
        for &idx in &interior {
            let mut acc = -6.0 * u[idx];
            for s in strides {
                acc += u[idx + s] + u[idx - s];
            }
            worst = worst.max((acc / h2 - rhs.data[idx]).abs());
        }
        worst
    };
    let mut res = full_residual(&u);
    let mut next = u.clone();
    let mut stall = 0;
    for _ in 0..400 {
        if res <= target {
            break;
        }
        for &idx in &interior {
            let mut acc = -h2 * rhs.data[idx];
            for s in strides {
                acc += u[idx + s] + u[idx - s];
            }
            next[idx] = acc / 6.0;
        }
        std::mem::swap(&mut u, &mut next);
        let new_res = full_residual(&u);
        if new_res >= res {
            stall += 1;
            if stall > 20 {
                res = new_res;
                break;
            }
        } else {
            stall = 0;
        }
        res = new_res;
    }

    if res > target {
        return Err(FieldError::SolverFailure {
            residual: res,
            iters,
        });
    }
    Ok(Field { grid, data: u })
}

/// Componentwise Poisson solve for a vector field.
pub fn poisson_solve_vector(
    rhs: &VectorField,
    boundary: &VectorField,
) -> Result<VectorField, FieldError> {
    if rhs.grid != boundary.grid {
        return Err(FieldError::GridMismatch);
    }
    let grid = rhs.grid;
    let mut out = vec![Vector3::zeros(); grid.node_count()];
    for c in 0..3 {
        let rc = Field {
            grid,
            data: rhs.data.iter().map(|v| v[c]).collect(),
        };
        let bc = Field {
            grid,
            data: boundary.data.iter().map(|v| v[c]).collect(),
        };
        let sol = poisson_solve(&rc, &bc)?;
        for (o, s) in out.iter_mut().zip(sol.data.iter()) {
            o[c] = *s;
        }
    }
    Ok(Field { grid, data: out })
}

// ---------------------------------------------------------------------------
// Ball and shell quadrature.
// ---------------------------------------------------------------------------

/// A ball strictly inside the grid box.
#[derive(Debug, Clone, Copy)]
pub struct BallSpec {
    pub center: Vector3<f64>,
    pub r: f64,
}

impl BallSpec {
    pub fn new(grid: &Grid, center: Vector3<f64>, r: f64) -> Result<Self, FieldError> {
        if r <= 0.0 || r >= grid.dist_to_boundary(&center) {
            return Err(FieldError::BallOutsideDomain {
                center: [center.x, center.y, center.z],
                r,
            });
        }
        Ok(BallSpec { center, r })
    }
}

/// Subsamples per axis used for boundary-crossing cells.
const BALL_SUBSAMPLES: usize = 4;

/// `∫_{B_r(x₀)} F dx` by cell-wise quadrature. The value on a cell is the
/// mean of its 8 corner nodes; cells crossing the sphere get a fractional
/// weight from a 4³ subsample of the cell volume.
pub fn ball_integral(f: &ScalarField, ball: &BallSpec) -> Result<f64, FieldError> {
    BallSpec::new(&f.grid, ball.center, ball.r)?;
    let grid = f.grid;
    let n = grid.dims();
    let h = grid.h();
    let r2 = ball.r * ball.r;
    let half_diag = 0.5 * h * 3.0_f64.sqrt();

    let mut total = 0.0;
    // Sweep only cells near the ball's bounding box.
    let lo = ball.center.map(|c| c - ball.r);
    let hi = ball.center.map(|c| c + ball.r);
    let cell_range = |a: usize, loa: f64, hia: f64| -> (usize, usize) {
        let first = ((loa - grid.origin[a]) / h).floor().max(0.0) as usize;
        let last = (((hia - grid.origin[a]) / h).ceil().max(0.0) as usize).min(n[a] - 2);
        (first.min(n[a] - 2), last)
    };
    let (i0, i1) = cell_range(0, lo.x, hi.x);
    let (j0, j1) = cell_range(1, lo.y, hi.y);
    let (k0, k1) = cell_range(2, lo.z, hi.z);

    for i in i0..=i1 {
        for j in j0..=j1 {
            for k in k0..=k1 {
                let c = grid.position(i, j, k) + Vector3::from_element(0.5 * h);
                let dc = (c - ball.center).norm();
                let weight = if dc + half_diag <= ball.r {
                    1.0
                } else if dc - half_diag >= ball.r {
                    0.0
                } else {
                    // crossing cell: sampled volume fraction
                    let mut inside = 0usize;
                    let base = grid.position(i, j, k);
                    for si in 0..BALL_SUBSAMPLES {
                        for sj in 0..BALL_SUBSAMPLES {
                            for sk in 0..BALL_SUBSAMPLES {
                                let p = base
                                    + Vector3::new(
                                        (si as f64 + 0.5) * h / BALL_SUBSAMPLES as f64,
                                        (sj as f64 + 0.5) * h / BALL_SUBSAMPLES as f64,
                                        (sk as f64 + 0.5) * h / BALL_SUBSAMPLES as f64,
                                    );
                                if (p - ball.center).norm_squared() <= r2 {
                                    inside += 1;
                                }
                            }
                        }
                    }
                    inside as f64 / (BALL_SUBSAMPLES * BALL_SUBSAMPLES * BALL_SUBSAMPLES) as f64
                };
                if weight > 0.0 {
                    let mut cell_mean = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                cell_mean += f.data[grid.idx(i + di, j + dj, k + dk)];
                            }
                        }
                    }
                    cell_mean *= 0.125;
                    total += weight * cell_mean * h * h * h;
                }
            }
        }
    }
    Ok(total)
}

/// O(dr) surface-integral estimate
/// `∫_{∂B_r} F dH² ≈ (ball(r+dr) − ball(r)) / dr`.
pub fn shell_integral(
    f: &ScalarField,
    x0: &Vector3<f64>,
    r: f64,
    dr: f64,
) -> Result<f64, FieldError> {
    let outer = ball_integral(f, &BallSpec::new(&f.grid, *x0, r + dr)?)?;
    let inner = ball_integral(f, &BallSpec::new(&f.grid, *x0, r)?)?;
    Ok((outer - inner) / dr)
}

// ---------------------------------------------------------------------------
// Binary snapshot format.
// ---------------------------------------------------------------------------

/// 32-byte header: magic "CSRF", version u16, kind u16, dims 3×u32, h f64,
/// 4 reserved bytes; then the row-major little-endian f64 payload.
const SNAPSHOT_MAGIC: &[u8; 4] = b"CSRF";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotKind {
    Scalar = 0,
    Vector = 1,
    Matrix = 2,
    Rotation = 3,
}

/// A field read back from a snapshot.
#[derive(Debug, Clone)]
pub enum Snapshot {
    Scalar(ScalarField),
    Vector(VectorField),
    Matrix(MatrixField),
    Rotation(RotationField),
}

fn write_snapshot(
    path: &Path,
    grid: Grid,
    kind: SnapshotKind,
    payload: impl Iterator<Item = f64>,
) -> Result<(), FieldError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(kind as u16).to_le_bytes())?;
    for d in grid.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&grid.h().to_le_bytes())?;
    w.write_all(&[0u8; 4])?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_scalar_snapshot(path: &Path, f: &ScalarField) -> Result<(), FieldError> {
    write_snapshot(path, f.grid, SnapshotKind::Scalar, f.data.iter().copied())
}

pub fn write_vector_snapshot(path: &Path, f: &VectorField) -> Result<(), FieldError> {
    write_snapshot(
        path,
        f.grid,
        SnapshotKind::Vector,
        f.data.iter().flat_map(|v| [v.x, v.y, v.z]),
    )
}

pub fn write_matrix_snapshot(path: &Path, f: &MatrixField) -> Result<(), FieldError> {
    write_snapshot(
        path,
        f.grid,
        SnapshotKind::Matrix,
        f.data
            .iter()
            .flat_map(|m| (0..3).flat_map(move |r| (0..3).map(move |c| m[(r, c)]))),
    )
}

pub fn write_rotation_snapshot(path: &Path, f: &RotationField) -> Result<(), FieldError> {
    write_snapshot(
        path,
        f.grid,
        SnapshotKind::Rotation,
        f.data.iter().flat_map(|rot| {
            let m = *rot.matrix();
            (0..3).flat_map(move |r| (0..3).map(move |c| m[(r, c)]))
        }),
    )
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, FieldError> {
    let mut rd = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 32];
    rd.read_exact(&mut header)?;
    if &header[0..4] != SNAPSHOT_MAGIC {
        return Err(FieldError::BadSnapshot("bad magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != SNAPSHOT_VERSION {
        return Err(FieldError::BadSnapshot(format!(
            "unsupported version {version}"
        )));
    }
    let kind = u16::from_le_bytes([header[6], header[7]]);
    let dims = [
        u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize,
        u32::from_le_bytes([header[12], header[13], header[14], header[15]]) as usize,
        u32::from_le_bytes([header[16], header[17], header[18], header[19]]) as usize,
    ];
    let h = f64::from_le_bytes(header[20..28].try_into().unwrap());
    let grid = Grid::new(dims, h, [0.0; 3])
        .map_err(|e| FieldError::BadSnapshot(format!("bad grid in header: {e}")))?;
    let per_node = match kind {
        0 => 1,
        1 => 3,
        2 | 3 => 9,
        other => return Err(FieldError::BadSnapshot(format!("unknown kind {other}"))),
    };
    let count = grid.node_count() * per_node;
    let mut raw = vec![0.0_f64; count];
    let mut buf = [0u8; 8];
    for v in raw.iter_mut() {
        rd.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    match kind {
        0 => Ok(Snapshot::Scalar(Field { grid, data: raw })),
        1 => Ok(Snapshot::Vector(Field {
            grid,
            data: raw
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        })),
        2 => Ok(Snapshot::Matrix(Field {
            grid,
            data: raw
                .chunks_exact(9)
                .map(|c| Matrix3::new(c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8]))
                .collect(),
        })),
        3 => {
            let mut rots = Vec::with_capacity(grid.node_count());
            for (index, c) in raw.chunks_exact(9).enumerate() {
                let m = Matrix3::new(c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8]);
                let rot = Rotation::new(m)
                    .map_err(|source| FieldError::BadSnapshotRotation { index, source })?;
                rots.push(rot);
            }
            Ok(Snapshot::Rotation(RotationField { grid, data: rots }))
        }
        _ => unreachable!(),
    }
}
