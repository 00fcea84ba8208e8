//! Exact linear-algebra kernel for SO(3), its Lie algebra so(3), the
//! quaternion double cover, and the material map `P`.
//!
//! Conventions used throughout the crate:
//!
//! * so(3) carries the orthonormal basis
//!   `a_i = hat(e_i)/√2` (Frobenius inner product), so `Σ_i a_iᵀ a_i = I₃`.
//! * The tangent space at `R` is `T_R SO(3) = { Q | RᵗQ + QᵗR = 0 }` with
//!   orthonormal frame `V_i(R) = a_i R`.
//! * The material map is
//!   `P(A) = √μ₁ devsym A + √μ_c skew A + √μ₂ (tr A) I₃` with
//!   `devsym A = ½(A + Aᵗ) − (tr A) I₃` and `skew A = ½(A − Aᵗ)`.
//!   Note the trace coefficient of `devsym`: it is *not* the conventional
//!   1/3-deviatoric. With this convention `P = Id` at unit moduli, which the
//!   rest of the crate relies on; do not "fix" it.
//!
//! All operations here are pure functions of immutable values and are safe to
//! share across threads.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Frobenius tolerance for the algebraic invariants (orthogonality,
/// determinant, unit norm).
pub const ALGEBRAIC_TOL: f64 = 1e-12;

/// Tolerance for accumulated drift over long operation chains (descent runs).
pub const DRIFT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// Input matrix is not a rotation to within [`ALGEBRAIC_TOL`].
    #[error("matrix is not in SO(3): orthogonality defect {defect:.3e}, det {det:.6}")]
    NotARotation { defect: f64, det: f64 },
    /// Quaternion norm differs from 1 beyond [`ALGEBRAIC_TOL`].
    #[error("quaternion is not unit: |q| = {norm:.12}")]
    NotUnit { norm: f64 },
    /// Polar projection failed: the input is too far from SO(3).
    #[error("degenerate input to SO(3) projection: det of polar factor {det:.3e} <= 0")]
    DegenerateProjection { det: f64 },
}

/// A rotation matrix, validated to lie on SO(3).
///
/// Stored as a full 3×3 matrix: the frames `V_i(R) = a_i R` and all energy
/// formulas are matrix-native. Quaternions appear only through
/// [`covering_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    /// Validates `RᵗR = I₃` and `det R = 1` to [`ALGEBRAIC_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let defect = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if defect > ALGEBRAIC_TOL || (det - 1.0).abs() > ALGEBRAIC_TOL {
            return Err(GeometryError::NotARotation { defect, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that is known to be a rotation by construction
    /// (products of rotations, Rodrigues exponentials, polar factors).
    /// Checked in debug builds only.
    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        debug_assert!(
            (m.transpose() * m - Matrix3::identity()).norm() < 1e-9,
            "rotation drifted off SO(3)"
        );
        Rotation(m)
    }

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Frobenius distance of `RᵗR` from the identity; diagnostic for drift.
    pub fn orthogonality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }
}

impl From<Rotation> for Matrix3<f64> {
    fn from(r: Rotation) -> Self {
        r.0
    }
}

/// A point on the unit 3-sphere, the double cover of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    /// Validates `w² + x² + y² + z² = 1` to [`ALGEBRAIC_TOL`].
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > ALGEBRAIC_TOL {
            return Err(GeometryError::NotUnit { norm });
        }
        Ok(UnitQuaternion { w, x, y, z })
    }

    /// Normalizes an arbitrary nonzero 4-tuple onto the sphere.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        UnitQuaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn neg(&self) -> Self {
        UnitQuaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// The orthonormal basis `(a₁, a₂, a₃)` of so(3), each `hat(e_i)/√2`.
#[derive(Debug, Clone, Copy)]
pub struct SkewBasis {
    mats: [Matrix3<f64>; 3],
}

impl SkewBasis {
    pub fn mats(&self) -> &[Matrix3<f64>; 3] {
        &self.mats
    }
}

impl std::ops::Index<usize> for SkewBasis {
    type Output = Matrix3<f64>;
    fn index(&self, i: usize) -> &Matrix3<f64> {
        &self.mats[i]
    }
}

/// Returns the standard orthonormal base of so(3):
///
/// ```text
/// a₁ = 1/√2 [0 0 0; 0 0 -1; 0 1 0]
/// a₂ = 1/√2 [0 0 1; 0 0 0; -1 0 0]
/// a₃ = 1/√2 [0 -1 0; 1 0 0; 0 0 0]
/// ```
pub fn lie_basis() -> SkewBasis {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let a1 = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -s, 0.0, s, 0.0);
    let a2 = Matrix3::new(0.0, 0.0, s, 0.0, 0.0, 0.0, -s, 0.0, 0.0);
    let a3 = Matrix3::new(0.0, -s, 0.0, s, 0.0, 0.0, 0.0, 0.0, 0.0);
    SkewBasis { mats: [a1, a2, a3] }
}

/// The orthonormal tangent frame `V_i(R) = a_i R` of `T_R SO(3)`.
pub fn tangent_frame(r: &Rotation) -> [Matrix3<f64>; 3] {
    let basis = lie_basis();
    let m = r.matrix();
    [basis[0] * m, basis[1] * m, basis[2] * m]
}

/// A tangent vector to SO(3) at `base`, stored in frame coordinates:
/// the realized matrix is `Q = Σ_i coeffs_i · a_i · base`.
#[derive(Debug, Clone, Copy)]
pub struct TangentVector {
    pub base: Rotation,
    pub coeffs: [f64; 3],
}

impl TangentVector {
    pub fn realize(&self) -> Matrix3<f64> {
        let frame = tangent_frame(&self.base);
        frame[0] * self.coeffs[0] + frame[1] * self.coeffs[1] + frame[2] * self.coeffs[2]
    }

    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }
}

/// The locally isometric 2-to-1 covering map π: S³ → SO(3),
///
/// ```text
///            [ 1-2y²-2z²   2xy-2zw    2xz+2yw  ]
/// π(w,x,y,z)=[ 2xy+2zw     1-2x²-2z²  2yz-2xw  ]
///            [ 2xz-2yw     2yz+2xw    1-2x²-2y² ]
/// ```
///
/// π(q) = π(−q) holds bit-for-bit (every entry is quadratic in q).
/// The Frobenius scaling of dπ is the constant 2√2, measured rather than
/// printed anywhere; see the tests.
pub fn covering_map(q: &UnitQuaternion) -> Rotation {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let m = Matrix3::new(
        1.0 - 2.0 * y * y - 2.0 * z * z,
        2.0 * x * y - 2.0 * z * w,
        2.0 * x * z + 2.0 * y * w,
        2.0 * x * y + 2.0 * z * w,
        1.0 - 2.0 * x * x - 2.0 * z * z,
        2.0 * y * z - 2.0 * x * w,
        2.0 * x * z - 2.0 * y * w,
        2.0 * y * z + 2.0 * x * w,
        1.0 - 2.0 * x * x - 2.0 * y * y,
    );
    Rotation::new_unchecked(m)
}

/// Rotation by `angle` about the (not necessarily unit) `axis`, by the
/// Rodrigues formula. Returns the identity for a vanishing axis.
pub fn rodrigues(axis: Vector3<f64>, angle: f64) -> Rotation {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Rotation::identity();
    }
    let u = axis / n;
    let k = hat(u);
    let m = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
    Rotation::new_unchecked(m)
}

/// The hat map: `hat(u) v = u × v`.
pub fn hat(u: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// Moves `R` along the tangent direction `Σ c_i V_i(R)` by `step`:
///
/// `exp_retract(R, c, t) = exp(t Σ c_i a_i) · R`,
///
/// the geodesic through `R` with initial velocity `Σ c_i a_i R`. Exact
/// Rodrigues exponential, so the result is a rotation to machine precision.
pub fn exp_retract(r: &Rotation, c: [f64; 3], step: f64) -> Rotation {
    // Σ c_i a_i = hat(c)/√2: axis c, angle t|c|/√2.
    let cv = Vector3::new(c[0], c[1], c[2]);
    let n = cv.norm();
    if n == 0.0 || step == 0.0 {
        return *r;
    }
    let angle = step * n * std::f64::consts::FRAC_1_SQRT_2;
    let rot = rodrigues(cv, angle);
    Rotation::new_unchecked(rot.matrix() * r.matrix())
}

/// Positive elastic moduli (μ₁, μ_c, μ₂) entering the material map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModuliSet {
    mu1: f64,
    muc: f64,
    mu2: f64,
}

impl ModuliSet {
    /// All moduli must be strictly positive.
    pub fn new(mu1: f64, muc: f64, mu2: f64) -> Option<Self> {
        if mu1 > 0.0 && muc > 0.0 && mu2 > 0.0 {
            Some(ModuliSet { mu1, muc, mu2 })
        } else {
            None
        }
    }

    /// μ₁ = μ_c = μ₂ = 1, for which `P = Id`.
    pub fn unit() -> Self {
        ModuliSet {
            mu1: 1.0,
            muc: 1.0,
            mu2: 1.0,
        }
    }

    pub fn mu1(&self) -> f64 {
        self.mu1
    }
    pub fn muc(&self) -> f64 {
        self.muc
    }
    pub fn mu2(&self) -> f64 {
        self.mu2
    }

    pub fn is_unit(&self) -> bool {
        self.mu1 == 1.0 && self.muc == 1.0 && self.mu2 == 1.0
    }
}

/// The material map `P(A) = √μ₁ devsym A + √μ_c skew A + √μ₂ (tr A) I₃`.
///
/// `P` is linear and self-adjoint in the Frobenius inner product, so
/// `PᵗP(A) = P(P(A))`.
pub fn pmap(a: &Matrix3<f64>, mu: &ModuliSet) -> Matrix3<f64> {
    let tr = a.trace();
    let sym = (a + a.transpose()) * 0.5;
    let skew = (a - a.transpose()) * 0.5;
    let devsym = sym - Matrix3::identity() * tr;
    devsym * mu.mu1.sqrt() + skew * mu.muc.sqrt() + Matrix3::identity() * (tr * mu.mu2.sqrt())
}

/// Frame coordinates of the tangential part of `G` at `R`:
/// `c_i = ⟨G, V_i(R)⟩_F`. The remainder `G − Σ c_i V_i(R)` is
/// Frobenius-orthogonal to `T_R SO(3)`.
pub fn project_tangent(r: &Rotation, g: &Matrix3<f64>) -> [f64; 3] {
    let frame = tangent_frame(r);
    [g.dot(&frame[0]), g.dot(&frame[1]), g.dot(&frame[2])]
}

/// Uniformly random unit quaternion (Marsaglia rejection from the 4-ball).
pub fn random_unit_quaternion(rng: &mut impl rand::Rng) -> UnitQuaternion {
    loop {
        let v: [f64; 4] = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            return UnitQuaternion::normalize(v[0], v[1], v[2], v[3]);
        }
    }
}

/// Uniformly random rotation, via the double cover.
pub fn random_rotation(rng: &mut impl rand::Rng) -> Rotation {
    covering_map(&random_unit_quaternion(rng))
}

/// Nearest rotation to `A` in Frobenius norm (polar factor with det +1),
/// used to re-orthonormalize after floating-point drift.
pub fn project_so3(a: &Matrix3<f64>) -> Result<Rotation, GeometryError> {
    let svd = a.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let det = (u * vt).determinant();
    if det <= 0.0 || svd.singular_values.min() <= 0.0 {
        return Err(GeometryError::DegenerateProjection { det });
    }
    Ok(Rotation::new_unchecked(u * vt))
}
