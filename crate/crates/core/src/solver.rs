//! Discrete critical points of the Cosserat energy by alternating
//! minimization: the phi-block is a convex quadratic solved exactly by
//! preconditioned CG, the R-block takes Armijo-safeguarded Riemannian
//! descent steps along `exp_retract`, and the degenerate p-Laplacian is
//! handled by a regularization continuation eps → eps/4.
//!
//! Boundary nodes (Dirichlet data for both phi and R) are never modified.
//! A run is deterministic: fixed loop order, no randomness inside
//! [`minimize`]; seeded randomness only enters through the initial-state
//! builders in [`presets`].

use crate::energy::{
    cosserat_energy, el_residual, grad_phi, grad_r, l2_dot, l2_norm, EnergyError, ModelParams,
    State, TangentCoeffField,
};
use crate::fields::{poisson_solve_vector, FieldError, Grid, RotationField, VectorField};
use crate::geometry::{exp_retract, project_so3, Rotation};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("bad solve config: {0}")]
    BadConfig(String),
    #[error(
        "line search stalled: energy {energy:.6e}, |grad| {grad_norm:.3e}, last step {step:.3e}"
    )]
    LineSearchStalled {
        energy: f64,
        grad_norm: f64,
        step: f64,
    },
    #[error("outer iteration budget exhausted with residuals ({:.3e}, {:.3e})",
        .partial.report.final_residual.0, .partial.report.final_residual.1)]
    MaxOuterExceeded { partial: Box<PartialResult> },
}

/// Best state reached when the iteration budget runs out.
#[derive(Debug, Clone)]
pub struct PartialResult {
    pub state: State,
    pub report: SolveReport,
}

/// Knobs for [`minimize`].
#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// Target for `max(r_phi, r_R)` at the final eps stage.
    pub tol: f64,
    /// Outer (phi-solve + R-sweep) iterations per eps stage.
    pub max_outer: usize,
    /// R-descent steps per outer iteration.
    pub max_inner: usize,
    /// Initial step for the R line search, reset each outer iteration.
    pub step0: f64,
    /// Armijo slope fraction c and backtracking factor.
    pub armijo_c: f64,
    pub backtrack: f64,
    /// Regularization continuation; the final entry is clamped to the model
    /// eps. Ignored at p = 2 where eps drops out of the gradient.
    pub eps_schedule: Vec<f64>,
    /// Seed recorded in the report; used by the initial-state builders.
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol: 1e-7,
            max_outer: 400,
            max_inner: 60,
            step0: 0.1,
            armijo_c: 1e-4,
            backtrack: 0.5,
            eps_schedule: vec![1e-1, 2.5e-2, 6.25e-3, 1e-3],
            seed: 0,
        }
    }
}

impl SolveConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if !(self.tol > 0.0) {
            return Err(SolverError::BadConfig(format!("tol = {}", self.tol)));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(SolverError::BadConfig(format!(
                "armijo_c = {}",
                self.armijo_c
            )));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(SolverError::BadConfig(format!(
                "backtrack = {}",
                self.backtrack
            )));
        }
        if !(self.step0 > 0.0) {
            return Err(SolverError::BadConfig(format!("step0 = {}", self.step0)));
        }
        Ok(())
    }
}

/// What a [`minimize`] run did: energy trace, per-stage offsets, final
/// residuals. The trace is non-increasing within each stage.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub energy_trace: Vec<f64>,
    /// Start offset of each eps stage in `energy_trace`.
    pub stage_offsets: Vec<usize>,
    pub eps_stages: Vec<f64>,
    pub final_residual: (f64, f64),
    pub iterations: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl SolveReport {
    /// Largest in-stage energy increase (0 for a clean monotone trace).
    pub fn max_stage_increase(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (si, &start) in self.stage_offsets.iter().enumerate() {
            let end = self
                .stage_offsets
                .get(si + 1)
                .copied()
                .unwrap_or(self.energy_trace.len());
            for w in self.energy_trace[start..end].windows(2) {
                worst = worst.max(w[1] - w[0]);
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// phi-subproblem: exact solve of the translational quadratic.
// ---------------------------------------------------------------------------

/// Residual targets for [`solve_phi`], on the L² norm of the phi-gradient.
pub const PHI_SOLVE_REL_TOL: f64 = 1e-11;
pub const PHI_SOLVE_ABS_TOL: f64 = 1e-13;

/// Hessian-vector product of the translational energy in phi: the linear
/// part of `grad_phi` with R frozen (forcing and the affine offset drop out).
fn apply_phi_hessian(s: &State, prm: &ModelParams, v: &VectorField, out: &mut VectorField) {
    let grid = s.grid();
    let moved = State::new(
        VectorField::from_values(
            grid,
            s.phi
                .values()
                .iter()
                .zip(v.values())
                .map(|(p, d)| p + d)
                .collect(),
        )
        .expect("sized"),
        s.rot.clone(),
    )
    .expect("same grid");
    // grad is affine in phi: H v = grad(phi + v) − grad(phi)
    let g1 = grad_phi(&moved, prm).expect("finite");
    let g0 = grad_phi(s, prm).expect("finite");
    for ((o, a), b) in out.values_mut().iter_mut().zip(g1.values()).zip(g0.values()) {
        *o = a - b;
    }
}

/// Solves the phi-subproblem exactly: returns the phi minimizing the energy
/// with R and the boundary values of phi held fixed. Jacobi-preconditioned
/// CG, warm-started from the current phi; the energy cannot increase.
pub fn solve_phi(s: &State, prm: &ModelParams) -> Result<VectorField, SolverError> {
    let grid = s.grid();
    let g0 = grad_phi(s, prm)?;
    let target = PHI_SOLVE_REL_TOL * l2_norm(&g0) + PHI_SOLVE_ABS_TOL;
    if l2_norm(&g0) <= target {
        return Ok(s.phi.clone());
    }

    let diag = phi_hessian_diagonal(s, prm);
    let inv_diag: Vec<Vector3<f64>> = diag
        .values()
        .iter()
        .map(|d| Vector3::new(safe_inv(d.x), safe_inv(d.y), safe_inv(d.z)))
        .collect();

    // CG on H x = −g0 over interior nodes (x zero at the boundary).
    let mut x = VectorField::constant(grid, Vector3::zeros());
    let mut r = VectorField::from_values(grid, g0.values().iter().map(|v| -v).collect())
        .expect("sized");
    let mut z = VectorField::from_values(
        grid,
        r.values()
            .iter()
            .zip(&inv_diag)
            .map(|(rv, d)| rv.component_mul(d))
            .collect(),
    )
    .expect("sized");
    let mut p = z.clone();
    let mut hp = VectorField::constant(grid, Vector3::zeros());
    let mut rz = l2_dot(&r, &z);

    let max_iters = 6 * grid.node_count();
    let mut state_x = s.clone();
    for _ in 0..max_iters {
        if l2_norm(&r) <= target {
            break;
        }
        apply_phi_hessian(s, prm, &p, &mut hp);
        let php = l2_dot(&p, &hp);
        if php <= 0.0 {
            break;
        }
        let alpha = rz / php;
        for ((xv, pv), (rv, hv)) in x
            .values_mut()
            .iter_mut()
            .zip(p.values())
            .zip(r.values_mut().iter_mut().zip(hp.values()))
        {
            *xv += pv * alpha;
            *rv -= hv * alpha;
        }
        for ((zv, rv), d) in z.values_mut().iter_mut().zip(r.values()).zip(&inv_diag) {
            *zv = rv.component_mul(d);
        }
        let rz_new = l2_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pv, zv) in p.values_mut().iter_mut().zip(z.values()) {
            *pv = zv + *pv * beta;
        }
    }

    for ((out, xv), orig) in state_x
        .phi
        .values_mut()
        .iter_mut()
        .zip(x.values())
        .zip(s.phi.values())
    {
        *out = orig + xv;
    }
    let g_final = grad_phi(&state_x, prm)?;
    let res = l2_norm(&g_final);
    if res > 10.0 * target.max(PHI_SOLVE_ABS_TOL) {
        return Err(SolverError::Field(FieldError::SolverFailure {
            residual: res,
            iters: max_iters,
        }));
    }
    Ok(state_x.phi)
}

fn safe_inv(d: f64) -> f64 {
    if d.abs() > 1e-300 {
        1.0 / d
    } else {
        1.0
    }
}

/// Diagonal of the phi-Hessian (for Jacobi preconditioning), assembled by
/// the same cell/corner/edge sweep as the gradient.
fn phi_hessian_diagonal(s: &State, prm: &ModelParams) -> VectorField {
    let grid = s.grid();
    let h = grid.h();
    let w = h * h * h / 8.0;
    let scale = 2.0 * w / (h * h) / (h * h * h);
    let rot = s.rot.values();
    let mut diag = vec![Vector3::zeros(); grid.node_count()];

    let [ci, cj, ck] = grid.cell_dims();
    for i in 0..ci {
        for j in 0..cj {
            for k in 0..ck {
                for s0 in 0..2 {
                    for s1 in 0..2 {
                        for s2 in 0..2 {
                            let node = grid.idx(i + s0, j + s1, k + s2);
                            let r = rot[node].matrix();
                            // per direction d and component c the slot
                            // coefficient is [R PᵗP(Rᵗ e_c e_dᵗ)]_{cd};
                            // each incident edge touches this corner once
                            // per direction, and the corner across the edge
                            // contributes the same amount to the other
                            // endpoint, handled when that corner is visited.
                            for d in 0..3 {
                                let mut contrib = Vector3::zeros();
                                for c in 0..3 {
                                    let mut e = Matrix3::zeros();
                                    e[(c, d)] = 1.0;
                                    let m = r * crate::geometry::pmap(
                                        &crate::geometry::pmap(&(r.transpose() * e), &prm.mu),
                                        &prm.mu,
                                    );
                                    contrib[c] = m[(c, d)];
                                }
                                // this corner's quadrature term involves the
                                // edge through the corner in direction d;
                                // both endpoints of that edge see the same
                                // squared coupling.
                                let bits = [s0, s1, s2];
                                let mut lo = bits;
                                let mut hi = bits;
                                lo[d] = 0;
                                hi[d] = 1;
                                let n_lo = grid.idx(i + lo[0], j + lo[1], k + lo[2]);
                                let n_hi = grid.idx(i + hi[0], j + hi[1], k + hi[2]);
                                diag[n_lo] += contrib * scale;
                                diag[n_hi] += contrib * scale;
                            }
                        }
                    }
                }
            }
        }
    }
    VectorField::from_values(grid, diag).expect("sized")
}

// ---------------------------------------------------------------------------
// R-descent.
// ---------------------------------------------------------------------------

/// One Armijo-backtracked Riemannian descent step in R. Returns the updated
/// state and the accepted step (0 if the gradient already vanishes).
pub fn descent_step_r(
    s: &State,
    prm: &ModelParams,
    cfg: &SolveConfig,
) -> Result<(State, f64), SolverError> {
    cfg.validate()?;
    let energy = cosserat_energy(s, prm)?;
    let g = grad_r(s, prm)?;
    let g2 = l2_dot(&g, &g);
    if g2 == 0.0 {
        return Ok((s.clone(), 0.0));
    }
    let mut trial = s.clone();
    let (step, new_energy) = armijo_r_step(s, prm, cfg, &g, g2, energy, cfg.step0, &mut trial)?;
    debug_assert!(new_energy <= energy);
    Ok((trial, step))
}

/// Backtracking line search along `exp_retract(R, −grad, t)`; writes the
/// accepted rotations into `trial` and returns (step, new energy).
fn armijo_r_step(
    s: &State,
    prm: &ModelParams,
    cfg: &SolveConfig,
    g: &TangentCoeffField,
    g2: f64,
    energy: f64,
    step_init: f64,
    trial: &mut State,
) -> Result<(f64, f64), SolverError> {
    let grid = s.grid();
    let [n0, n1, n2] = grid.dims();
    let mut t = step_init;
    for _ in 0..80 {
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let idx = grid.idx(i, j, k);
                    if grid.is_boundary(i, j, k) {
                        trial.rot.values_mut()[idx] = s.rot.values()[idx];
                        continue;
                    }
                    let c = g.values()[idx];
                    trial.rot.values_mut()[idx] =
                        exp_retract(&s.rot.values()[idx], [-c.x, -c.y, -c.z], t);
                }
            }
        }
        let e_new = cosserat_energy(trial, prm)?;
        if e_new <= energy - cfg.armijo_c * t * g2 {
            // re-orthonormalize accepted interior iterates to bound drift;
            // boundary nodes stay bit-identical to the Dirichlet data
            for i in 0..n0 {
                for j in 0..n1 {
                    for k in 0..n2 {
                        if grid.is_boundary(i, j, k) {
                            continue;
                        }
                        let idx = grid.idx(i, j, k);
                        let r = &mut trial.rot.values_mut()[idx];
                        *r = project_so3(r.matrix()).expect("retraction output near SO(3)");
                    }
                }
            }
            return Ok((t, cosserat_energy(trial, prm)?));
        }
        t *= cfg.backtrack;
    }
    Err(SolverError::LineSearchStalled {
        energy,
        grad_norm: g2.sqrt(),
        step: t,
    })
}

// ---------------------------------------------------------------------------
// Alternating minimization with eps continuation.
// ---------------------------------------------------------------------------

/// Minimizes the Cosserat energy from `s0` with the boundary nodes of `s0`
/// held fixed. Returns the critical point and a report; deterministic given
/// the input state.
pub fn minimize(
    s0: &State,
    prm: &ModelParams,
    cfg: &SolveConfig,
) -> Result<(State, SolveReport), SolverError> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut s = s0.clone();

    let mut stages: Vec<f64> = if prm.p == 2.0 {
        // eps drops out of the p = 2 gradient entirely
        vec![prm.eps]
    } else {
        let mut v: Vec<f64> = cfg
            .eps_schedule
            .iter()
            .copied()
            .filter(|&e| e > prm.eps)
            .collect();
        v.push(prm.eps);
        v
    };
    if stages.is_empty() {
        stages = vec![prm.eps];
    }

    let mut trace = Vec::new();
    let mut stage_offsets = Vec::new();
    let mut iterations = 0usize;

    let n_stages = stages.len();
    for (si, &eps) in stages.iter().enumerate() {
        let is_final = si + 1 == n_stages;
        let prm_s = prm.with_eps(eps);
        let stage_tol = if is_final {
            cfg.tol
        } else {
            (0.05 * eps).max(cfg.tol)
        };
        stage_offsets.push(trace.len());
        let mut energy = cosserat_energy(&s, &prm_s)?;
        trace.push(energy);

        let mut scratch = s.clone();
        let mut stage_done = false;
        for _outer in 0..cfg.max_outer {
            iterations += 1;

            // exact phi block
            s.phi = solve_phi(&s, &prm_s)?;
            scratch.phi = s.phi.clone();
            energy = cosserat_energy(&s, &prm_s)?;
            trace.push(energy);

            // R block: descent sweep with carried step and BB warm start
            let mut step = cfg.step0;
            let mut prev: Option<(TangentCoeffField, f64)> = None;
            let mut stalled = false;
            for _inner in 0..cfg.max_inner {
                let g = grad_r(&s, &prm_s)?;
                let g2 = l2_dot(&g, &g);
                if g2.sqrt() <= 0.5 * stage_tol {
                    break;
                }
                if let Some((ref g_prev, t_prev)) = prev {
                    // Barzilai–Borwein-style step seed: s ≈ −t·g_prev,
                    // y = g − g_prev in coefficient space.
                    let mut sy = 0.0;
                    let mut yy = 0.0;
                    for (gn, go) in g.values().iter().zip(g_prev.values()) {
                        let y = gn - go;
                        sy += (-t_prev) * go.dot(&y);
                        yy += y.dot(&y);
                    }
                    if yy > 0.0 && sy > 0.0 {
                        step = (sy / yy).clamp(1e-12, 1e6);
                    } else {
                        step *= 2.0;
                    }
                }
                match armijo_r_step(&s, &prm_s, cfg, &g, g2, energy, step, &mut scratch) {
                    Ok((t, e_new)) => {
                        std::mem::swap(&mut s.rot, &mut scratch.rot);
                        scratch.phi = s.phi.clone();
                        energy = e_new;
                        trace.push(energy);
                        prev = Some((g, t));
                        step = t;
                    }
                    Err(SolverError::LineSearchStalled { .. }) => {
                        stalled = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }

            let res = el_residual(&s, &prm_s)?;
            if res.0.max(res.1) <= stage_tol {
                stage_done = true;
            }
            if stage_done || (stalled && !is_final) {
                break;
            }
            if stalled && is_final {
                // degeneracy shrank as far as the schedule allows; the
                // residual check below decides success.
                break;
            }
        }

        if is_final {
            let res = el_residual(&s, &prm.with_eps(eps))?;
            let report = SolveReport {
                energy_trace: trace.clone(),
                stage_offsets: stage_offsets.clone(),
                eps_stages: stages.clone(),
                final_residual: res,
                iterations,
                seed: cfg.seed,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            if res.0.max(res.1) <= cfg.tol {
                return Ok((s, report));
            }
            return Err(SolverError::MaxOuterExceeded {
                partial: Box::new(PartialResult { state: s, report }),
            });
        }
    }
    unreachable!("final stage returns")
}

// ---------------------------------------------------------------------------
// State builders: boundary presets, homogeneous extensions, seeded noise.
// ---------------------------------------------------------------------------

/// Degree-zero homogeneous extension: `F(x) = map((x−center)/|x−center|)`
/// for both fields, with the box center itself taking the value at e₃.
pub fn homogeneous_extend(
    grid: Grid,
    phi_map: impl Fn(Vector3<f64>) -> Vector3<f64>,
    rot_map: impl Fn(Vector3<f64>) -> Rotation,
) -> State {
    let center = (grid.box_min() + grid.box_max()) * 0.5;
    let dir = |x: Vector3<f64>| -> Vector3<f64> {
        let r = x - center;
        let n = r.norm();
        if n < 1e-14 {
            Vector3::z()
        } else {
            r / n
        }
    };
    let phi = VectorField::from_fn(grid, |x| phi_map(dir(x)));
    let rot = RotationField::from_fn(grid, |x| rot_map(dir(x)));
    State::new(phi, rot).expect("same grid")
}

/// Boundary presets and initializers shared by the CLI and the test suites.
pub mod presets {
    use super::*;
    use crate::geometry::{covering_map, random_unit_quaternion, rodrigues, UnitQuaternion};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// phi = x, R = I everywhere: the global minimizer for zero forcing.
    pub fn trivial_state(grid: Grid) -> State {
        State::new(
            VectorField::from_fn(grid, |x| x),
            RotationField::constant(grid, Rotation::identity()),
        )
        .expect("same grid")
    }

    /// phi = x, R a rotation about `e₃` whose angle grows linearly along x₃:
    /// `R(x) = Rot(e₃, rate · (x₃ − center₃))`.
    pub fn twist_state(grid: Grid, rate: f64) -> State {
        let center = (grid.box_min() + grid.box_max()) * 0.5;
        State::new(
            VectorField::from_fn(grid, |x| x),
            RotationField::from_fn(grid, |x| rodrigues(Vector3::z(), rate * (x.z - center.z))),
        )
        .expect("same grid")
    }

    /// The antipodal-symmetric map `u ↦ 2uuᵗ − I₃` (the image of the
    /// equatorial embedding S² → S³ under the covering map) extended
    /// degree-zero homogeneously: |∇R|² = 16/|x−c|², singular at the center.
    pub fn hedgehog_state(grid: Grid) -> State {
        homogeneous_extend(
            grid,
            |_| Vector3::zeros(),
            |u| covering_map(&UnitQuaternion::normalize(0.0, u.x, u.y, u.z)),
        )
    }

    /// A weak-amplitude homogeneous configuration: rotation by
    /// `angle(u) = amplitude·u₃` about a fixed axis, extended degree-zero.
    /// Sphere energy scales with amplitude², so the center density can be
    /// tuned against a singular-set threshold.
    pub fn wobble_state(grid: Grid, amplitude: f64) -> State {
        homogeneous_extend(
            grid,
            |_| Vector3::zeros(),
            move |u| rodrigues(Vector3::x(), amplitude * u.z),
        )
    }

    /// Interior-only perturbation: phi gets a uniform jitter of size
    /// `amplitude·h`-free magnitude, R moves along random tangent coefficients
    /// of size `amplitude`. Boundary nodes are untouched.
    pub fn perturb_interior(s: &State, amplitude: f64, seed: u64) -> State {
        let grid = s.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = s.clone();
        let [n0, n1, n2] = grid.dims();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let idx = grid.idx(i, j, k);
                    if grid.is_boundary(i, j, k) {
                        continue;
                    }
                    let dv = Vector3::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    ) * (2.0 * amplitude);
                    out.phi.values_mut()[idx] += dv;
                    let dc = [
                        (rng.gen::<f64>() - 0.5) * 2.0 * amplitude,
                        (rng.gen::<f64>() - 0.5) * 2.0 * amplitude,
                        (rng.gen::<f64>() - 0.5) * 2.0 * amplitude,
                    ];
                    out.rot.values_mut()[idx] = exp_retract(&s.rot.values()[idx], dc, 1.0);
                }
            }
        }
        out
    }

    /// Interior R from uniformly random unit quaternions (boundary kept),
    /// phi from the harmonic extension of its boundary values.
    pub fn randomized_interior(s: &State, seed: u64) -> Result<State, SolverError> {
        let grid = s.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = s.clone();
        let [n0, n1, n2] = grid.dims();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    if grid.is_boundary(i, j, k) {
                        continue;
                    }
                    let idx = grid.idx(i, j, k);
                    out.rot.values_mut()[idx] = covering_map(&random_unit_quaternion(&mut rng));
                }
            }
        }
        out.phi = harmonic_phi_extension(&s.phi)?;
        Ok(out)
    }

    /// Harmonic extension of the boundary values of phi.
    pub fn harmonic_phi_extension(phi: &VectorField) -> Result<VectorField, SolverError> {
        let zero = VectorField::constant(phi.grid(), Vector3::zeros());
        Ok(poisson_solve_vector(&zero, phi)?)
    }

    /// Smooth nontrivial rotation map on the unit sphere: rotation about a
    /// direction-dependent axis by an angle proportional to u₃.
    pub fn smooth_boundary_rotation(u: Vector3<f64>, strength: f64) -> Rotation {
        rodrigues(Vector3::new(u.y, -u.x, 0.5), strength * u.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::testutil::random_state;
    use crate::fields::{divergence_matrix, MatrixField};
    use crate::geometry::ModuliSet;
    use approx::assert_abs_diff_eq;

    fn unit_params(p: f64, grid: Grid) -> ModelParams {
        ModelParams::zero_forcing(p, ModuliSet::unit(), 1e-3, grid).unwrap()
    }

    #[test]
    fn solve_phi_identity_boundary_is_exact() {
        let grid = Grid::unit_box(9);
        let prm = unit_params(2.0, grid);
        let s = presets::trivial_state(grid);
        let phi = solve_phi(&s, &prm).unwrap();
        for (a, b) in phi.values().iter().zip(s.phi.values()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn solve_phi_recovers_discretely_manufactured_solution() {
        // Build f so that a chosen smooth phi* is the exact discrete
        // minimizer, then solve from a harmonic-extension start.
        let grid = Grid::unit_box(9);
        let mut prm = unit_params(2.0, grid);
        let target = VectorField::from_fn(grid, |x| {
            x + Vector3::new(
                0.05 * (3.0 * x.y).sin(),
                -0.04 * (2.0 * x.z).cos(),
                0.03 * x.x * x.x,
            )
        });
        let twist = presets::twist_state(grid, 0.8);
        let s_target = State::new(target.clone(), twist.rot.clone()).unwrap();
        let g = grad_phi(&s_target, &prm).unwrap();
        // cancel the residual through the force slot: grad += w·f/h³
        let h3 = grid.h().powi(3);
        prm.f = VectorField::from_values(
            grid,
            (0..grid.node_count())
                .map(|idx| {
                    let [i, j, k] = grid.coords(idx);
                    if grid.is_boundary(i, j, k) {
                        Vector3::zeros()
                    } else {
                        -g.values()[idx] * h3 / grid.node_weight(i, j, k)
                    }
                })
                .collect(),
        )
        .unwrap();
        let mut start = s_target.clone();
        start.phi = presets::harmonic_phi_extension(&target).unwrap();
        let solved = solve_phi(&start, &prm).unwrap();
        let mut worst = 0.0_f64;
        for (a, b) in solved.values().iter().zip(target.values()) {
            worst = worst.max((a - b).norm());
        }
        assert!(worst < 1e-7, "recovered phi off by {worst}");
    }

    #[test]
    fn solve_phi_never_increases_energy_and_is_idempotent() {
        let grid = Grid::unit_box(7);
        let prm = unit_params(2.3, grid);
        let mut s = random_state(grid, 7, 0.3);
        let e0 = cosserat_energy(&s, &prm).unwrap();
        let phi1 = solve_phi(&s, &prm).unwrap();
        s.phi = phi1.clone();
        let e1 = cosserat_energy(&s, &prm).unwrap();
        assert!(e1 <= e0 + 1e-12 * e0.abs());
        let phi2 = solve_phi(&s, &prm).unwrap();
        let mut diff = 0.0_f64;
        for (a, b) in phi1.values().iter().zip(phi2.values()) {
            diff = diff.max((a - b).norm());
        }
        assert!(diff < 1e-9, "second solve moved phi by {diff}");
    }

    #[test]
    fn solve_phi_matches_poisson_structure_at_unit_moduli() {
        // at μ = 1 the optimality system is the discrete Δphi = div R + f/2;
        // check grad_phi vanishes and the central-difference residual of the
        // strong form is O(h²)-small on a smooth state.
        let grid = Grid::unit_box(13);
        let prm = unit_params(2.0, grid);
        let mut s = presets::twist_state(grid, 0.9);
        s.phi = solve_phi(&s, &prm).unwrap();
        let g = grad_phi(&s, &prm).unwrap();
        assert!(l2_norm(&g) < 1e-9);

        let lap = crate::fields::laplacian_vector(&s.phi);
        let divr = divergence_matrix(&s.rot.as_matrix_field());
        let mut interior_mismatch = 0.0_f64;
        let [n0, n1, n2] = grid.dims();
        let h3 = grid.h().powi(3);
        let mut count = 0;
        for i in 2..n0 - 2 {
            for j in 2..n1 - 2 {
                for k in 2..n2 - 2 {
                    let idx = grid.idx(i, j, k);
                    interior_mismatch += (lap.values()[idx] - divr.values()[idx]).norm_squared() * h3;
                    count += 1;
                }
            }
        }
        let _ = count;
        assert!(interior_mismatch.sqrt() < 0.05, "strong-form gap {}", interior_mismatch.sqrt());
    }

    #[test]
    fn descent_step_is_noop_at_critical_point() {
        let grid = Grid::unit_box(7);
        let prm = unit_params(2.0, grid);
        let s = presets::trivial_state(grid);
        let (s2, step) = descent_step_r(&s, &prm, &SolveConfig::default()).unwrap();
        assert_eq!(step, 0.0);
        for (a, b) in s2.rot.values().iter().zip(s.rot.values()) {
            assert_eq!(a.matrix(), b.matrix());
        }
    }

    #[test]
    fn descent_satisfies_armijo_inequality_on_random_problems() {
        let grid = Grid::unit_box(6);
        let cfg = SolveConfig::default();
        for seed in 0..4 {
            let prm = unit_params(2.0 + 0.2 * seed as f64, grid);
            let s = random_state(grid, 100 + seed as u64, 0.4);
            let e0 = cosserat_energy(&s, &prm).unwrap();
            let g = grad_r(&s, &prm).unwrap();
            let g2 = l2_dot(&g, &g);
            let (s2, t) = descent_step_r(&s, &prm, &cfg).unwrap();
            let e1 = cosserat_energy(&s2, &prm).unwrap();
            assert!(t > 0.0);
            assert!(
                e1 <= e0 - cfg.armijo_c * t * g2 + 1e-12 * e0.abs(),
                "armijo violated: {e1} vs {e0}, t {t}"
            );
        }
    }

    #[test]
    fn single_node_toy_problem_converges_to_identity() {
        // one free node, phi = x fixed: the R-energy is |Rᵗ−I|²-like with
        // minimizer I (6 − 2 tr R over SO(3)).
        let grid = Grid::unit_box(3);
        let prm = unit_params(2.0, grid);
        let s0 = presets::perturb_interior(&presets::trivial_state(grid), 0.9, 5);
        let cfg = SolveConfig {
            tol: 1e-9,
            ..Default::default()
        };
        let (s, report) = minimize(&s0, &prm, &cfg).unwrap();
        let center = grid.idx(1, 1, 1);
        let err = (s.rot.values()[center].matrix() - Rotation::identity().matrix()).norm();
        assert!(err < 1e-6, "center rotation off identity by {err}");
        assert!(report.final_residual.1 <= 1e-9);
    }

    #[test]
    fn minimize_trivial_boundary_reaches_zero_energy() {
        let grid = Grid::unit_box(9);
        let prm = unit_params(2.0, grid);
        let s0 = presets::perturb_interior(&presets::trivial_state(grid), 0.1, 11);
        let cfg = SolveConfig {
            tol: 1e-8,
            ..Default::default()
        };
        let (s, report) = minimize(&s0, &prm, &cfg).unwrap();
        let e = cosserat_energy(&s, &prm).unwrap();
        assert!(e <= 1e-10, "final energy {e}");
        assert!(report.final_residual.0 <= 1e-8 && report.final_residual.1 <= 1e-8);
        assert!(report.max_stage_increase() <= 1e-12);
    }

    #[test]
    fn minimize_is_deterministic_per_seed() {
        let grid = Grid::unit_box(7);
        let prm = unit_params(2.13, grid);
        let s0 = presets::perturb_interior(&presets::trivial_state(grid), 0.2, 21);
        let cfg = SolveConfig {
            tol: 1e-6,
            ..Default::default()
        };
        let (_, r1) = minimize(&s0, &prm, &cfg).unwrap();
        let (_, r2) = minimize(&s0, &prm, &cfg).unwrap();
        assert_eq!(r1.energy_trace.len(), r2.energy_trace.len());
        for (a, b) in r1.energy_trace.iter().zip(&r2.energy_trace) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn minimize_preserves_boundary_and_rotation_validity() {
        let grid = Grid::unit_box(9);
        let prm = unit_params(2.4, grid);
        let boundary_ref = presets::twist_state(grid, 1.1);
        let s0 = presets::perturb_interior(&boundary_ref, 0.15, 31);
        let cfg = SolveConfig {
            tol: 1e-5,
            ..Default::default()
        };
        let (s, _) = minimize(&s0, &prm, &cfg).unwrap();
        let [n0, n1, n2] = grid.dims();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    if grid.is_boundary(i, j, k) {
                        assert_eq!(
                            s.rot.at(i, j, k).matrix(),
                            boundary_ref.rot.at(i, j, k).matrix()
                        );
                        assert_eq!(s.phi.at(i, j, k), boundary_ref.phi.at(i, j, k));
                    }
                }
            }
        }
        assert!(s.rot.max_defect() < 1e-10);
    }

    #[test]
    fn minimize_budget_exhaustion_returns_partial_state() {
        let grid = Grid::unit_box(9);
        let prm = unit_params(2.0, grid);
        let s0 = presets::perturb_interior(&presets::twist_state(grid, 1.0), 0.2, 41);
        let cfg = SolveConfig {
            tol: 1e-13,
            max_outer: 1,
            max_inner: 2,
            ..Default::default()
        };
        match minimize(&s0, &prm, &cfg) {
            Err(SolverError::MaxOuterExceeded { partial }) => {
                assert!(partial.report.energy_trace.len() >= 2);
                assert!(partial.state.rot.max_defect() < 1e-10);
            }
            other => panic!("expected partial result, got {other:?}"),
        }
    }

    #[test]
    fn homogeneous_extension_properties() {
        let grid = Grid::unit_box(17);
        // constant map extends to a constant field
        let s = homogeneous_extend(
            grid,
            |_| Vector3::new(1.0, 2.0, 3.0),
            |_| Rotation::identity(),
        );
        for v in s.phi.values() {
            assert_eq!(*v, Vector3::new(1.0, 2.0, 3.0));
        }

        // hedgehog: all nodes valid rotations, radial derivative ≈ 0 away
        // from the center
        let s = presets::hedgehog_state(grid);
        assert!(s.rot.max_defect() < 1e-12);
        let center = (grid.box_min() + grid.box_max()) * 0.5;
        let rmat = s.rot.as_matrix_field();
        let rad2 = crate::fields::radial_derivative_sq_matrix(&rmat, &center);
        let mut worst = 0.0_f64;
        for idx in 0..grid.node_count() {
            let [i, j, k] = grid.coords(idx);
            if (grid.position(i, j, k) - center).norm() > 0.25 {
                worst = worst.max(rad2.values()[idx]);
            }
        }
        assert!(worst < 0.5, "radial derivative squared up to {worst}");
        let _ = MatrixField::constant(grid, Matrix3::zeros());
    }

    #[test]
    fn wobble_state_scales_quadratically() {
        let grid = Grid::unit_box(17);
        let prm = unit_params(2.0, grid);
        let e1 = cosserat_energy(&presets::wobble_state(grid, 0.1), &prm).unwrap();
        let e2 = cosserat_energy(&presets::wobble_state(grid, 0.2), &prm).unwrap();
        // phi ≡ 0 contributes the constant 3|Ω| translational background
        let s0 = presets::wobble_state(grid, 0.0);
        let e0 = cosserat_energy(&s0, &prm).unwrap();
        assert_abs_diff_eq!((e2 - e0) / (e1 - e0), 4.0, epsilon = 0.2);
    }
}
