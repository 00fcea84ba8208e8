//! The three subcommands: minimize, diagnose, sweep. Every emitted file is
//! a deterministic function of (config, seed); wall-clock time goes to
//! stderr only.

use crate::config::{
    load_state_snapshots, CChoice, ConfigError, DiagKind, RunConfig, SWEEP_COMBINATION_LIMIT,
};
use cosserat_core::diagnostics::{
    calibrate_c, detect_singular_set, divcurl_check, monotonicity_scan, stability_rayleigh,
    stationarity_residual, stationarity_tolerance, MonotonicityTable, MIN_RADIUS_CELLS,
};
use cosserat_core::energy::{cosserat_energy, el_residual, State};
use cosserat_core::fields::{
    write_rotation_snapshot, write_vector_snapshot, Grid, ScalarField, VectorField,
};
use cosserat_core::solver::{minimize, SolveReport, SolverError};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub verbose: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn load_config(path: &Path) -> Result<RunConfig, String> {
    if !path.exists() {
        return Err(format!("config file not found: {}", path.display()));
    }
    RunConfig::load(path).map_err(|e| match e {
        ConfigError::Parse(inner) => format!("{}: {inner}", path.display()),
        other => format!("{}: {other}", path.display()),
    })
}

// ---------------------------------------------------------------------------
// minimize
// ---------------------------------------------------------------------------

pub fn cmd_minimize(config_path: &Path, ov: &Overrides) -> i32 {
    let mut cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(seed) = ov.seed {
        cfg.solve.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.output.dir = out.clone();
    }
    match run_minimize(&cfg, ov.verbose) {
        Ok(outcome) => {
            if outcome.converged {
                EXIT_OK
            } else {
                eprintln!(
                    "partial result: residuals ({:.3e}, {:.3e}) above tol {:.3e}",
                    outcome.report.final_residual.0, outcome.report.final_residual.1, cfg.solve.tol
                );
                EXIT_PARTIAL
            }
        }
        Err(e) => fail(e),
    }
}

pub struct MinimizeOutcome {
    pub report: SolveReport,
    pub final_energy: f64,
    pub converged: bool,
}

pub fn run_minimize(cfg: &RunConfig, verbose: bool) -> Result<MinimizeOutcome, String> {
    let grid = cfg.grid().map_err(|e| e.to_string())?;
    let prm = cfg.model_params(grid).map_err(|e| e.to_string())?;
    let s0 = cfg
        .initial_state(grid, cfg.solve.seed)
        .map_err(|e| e.to_string())?;
    let solve_cfg = cfg.solve.to_solve_config();

    let (state, report, converged) = match minimize(&s0, &prm, &solve_cfg) {
        Ok((s, r)) => (s, r, true),
        Err(SolverError::MaxOuterExceeded { partial }) => (partial.state, partial.report, false),
        Err(e) => return Err(e.to_string()),
    };
    let final_energy = cosserat_energy(&state, &prm).map_err(|e| e.to_string())?;
    if verbose {
        eprintln!(
            "minimize: {} trace points, energy {:.6e}, residuals ({:.3e}, {:.3e}), {:.2}s",
            report.energy_trace.len(),
            final_energy,
            report.final_residual.0,
            report.final_residual.1,
            report.wall_seconds
        );
    }

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    write_vector_snapshot(&dir.join("phi.csrf"), &state.phi).map_err(|e| e.to_string())?;
    write_rotation_snapshot(&dir.join("rot.csrf"), &state.rot).map_err(|e| e.to_string())?;
    write_trace_csv(&dir.join("trace.csv"), &report).map_err(|e| e.to_string())?;
    write_minimize_report(
        &dir.join("report.json"),
        cfg,
        &report,
        final_energy,
        converged,
    )
    .map_err(|e| e.to_string())?;
    write_resolved_config(&dir.join("resolved_config.toml"), &embeddable_config(cfg))?;

    Ok(MinimizeOutcome {
        report,
        final_energy,
        converged,
    })
}

fn write_trace_csv(path: &Path, report: &SolveReport) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,stage,eps,energy")?;
    for (i, e) in report.energy_trace.iter().enumerate() {
        let stage = report
            .stage_offsets
            .iter()
            .rposition(|&off| off <= i)
            .unwrap_or(0);
        writeln!(w, "{i},{stage},{},{}", report.eps_stages[stage], e)?;
    }
    Ok(())
}

/// Reports embed the resolved config with the output directory normalized
/// away: runs that differ only in where they write are byte-identical.
fn embeddable_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.output.dir = PathBuf::from(".");
    c
}

fn write_minimize_report(
    path: &Path,
    cfg: &RunConfig,
    report: &SolveReport,
    final_energy: f64,
    converged: bool,
) -> std::io::Result<()> {
    let cfg = embeddable_config(cfg);
    // wall time deliberately omitted: report files are byte-reproducible
    // from (config, seed)
    let json = serde_json::json!({
        "version": cosserat_core::VERSION,
        "command": "minimize",
        "converged": converged,
        "seed": report.seed,
        "final_energy": final_energy,
        "final_residual_phi": report.final_residual.0,
        "final_residual_rot": report.final_residual.1,
        "iterations": report.iterations,
        "eps_stages": report.eps_stages,
        "stage_offsets": report.stage_offsets,
        "trace_points": report.energy_trace.len(),
        "config": cfg,
    });
    std::fs::write(path, serde_json::to_string_pretty(&json)? + "\n")
}

fn write_resolved_config(path: &Path, cfg: &RunConfig) -> Result<(), String> {
    let text = toml::to_string_pretty(cfg).map_err(|e| e.to_string())?;
    std::fs::write(path, text).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

pub fn cmd_diagnose(config_path: &Path, phi: &Path, rot: &Path, ov: &Overrides) -> i32 {
    let mut cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(seed) = ov.seed {
        cfg.solve.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.output.dir = out.clone();
    }
    let (phi_field, rot_field) = match load_state_snapshots(phi, rot) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if phi_field.grid() != rot_field.grid() {
        return fail("phi and rot snapshots live on different grids");
    }
    let state = match State::new(phi_field, rot_field) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match run_diagnose(&cfg, &state, &cfg.output.dir.clone()) {
        Ok(summary) => {
            if ov.verbose {
                eprintln!(
                    "diagnose: C = {:.4e}, {} monotonicity violations, {} flagged nodes, min Rayleigh {:.6e}",
                    summary.c_const,
                    summary.monotonicity_violations,
                    summary.flagged_nodes,
                    summary.min_rayleigh
                );
            }
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

pub struct DiagnoseSummary {
    pub c_const: f64,
    pub monotonicity_violations: usize,
    pub flagged_nodes: usize,
    pub min_rayleigh: f64,
}

pub fn run_diagnose(cfg: &RunConfig, state: &State, dir: &Path) -> Result<DiagnoseSummary, String> {
    let grid = state.grid();
    // model parameters re-resolved on the snapshot grid
    let mut grid_cfg = cfg.clone();
    grid_cfg.grid.dims = grid.dims();
    grid_cfg.grid.h = grid.h();
    grid_cfg.grid.origin = grid.origin();
    let prm = grid_cfg.model_params(grid).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;

    let (rp, rr) = el_residual(state, &prm).map_err(|e| e.to_string())?;
    let el_res = rp.max(rr);

    let dcfg = &cfg.diagnostics;
    let c_const = match dcfg.c {
        CChoice::Value(v) => v,
        CChoice::Auto(_) => calibrate_c(&prm).map_err(|e| e.to_string())?,
    };

    let run = |kind: DiagKind| dcfg.run.contains(&kind);
    let mut summary = DiagnoseSummary {
        c_const,
        monotonicity_violations: 0,
        flagged_nodes: 0,
        min_rayleigh: f64::NAN,
    };

    if run(DiagKind::Monotonicity) {
        let centers = resolve_centers(&grid, dcfg.centers.as_slice(), dcfg.auto_centers);
        let mut tables: Vec<MonotonicityTable> = Vec::new();
        for center in &centers {
            let radii = center_radii(&grid, center, dcfg.radii_count)
                .ok_or_else(|| format!("center {center:?} too close to the boundary"))?;
            let table = monotonicity_scan(
                state,
                &prm,
                center,
                &radii,
                c_const,
                dcfg.kappa,
                Some(el_res),
            )
            .map_err(|e| e.to_string())?;
            summary.monotonicity_violations += table.violations();
            tables.push(table);
        }
        write_monotonicity_csv(&dir.join("monotonicity.csv"), &tables)
            .map_err(|e| e.to_string())?;
    }

    if run(DiagKind::Density) {
        let map =
            detect_singular_set(state, &prm, dcfg.eps0, c_const).map_err(|e| e.to_string())?;
        summary.flagged_nodes = map.flagged.len();
        write_density_csv(&dir.join("density.csv"), &grid, &map.values, map.threshold)
            .map_err(|e| e.to_string())?;
    }

    if run(DiagKind::Stationarity) {
        let mut rows = Vec::new();
        for probe in 0..dcfg.stationarity_probes {
            let y = stationarity_probe(&grid, cfg.solve.seed, probe as u64);
            let res = stationarity_residual(state, &prm, &y).map_err(|e| e.to_string())?;
            let tau = stationarity_tolerance(&grid, el_res, &y, dcfg.kappa);
            rows.push((probe, res, tau));
        }
        write_stationarity_csv(&dir.join("stationarity.csv"), &rows)
            .map_err(|e| e.to_string())?;
    }

    if run(DiagKind::Divcurl) {
        let report = divcurl_check(state, &prm).map_err(|e| e.to_string())?;
        write_divcurl_csv(&dir.join("divcurl.csv"), &report.flux_residuals, report.reconstruction_residual)
            .map_err(|e| e.to_string())?;
    }

    if run(DiagKind::Stability) {
        let report = stability_rayleigh(state, &prm).map_err(|e| e.to_string())?;
        summary.min_rayleigh = report.min_rayleigh;
        let json = serde_json::json!({
            "version": cosserat_core::VERSION,
            "command": "diagnose",
            "min_rayleigh": report.min_rayleigh,
            "iterations": report.iterations,
            "probe_values": report.probe_values,
            "el_residual": [rp, rr],
            "c_const": c_const,
            "config": embeddable_config(cfg),
        });
        std::fs::write(
            dir.join("stability.json"),
            serde_json::to_string_pretty(&json).map_err(|e| e.to_string())? + "\n",
        )
        .map_err(|e| e.to_string())?;
    }

    Ok(summary)
}

/// Deterministic center placement: the box center plus up to `n−1` points
/// at ±dist/4 offsets in a fixed corner order.
fn resolve_centers(grid: &Grid, explicit: &[[f64; 3]], n: usize) -> Vec<Vector3<f64>> {
    if !explicit.is_empty() {
        return explicit
            .iter()
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
    }
    let center = (grid.box_min() + grid.box_max()) * 0.5;
    let dist = grid.dist_to_boundary(&center);
    // keep offset centers far enough from the boundary that the 4h ball
    // and its shell margin still fit
    let budget = (dist - (MIN_RADIUS_CELLS + 1.7) * grid.h()).max(0.0);
    let d = (dist / 4.0).min(budget / 3.0_f64.sqrt());
    let mut out = vec![center];
    for corner in 0..8 {
        if out.len() >= n {
            break;
        }
        let sx = if corner & 1 == 0 { 1.0 } else { -1.0 };
        let sy = if corner & 2 == 0 { 1.0 } else { -1.0 };
        let sz = if corner & 4 == 0 { 1.0 } else { -1.0 };
        let candidate = center + Vector3::new(sx * d, sy * d, sz * d);
        if d > 0.51 * grid.h() {
            out.push(candidate);
        }
    }
    out.truncate(n.max(1));
    out
}

fn center_radii(grid: &Grid, center: &Vector3<f64>, count: usize) -> Option<Vec<f64>> {
    let h = grid.h();
    let r_lo = MIN_RADIUS_CELLS * h;
    let r_hi = grid.dist_to_boundary(center) - 0.6 * h;
    if r_hi <= r_lo * 1.01 || count < 2 {
        return None;
    }
    Some(
        (0..count)
            .map(|i| r_lo + (r_hi - r_lo) * i as f64 / (count as f64 - 1.0) * 0.999)
            .collect(),
    )
}

/// Seeded smooth compactly supported probe field for the stationarity test.
pub fn stationarity_probe(grid: &Grid, seed: u64, probe: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(probe));
    let lo = grid.box_min();
    let hi = grid.box_max();
    let dir = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    );
    let dir2 = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    );
    let kvec = Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()) * 6.0;
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let mut y = VectorField::from_fn(*grid, |x| {
        let mut bump = 1.0;
        for a in 0..3 {
            let t = (x[a] - lo[a]) / (hi[a] - lo[a]);
            bump *= (std::f64::consts::PI * t).sin().powi(2);
        }
        (dir * (kvec.dot(&x) + phase).sin() + dir2 * (kvec.dot(&x) + phase).cos()) * bump
    });
    for idx in 0..grid.node_count() {
        let [i, j, k] = grid.coords(idx);
        if grid.is_boundary(i, j, k) {
            y.values_mut()[idx] = Vector3::zeros();
        }
    }
    y
}

fn write_monotonicity_csv(path: &Path, tables: &[MonotonicityTable]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "center,r1,r2,lhs_2_2,radial_term,rhs_2_2,violation")?;
    for t in tables {
        let c = format!("{}|{}|{}", t.center.x, t.center.y, t.center.z);
        for row in &t.rows {
            writeln!(
                w,
                "{c},{},{},{},{},{},{}",
                row.r1,
                row.r2,
                row.coss_r1 + row.radial_term,
                row.radial_term,
                row.coss_r2,
                row.violation
            )?;
        }
    }
    Ok(())
}

fn write_density_csv(
    path: &Path,
    grid: &Grid,
    values: &ScalarField,
    threshold: f64,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "i,j,k,x1,x2,x3,density,flagged")?;
    for idx in 0..grid.node_count() {
        let v = values.values()[idx];
        if !v.is_finite() {
            continue;
        }
        let [i, j, k] = grid.coords(idx);
        let x = grid.position(i, j, k);
        let flagged = if v >= threshold { 1 } else { 0 };
        writeln!(w, "{i},{j},{k},{},{},{},{},{flagged}", x.x, x.y, x.z, v)?;
    }
    Ok(())
}

fn write_stationarity_csv(path: &Path, rows: &[(usize, f64, f64)]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "probe,residual,tau_stat")?;
    for (probe, res, tau) in rows {
        writeln!(w, "{probe},{res},{tau}")?;
    }
    Ok(())
}

fn write_divcurl_csv(path: &Path, flux: &[f64; 3], reconstruction: f64) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "quantity,value")?;
    for (i, f) in flux.iter().enumerate() {
        writeln!(w, "flux_div_{},{}", i + 1, f)?;
    }
    writeln!(w, "reconstruction,{reconstruction}")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(config_path: &Path, ov: &Overrides) -> i32 {
    let mut cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(out) = &ov.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = ov.seed {
        cfg.solve.seed = seed;
    }
    let sweep = match &cfg.sweep {
        Some(s) => s.clone(),
        None => return fail("sweep needs a [sweep] section with parameter ranges"),
    };
    let ps = if sweep.p.is_empty() {
        vec![cfg.model.p]
    } else {
        sweep.p.clone()
    };
    let twists = if sweep.twist_rate.is_empty() {
        vec![cfg.boundary.twist_rate]
    } else {
        sweep.twist_rate.clone()
    };
    let seeds = if sweep.seed.is_empty() {
        vec![cfg.solve.seed]
    } else {
        sweep.seed.clone()
    };
    let mut combos: Vec<(f64, f64, u64)> = Vec::new();
    for &p in &ps {
        for &tw in &twists {
            for &sd in &seeds {
                combos.push((p, tw, sd));
            }
        }
    }
    if combos.len() > SWEEP_COMBINATION_LIMIT {
        return fail(format!(
            "{} combinations exceed the limit of {SWEEP_COMBINATION_LIMIT}",
            combos.len()
        ));
    }

    let base_dir = cfg.output.dir.clone();
    if let Err(e) = std::fs::create_dir_all(&base_dir) {
        return fail(format!("{}: {e}", base_dir.display()));
    }

    // combinations are independent; run them on a small thread pool and
    // collect results in combo order
    let threads = ov.threads.max(1).min(combos.len().max(1));
    let results: Vec<Result<SweepRow, String>> = {
        let cfg = &cfg;
        let combos = &combos;
        let base_dir = &base_dir;
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<std::sync::Mutex<Option<Result<SweepRow, String>>>> =
            (0..combos.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= combos.len() {
                        break;
                    }
                    let (p, tw, sd) = combos[idx];
                    let row = run_sweep_combo(cfg, base_dir, p, tw, sd);
                    *results[idx].lock().unwrap() = Some(row);
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("combo ran"))
            .collect()
    };

    let mut rows = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => return fail(e),
        }
    }
    let summary_path = base_dir.join("summary.csv");
    if let Err(e) = write_summary_csv(&summary_path, &rows) {
        return fail(format!("{}: {e}", summary_path.display()));
    }
    EXIT_OK
}

struct SweepRow {
    p: f64,
    twist_rate: f64,
    seed: u64,
    min_rayleigh: f64,
    flagged: usize,
    final_energy: f64,
    converged: bool,
}

fn run_sweep_combo(
    cfg: &RunConfig,
    base_dir: &Path,
    p: f64,
    tw: f64,
    sd: u64,
) -> Result<SweepRow, String> {
    let mut combo_cfg = cfg.clone();
    combo_cfg.sweep = None;
    combo_cfg.model.p = p;
    combo_cfg.boundary.twist_rate = tw;
    combo_cfg.solve.seed = sd;
    let sub = base_dir.join(format!("p{p:.6}_tw{tw:.6}_s{sd}"));
    combo_cfg.output.dir = sub.clone();

    let outcome = run_minimize(&combo_cfg, false)?;
    // compose with diagnose exactly as the standalone command would: read
    // the state back from the snapshots just written
    let (phi, rot) = load_state_snapshots(&sub.join("phi.csrf"), &sub.join("rot.csrf"))
        .map_err(|e| e.to_string())?;
    let state = State::new(phi, rot).map_err(|e| e.to_string())?;
    let summary = run_diagnose(&combo_cfg, &state, &sub)?;
    Ok(SweepRow {
        p,
        twist_rate: tw,
        seed: sd,
        min_rayleigh: summary.min_rayleigh,
        flagged: summary.flagged_nodes,
        final_energy: outcome.final_energy,
        converged: outcome.converged,
    })
}

fn write_summary_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "p,twist_rate,seed,min_rayleigh,flagged_nodes,final_energy,converged"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.p, r.twist_rate, r.seed, r.min_rayleigh, r.flagged, r.final_energy, r.converged as u8
        )?;
    }
    Ok(())
}
