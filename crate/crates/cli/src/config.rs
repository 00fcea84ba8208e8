//! Run configuration: TOML sections with full defaults and unknown-key
//! rejection, and the resolution step that turns a parsed config into grid,
//! model parameters, boundary data and an initial state.

use crate::expr;
use cosserat_core::energy::{ModelParams, State};
use cosserat_core::fields::{
    read_snapshot, Grid, MatrixField, Snapshot, VectorField,
};
use cosserat_core::geometry::ModuliSet;
use cosserat_core::solver::{presets, SolveConfig};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(toml::de::Error),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config i/o: {e}"),
            ConfigError::Parse(e) => write!(f, "config parse: {e}"),
            ConfigError::Invalid(msg) => write!(f, "config invalid: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub h: f64,
    #[serde(default)]
    pub origin: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [17, 17, 17],
            h: 1.0 / 16.0,
            origin: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub p: f64,
    /// (μ₁, μ_c, μ₂)
    pub mu: [f64; 3],
    pub eps: f64,
    pub lambda: f64,
    #[serde(default)]
    pub body_force: FieldSpec,
    #[serde(default)]
    pub moment: FieldSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 2.0,
            mu: [1.0, 1.0, 1.0],
            eps: 1e-3,
            lambda: 1.0,
            body_force: FieldSpec::default(),
            moment: FieldSpec::default(),
        }
    }
}

/// A vector or matrix field given as a constant, an expression table over
/// x1/x2/x3, or a snapshot path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSpec {
    pub kind: FieldKind,
    /// constant vector (body force)
    #[serde(default)]
    pub value: Option<Vec<f64>>,
    /// constant matrix rows (moment)
    #[serde(default)]
    pub rows: Option<[[f64; 3]; 3]>,
    /// expressions, 3 (vector) or 9 row-major (matrix)
    #[serde(default)]
    pub components: Option<Vec<String>>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Zero,
    Constant,
    Expression,
    Snapshot,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            kind: FieldKind::Zero,
            value: None,
            rows: None,
            components: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub preset: BoundaryPreset,
    /// twist rate (radians per unit length) for the twist preset
    pub twist_rate: f64,
    /// interior initialization: keep the preset extension, perturb it, or
    /// draw uniformly random rotations
    pub init: InitKind,
    pub perturb: f64,
    #[serde(default)]
    pub phi_path: Option<PathBuf>,
    #[serde(default)]
    pub rot_path: Option<PathBuf>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            preset: BoundaryPreset::Trivial,
            twist_rate: 1.0,
            init: InitKind::Perturb,
            perturb: 0.1,
            phi_path: None,
            rot_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPreset {
    Trivial,
    Twist,
    Hedgehog,
    Snapshot,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Asis,
    Perturb,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub step0: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub eps_schedule: Vec<f64>,
    pub seed: u64,
}

impl Default for SolveSection {
    fn default() -> Self {
        let d = SolveConfig::default();
        SolveSection {
            tol: d.tol,
            max_outer: d.max_outer,
            max_inner: d.max_inner,
            step0: d.step0,
            armijo_c: d.armijo_c,
            backtrack: d.backtrack,
            eps_schedule: d.eps_schedule,
            seed: d.seed,
        }
    }
}

impl SolveSection {
    pub fn to_solve_config(&self) -> SolveConfig {
        SolveConfig {
            tol: self.tol,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            step0: self.step0,
            armijo_c: self.armijo_c,
            backtrack: self.backtrack,
            eps_schedule: self.eps_schedule.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// which diagnostics cmd_diagnose runs
    pub run: Vec<DiagKind>,
    /// explicit centers; empty means auto placement
    pub centers: Vec<[f64; 3]>,
    pub auto_centers: usize,
    pub radii_count: usize,
    pub eps0: f64,
    /// monotonicity constant: a number, or "auto" for the calibration sweep
    pub c: CChoice,
    pub kappa: f64,
    pub stationarity_probes: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Hash)]
#[serde(rename_all = "lowercase")]
pub enum DiagKind {
    Monotonicity,
    Density,
    Stability,
    Stationarity,
    Divcurl,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CChoice {
    Auto(AutoTag),
    Value(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            run: vec![
                DiagKind::Monotonicity,
                DiagKind::Density,
                DiagKind::Stability,
                DiagKind::Stationarity,
                DiagKind::Divcurl,
            ],
            centers: Vec::new(),
            auto_centers: 8,
            radii_count: 10,
            eps0: 0.5,
            c: CChoice::Auto(AutoTag::Auto),
            kappa: cosserat_core::diagnostics::DEFAULT_KAPPA,
            stationarity_probes: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/out"),
        }
    }
}

/// Parameter ranges for cmd_sweep; the cartesian product is enumerated in
/// the listed order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(default)]
    pub p: Vec<f64>,
    #[serde(default)]
    pub twist_rate: Vec<f64>,
    #[serde(default)]
    pub seed: Vec<u64>,
}

pub const SWEEP_COMBINATION_LIMIT: usize = 10_000;

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        toml::from_str(&text).map_err(ConfigError::Parse)
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        Grid::new(self.grid.dims, self.grid.h, self.grid.origin)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn model_params(&self, grid: Grid) -> Result<ModelParams, ConfigError> {
        let mu = ModuliSet::new(self.model.mu[0], self.model.mu[1], self.model.mu[2])
            .ok_or_else(|| ConfigError::Invalid("moduli must be strictly positive".into()))?;
        let f = resolve_vector_field(&self.model.body_force, grid)?;
        let m = resolve_matrix_field(&self.model.moment, grid)?;
        let mut prm = ModelParams::new(self.model.p, mu, self.model.eps, f, m)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        prm.lambda = self.model.lambda;
        Ok(prm)
    }

    /// Boundary data and interior initialization per the preset.
    pub fn initial_state(&self, grid: Grid, seed: u64) -> Result<State, ConfigError> {
        let base = match self.boundary.preset {
            BoundaryPreset::Trivial => presets::trivial_state(grid),
            BoundaryPreset::Twist => presets::twist_state(grid, self.boundary.twist_rate),
            BoundaryPreset::Hedgehog => presets::hedgehog_state(grid),
            BoundaryPreset::Snapshot => {
                let phi_path = self.boundary.phi_path.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("snapshot preset needs boundary.phi_path".into())
                })?;
                let rot_path = self.boundary.rot_path.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("snapshot preset needs boundary.rot_path".into())
                })?;
                let (phi, rot) = load_state_snapshots(phi_path, rot_path)?;
                if phi.grid() != grid {
                    return Err(ConfigError::Invalid(
                        "snapshot grid does not match [grid]".into(),
                    ));
                }
                State::new(phi, rot).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
        };
        match self.boundary.init {
            InitKind::Asis => Ok(base),
            InitKind::Perturb => Ok(presets::perturb_interior(&base, self.boundary.perturb, seed)),
            InitKind::Random => presets::randomized_interior(&base, seed)
                .map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }
}

pub fn load_state_snapshots(
    phi_path: &Path,
    rot_path: &Path,
) -> Result<(VectorField, cosserat_core::fields::RotationField), ConfigError> {
    let phi = match read_snapshot(phi_path).map_err(|e| ConfigError::Invalid(e.to_string()))? {
        Snapshot::Vector(f) => f,
        other => {
            return Err(ConfigError::Invalid(format!(
                "{} is not a vector snapshot (found {:?} kind)",
                phi_path.display(),
                snapshot_kind_name(&other)
            )))
        }
    };
    let rot = match read_snapshot(rot_path).map_err(|e| ConfigError::Invalid(e.to_string()))? {
        Snapshot::Rotation(f) => f,
        other => {
            return Err(ConfigError::Invalid(format!(
                "{} is not a rotation snapshot (found {:?} kind)",
                rot_path.display(),
                snapshot_kind_name(&other)
            )))
        }
    };
    Ok((phi, rot))
}

fn snapshot_kind_name(s: &Snapshot) -> &'static str {
    match s {
        Snapshot::Scalar(_) => "scalar",
        Snapshot::Vector(_) => "vector",
        Snapshot::Matrix(_) => "matrix",
        Snapshot::Rotation(_) => "rotation",
    }
}

fn resolve_vector_field(spec: &FieldSpec, grid: Grid) -> Result<VectorField, ConfigError> {
    match spec.kind {
        FieldKind::Zero => Ok(VectorField::constant(grid, Vector3::zeros())),
        FieldKind::Constant => {
            let v = spec
                .value
                .as_ref()
                .filter(|v| v.len() == 3)
                .ok_or_else(|| ConfigError::Invalid("constant vector needs value = [a,b,c]".into()))?;
            Ok(VectorField::constant(grid, Vector3::new(v[0], v[1], v[2])))
        }
        FieldKind::Expression => {
            let comps = spec
                .components
                .as_ref()
                .filter(|c| c.len() == 3)
                .ok_or_else(|| {
                    ConfigError::Invalid("expression vector needs 3 components".into())
                })?;
            let exprs: Vec<expr::Expr> = comps
                .iter()
                .map(|c| expr::parse(c).map_err(|e| ConfigError::Invalid(e.to_string())))
                .collect::<Result<_, _>>()?;
            Ok(VectorField::from_fn(grid, |x| {
                Vector3::new(
                    exprs[0].eval([x.x, x.y, x.z]),
                    exprs[1].eval([x.x, x.y, x.z]),
                    exprs[2].eval([x.x, x.y, x.z]),
                )
            }))
        }
        FieldKind::Snapshot => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("snapshot field needs path".into()))?;
            match read_snapshot(path).map_err(|e| ConfigError::Invalid(e.to_string()))? {
                Snapshot::Vector(f) if f.grid() == grid => Ok(f),
                Snapshot::Vector(_) => Err(ConfigError::Invalid(
                    "force snapshot grid does not match [grid]".into(),
                )),
                _ => Err(ConfigError::Invalid("force snapshot must be a vector".into())),
            }
        }
    }
}

fn resolve_matrix_field(spec: &FieldSpec, grid: Grid) -> Result<MatrixField, ConfigError> {
    match spec.kind {
        FieldKind::Zero => Ok(MatrixField::constant(grid, Matrix3::zeros())),
        FieldKind::Constant => {
            let rows = spec
                .rows
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("constant matrix needs rows".into()))?;
            let m = Matrix3::new(
                rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2],
                rows[2][0], rows[2][1], rows[2][2],
            );
            Ok(MatrixField::constant(grid, m))
        }
        FieldKind::Expression => {
            let comps = spec
                .components
                .as_ref()
                .filter(|c| c.len() == 9)
                .ok_or_else(|| {
                    ConfigError::Invalid("expression matrix needs 9 row-major components".into())
                })?;
            let exprs: Vec<expr::Expr> = comps
                .iter()
                .map(|c| expr::parse(c).map_err(|e| ConfigError::Invalid(e.to_string())))
                .collect::<Result<_, _>>()?;
            Ok(MatrixField::from_fn(grid, |x| {
                let xv = [x.x, x.y, x.z];
                Matrix3::from_fn(|r, c| exprs[r * 3 + c].eval(xv))
            }))
        }
        FieldKind::Snapshot => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("snapshot field needs path".into()))?;
            match read_snapshot(path).map_err(|e| ConfigError::Invalid(e.to_string()))? {
                Snapshot::Matrix(f) if f.grid() == grid => Ok(f),
                Snapshot::Matrix(_) => Err(ConfigError::Invalid(
                    "moment snapshot grid does not match [grid]".into(),
                )),
                _ => Err(ConfigError::Invalid("moment snapshot must be a matrix".into())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.grid.dims, [17, 17, 17]);
        assert_eq!(cfg.model.p, 2.0);
        let grid = cfg.grid().unwrap();
        let prm = cfg.model_params(grid).unwrap();
        assert!(!prm.has_forcing());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[model]\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn expression_fields_resolve() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [model.body_force]
            kind = "expression"
            components = ["sin(x1)", "x2*x3", "0"]
            "#,
        )
        .unwrap();
        let grid = cfg.grid().unwrap();
        let prm = cfg.model_params(grid).unwrap();
        let x = grid.position(3, 4, 5);
        let v = prm.f.at(3, 4, 5);
        assert!((v.x - x.x.sin()).abs() < 1e-15);
        assert!((v.y - x.y * x.z).abs() < 1e-15);
    }

    #[test]
    fn c_choice_accepts_auto_and_number() {
        let cfg: RunConfig = toml::from_str("[diagnostics]\nc = \"auto\"\n").unwrap();
        assert!(matches!(cfg.diagnostics.c, CChoice::Auto(_)));
        let cfg: RunConfig = toml::from_str("[diagnostics]\nc = 0.25\n").unwrap();
        match cfg.diagnostics.c {
            CChoice::Value(v) => assert_eq!(v, 0.25),
            _ => panic!("expected value"),
        }
    }

    #[test]
    fn sweep_section_parses() {
        let cfg: RunConfig =
            toml::from_str("[sweep]\np = [2.0, 2.1]\ntwist_rate = [1.0]\n").unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.p.len(), 2);
    }
}
