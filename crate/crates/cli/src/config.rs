//! Experiment configuration. Every field has a default, and the defaults
//! reproduce the data-driven experiment on the two-state example system.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dictlin::dictionary::{build_standard_library, Dictionary, DomainBox, Family, LibrarySpec};
use dictlin::modelbased::{ModelBasedOptions, PhiBasis, SampleDesign};
use dictlin::regressor::BrunovskyStructure;
use dictlin::simulator::{ControlAffineSystem, ExcitationSignal, SignalKind};
use dictlin::solver::{FreshPointOptions, SolverOptions, SparsifyOptions};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub dictionary: DictionaryConfig,
    pub structure: StructureConfig,
    pub excitation: ExcitationSignal,
    pub collection: CollectionConfig,
    pub solver: SolverConfig,
    pub modelbased: ModelBasedConfig,
    pub controller: ControllerConfig,
    pub validate: ValidateConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            dictionary: DictionaryConfig::default(),
            structure: StructureConfig::default(),
            excitation: ExcitationSignal::piecewise_uniform(vec![-0.1], vec![0.1], 1),
            collection: CollectionConfig::default(),
            solver: SolverConfig::default(),
            modelbased: ModelBasedConfig::default(),
            controller: ControllerConfig::default(),
            validate: ValidateConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Built-in system name: `example1` or `linear`.
    pub name: String,
    pub params: BTreeMap<String, f64>,
    /// External dataset CSV used by `solve` instead of simulating.
    pub dataset: Option<PathBuf>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            name: "example1".into(),
            params: BTreeMap::from([("mu".into(), -0.5), ("lambda".into(), 0.2)]),
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub z: Vec<Family>,
    pub y: Option<Vec<Family>>,
    pub w: Option<Vec<Family>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            z: vec![Family::Coordinates, Family::Powers(2), Family::Powers(3), Family::Sin, Family::Cos],
            y: None,
            w: None,
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    /// Brunovsky block sizes `(r_1, ..., r_m)`.
    pub blocks: Vec<usize>,
    /// Operating point `x0` with `tau(x0) = 0`.
    pub operating_point: Vec<f64>,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self { blocks: vec![2], operating_point: vec![0.0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionConfig {
    pub duration: f64,
    pub period: f64,
    pub substeps: usize,
    /// Fixed initial state; when absent it is drawn from `[x0_lower, x0_upper]`.
    pub x0: Option<Vec<f64>>,
    pub x0_lower: Vec<f64>,
    pub x0_upper: Vec<f64>,
    /// Abort the experiment when `|x_i|` exceeds this bound.
    pub safety_bound: Option<f64>,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            period: 0.1,
            substeps: 10,
            x0: None,
            x0_lower: vec![-0.1, -0.1],
            x0_upper: vec![0.1, 0.1],
            safety_bound: Some(1e3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rank_tol: Option<f64>,
    pub gap_threshold: f64,
    pub equilibrate: bool,
    pub refine: bool,
    pub max_candidates: usize,
    pub sparsify: bool,
    pub sparsify_threshold: f64,
    pub sparsify_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank_tol: None,
            gap_threshold: 1e6,
            equilibrate: true,
            refine: true,
            max_candidates: 8,
            sparsify: false,
            sparsify_threshold: 1e-6,
            sparsify_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBasedConfig {
    /// Basis expressions over `x1..xn, u1..um`.
    pub phi: Vec<String>,
    pub design: SampleDesign,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub fit_tol: f64,
    pub rank_tol: f64,
}

impl Default for ModelBasedConfig {
    fn default() -> Self {
        Self {
            phi: ["x1", "x2", "u1", "x1^2", "x2^2", "x1*u1", "x2*u1", "x1^2*x2", "x1^2*u1", "x2^2*u1"]
                .map(String::from)
                .to_vec(),
            design: SampleDesign::default(),
            input_lower: vec![-1.0],
            input_upper: vec![1.0],
            fit_tol: 1e-9,
            rank_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Real closed-loop poles per block; defaults to `-1, ..., -r_i`.
    pub poles: Option<Vec<Vec<f64>>>,
    /// Monic polynomial coefficients per block, ascending; overrides `poles`.
    pub polynomials: Option<Vec<Vec<f64>>>,
    /// Lyapunov weight, row-major; identity when absent.
    pub q: Option<Vec<Vec<f64>>>,
    pub grid_lower: Option<Vec<f64>>,
    pub grid_upper: Option<Vec<f64>>,
    pub grid_points: usize,
    pub x0: Vec<f64>,
    pub duration: f64,
    pub step: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            poles: Some(vec![vec![-1.0, -2.0]]),
            polynomials: None,
            q: None,
            grid_lower: None,
            grid_upper: None,
            grid_points: 41,
            x0: vec![0.1, -0.1],
            duration: 5.0,
            step: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub points: usize,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            points: 1000,
            state_lower: vec![-0.5, -0.5],
            state_upper: vec![0.5, 0.5],
            input_lower: vec![-0.5],
            input_upper: vec![0.5],
            tolerance: 1e-8,
            seed: 2,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_len(what: &str, v: &[f64], len: usize) -> Result<(), CliError> {
    if v.len() != len {
        return Err(config_err(format!("{what} has {} entries, expected {len}", v.len())));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Applies a `--seed` override to the random excitation.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.excitation.seed = s;
        }
        self
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always representable as JSON")
    }

    pub fn system(&self) -> Result<ControlAffineSystem, CliError> {
        ControlAffineSystem::builtin(&self.system.name, &self.system.params).map_err(|e| config_err(e.to_string()))
    }

    /// State and input dimensions implied by the structure block.
    pub fn dimensions(&self) -> (usize, usize) {
        (self.structure.blocks.iter().sum(), self.structure.blocks.len())
    }

    pub fn dictionary(&self) -> Result<Dictionary, CliError> {
        let (_, m) = self.dimensions();
        let domain = DomainBox::new(self.dictionary.lower.clone(), self.dictionary.upper.clone())
            .map_err(|e| config_err(e.to_string()))?;
        let spec = LibrarySpec {
            z: self.dictionary.z.clone(),
            y: self.dictionary.y.clone(),
            w: self.dictionary.w.clone(),
            domain,
        };
        let dict = build_standard_library(&spec, m).map_err(|e| config_err(e.to_string()))?;
        dict.check_coordinate_count().map_err(|e| config_err(e.to_string()))?;
        Ok(dict)
    }

    pub fn structure(&self) -> Result<BrunovskyStructure, CliError> {
        let (n, _) = self.dimensions();
        BrunovskyStructure::new(&self.structure.blocks, n).map_err(|e| config_err(e.to_string()))
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            rank_tol: self.solver.rank_tol,
            gap_threshold: self.solver.gap_threshold,
            refine: self.solver.refine,
            max_candidates: self.solver.max_candidates,
            seed: self.excitation.seed,
            ..SolverOptions::default()
        }
    }

    pub fn sparsify_options(&self) -> SparsifyOptions {
        SparsifyOptions {
            threshold: self.solver.sparsify_threshold,
            max_iters: self.solver.sparsify_iters,
            rank_tol: self.solver.rank_tol,
        }
    }

    pub fn phi(&self) -> Result<PhiBasis, CliError> {
        let (n, m) = self.dimensions();
        if self.modelbased.phi.is_empty() {
            return Err(config_err("modelbased.phi is empty"));
        }
        PhiBasis::parse(&self.modelbased.phi, n, m).map_err(|e| config_err(e.to_string()))
    }

    pub fn modelbased_options(&self) -> ModelBasedOptions {
        let (_, m) = self.dimensions();
        let mut opts = ModelBasedOptions::new(m);
        opts.design = self.modelbased.design.clone();
        opts.input_lower = self.modelbased.input_lower.clone();
        opts.input_upper = self.modelbased.input_upper.clone();
        opts.fit_tol = self.modelbased.fit_tol;
        opts.solver = SolverOptions { rank_tol: Some(self.modelbased.rank_tol), ..self.solver_options() };
        opts
    }

    pub fn fresh_point_options(&self) -> FreshPointOptions {
        FreshPointOptions {
            state_lower: self.validate.state_lower.clone(),
            state_upper: self.validate.state_upper.clone(),
            input_lower: self.validate.input_lower.clone(),
            input_upper: self.validate.input_upper.clone(),
            count: self.validate.points,
            seed: self.validate.seed,
            tolerance: self.validate.tolerance,
        }
    }

    pub fn q_matrix(&self) -> Result<DMatrix<f64>, CliError> {
        let (n, _) = self.dimensions();
        match &self.controller.q {
            None => Ok(DMatrix::identity(n, n)),
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(config_err(format!("controller.q must be {n} x {n}")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }

    /// Checks dimensions across blocks. Called on every load.
    pub fn check(&self) -> Result<(), CliError> {
        let (n, m) = self.dimensions();
        if n == 0 || self.structure.blocks.contains(&0) {
            return Err(config_err("structure.blocks must be non-empty positive sizes"));
        }
        let external = self.system.dataset.is_some();
        if !external {
            let sys = self.system()?;
            if sys.n() != n || sys.m() != m {
                return Err(config_err(format!(
                    "system `{}` has n = {}, m = {} but structure.blocks implies n = {n}, m = {m}",
                    self.system.name,
                    sys.n(),
                    sys.m()
                )));
            }
        }
        check_len("dictionary.lower", &self.dictionary.lower, n)?;
        check_len("dictionary.upper", &self.dictionary.upper, n)?;
        check_len("structure.operating_point", &self.structure.operating_point, n)?;
        check_len("excitation.lower", &self.excitation.lower, m)?;
        check_len("excitation.upper", &self.excitation.upper, m)?;
        if let SignalKind::Table { values, .. } = &self.excitation.kind {
            if values.iter().any(|v| v.len() != m) {
                return Err(config_err(format!("excitation table rows must have {m} entries")));
            }
        }
        match &self.collection.x0 {
            Some(x0) => check_len("collection.x0", x0, n)?,
            None => {
                check_len("collection.x0_lower", &self.collection.x0_lower, n)?;
                check_len("collection.x0_upper", &self.collection.x0_upper, n)?;
            }
        }
        check_len("modelbased.input_lower", &self.modelbased.input_lower, m)?;
        check_len("modelbased.input_upper", &self.modelbased.input_upper, m)?;
        check_len("controller.x0", &self.controller.x0, n)?;
        check_len("validate.state_lower", &self.validate.state_lower, n)?;
        check_len("validate.state_upper", &self.validate.state_upper, n)?;
        check_len("validate.input_lower", &self.validate.input_lower, m)?;
        check_len("validate.input_upper", &self.validate.input_upper, m)?;
        if let Some(p) = &self.controller.poles {
            if p.len() != m || p.iter().zip(&self.structure.blocks).any(|(r, &b)| r.len() != b) {
                return Err(config_err("controller.poles must list r_i poles for each block"));
            }
        }
        if !(self.solver.gap_threshold > 0.0) || !(self.validate.tolerance > 0.0) {
            return Err(config_err("thresholds must be positive"));
        }
        if self.controller.grid_points < 2 || !(self.controller.step > 0.0) {
            return Err(config_err("controller.grid_points must be >= 2 and controller.step positive"));
        }
        self.dictionary()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.dictionary().unwrap().mu(), 41);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&ExperimentConfig::default()).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let err = ExperimentConfig::from_toml("[structure]\nblocks = [1, 1]\noperating_point = [0, 0]\n");
        assert!(matches!(err, Err(CliError::Config(_))));
        let err = ExperimentConfig::from_toml("[system]\nname = \"pendulum\"\n");
        assert!(matches!(err, Err(CliError::Config(_))));
        let err = ExperimentConfig::from_toml("[dictionary]\nz = [\"constant\"]\n");
        assert!(matches!(err, Err(CliError::Config(_))));
        let err = ExperimentConfig::from_toml("bogus = 1\n");
        assert!(matches!(err, Err(CliError::Config(_))));
    }

    #[test]
    fn empty_phi_is_config_error() {
        let cfg = ExperimentConfig::from_toml("[modelbased]\nphi = []\n").unwrap();
        assert!(matches!(cfg.phi(), Err(CliError::Config(_))));
    }
}
