//! The JSON run configuration and its validation.

use std::path::{Path, PathBuf};

use icenet_core::interpret::PdpWeighting;
use icenet_core::{
    Architecture, ColumnConstraint, ColumnRoles, ConstraintSpec, GridPolicy, Mode, SynthSpec, TrainConfig,
    WindowSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub response: String,
    pub exposure: String,
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
    pub test_ratio: f64,
    pub validation_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            response: "ClaimNb".into(),
            exposure: "Exposure".into(),
            continuous: ["BonusMalus", "Density", "DrivAge", "VehAge", "VehPower"]
                .map(String::from)
                .to_vec(),
            categorical: ["VehGas", "VehBrand", "Region", "Area"].map(String::from).to_vec(),
            test_ratio: 0.1,
            validation_ratio: 0.05,
            split_seed: 1,
        }
    }
}

impl DataSection {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            response: self.response.clone(),
            exposure: self.exposure.clone(),
            continuous: self.continuous.clone(),
            categorical: self.categorical.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSection {
    pub hidden: Vec<usize>,
    /// Capped at `K - 1` for a column with `K` levels.
    pub embedding_dim: usize,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16, 8],
            embedding_dim: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Global,
    Local,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsSection {
    pub preset: Preset,
    /// Replaces the preset's columns when present.
    pub columns: Option<Vec<ColumnConstraint>>,
    pub penalty_on_exposure_scale: bool,
}

impl ConstraintsSection {
    pub fn spec(&self) -> ConstraintSpec {
        let mut spec = match (&self.columns, self.preset) {
            (Some(cols), _) => ConstraintSpec::new(cols.clone()),
            (None, Preset::Global) => ConstraintSpec::mtpl_global(),
            (None, Preset::Local) => ConstraintSpec::mtpl_local(),
            (None, Preset::None) => ConstraintSpec::default(),
        };
        spec.penalty_on_exposure_scale = self.penalty_on_exposure_scale;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub runs: usize,
    pub window: usize,
    pub parallel: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: t.seed,
            runs: t.runs,
            window: t.window.omega(),
            parallel: t.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "icenet-out".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Learn,
    Validation,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    /// Model files; empty means every model in `<output>/models`.
    pub models: Vec<PathBuf>,
    /// Columns to export; empty means the constrained columns.
    pub columns: Vec<String>,
    pub partition: Partition,
    /// Instance ids for ICE export; empty means the first `max_instances`.
    pub instances: Vec<usize>,
    pub max_instances: usize,
    pub pdp_weighting: PdpWeighting,
    /// Audit over a window of this size instead of the full grid.
    pub audit_window: Option<usize>,
    pub top_k: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            columns: Vec::new(),
            partition: Partition::Test,
            instances: Vec::new(),
            max_instances: 100,
            pdp_weighting: PdpWeighting::Mean,
            audit_window: None,
            top_k: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Scales run over the decades `10^lo ..= 10^hi`.
    pub lo: i32,
    pub hi: i32,
    /// Ensemble members to distil; empty means train `training.runs` fresh
    /// unconstrained networks.
    pub teachers: Vec<PathBuf>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lo: -5,
            hi: 5,
            teachers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub schema: GridPolicy,
    pub architecture: ArchitectureSection,
    pub constraints: ConstraintsSection,
    pub training: TrainingSection,
    pub mode: Mode,
    pub output: OutputSection,
    pub interpret: InterpretSection,
    pub sweep: SweepSection,
    pub synth: SynthSpec,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.apply(overrides);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        fix(&mut self.output.dir);
        self.interpret.models.iter_mut().for_each(fix);
        self.sweep.teachers.iter_mut().for_each(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.training.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
    }

    pub fn constraint_spec(&self) -> ConstraintSpec {
        self.constraints.spec()
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let window = WindowSpec::new(self.training.window).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(TrainConfig {
            window,
            ..self.train_config_unchecked()
        })
    }

    fn train_config_unchecked(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: t.seed,
            runs: t.runs,
            mode: self.mode,
            window: WindowSpec::default(),
            parallel: t.parallel,
            keep_initial: true,
        }
    }

    pub fn architecture(&self, n_continuous: usize, cardinalities: Vec<usize>) -> Architecture {
        Architecture::standard(n_continuous, cardinalities)
            .with_hidden(self.architecture.hidden.clone())
            .with_embedding_dim(self.architecture.embedding_dim)
    }

    /// Every problem with the configuration. `needs_data` is false for
    /// commands that do not read the data file.
    pub fn problems(&self, needs_data: bool) -> Vec<String> {
        let mut p = Vec::new();
        let d = &self.data;
        if needs_data {
            match &d.path {
                None => p.push("data.path is required".to_string()),
                Some(path) if !path.is_file() => p.push(format!("data.path {} does not exist", path.display())),
                Some(path) => p.extend(header_problems(path, self)),
            }
            for (name, r) in [("data.test_ratio", d.test_ratio), ("data.validation_ratio", d.validation_ratio)] {
                if !(r > 0.0 && r < 1.0) {
                    p.push(format!("{name} must lie in (0, 1)"));
                }
            }
        }
        let mut names: Vec<&String> = std::iter::once(&d.response)
            .chain([&d.exposure])
            .chain(&d.continuous)
            .chain(&d.categorical)
            .collect();
        names.sort();
        for w in names.windows(2) {
            if w[0] == w[1] {
                p.push(format!("column `{}` has more than one role", w[0]));
            }
        }
        if d.continuous.is_empty() && d.categorical.is_empty() {
            p.push("data needs at least one covariate".to_string());
        }
        if self.schema.distinct_cap == 0 || !(1..=100).contains(&self.schema.percentiles) {
            p.push("schema.distinct_cap must be positive and schema.percentiles in 1..=100".to_string());
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
            p.push("architecture.hidden needs at least one positive layer width".to_string());
        }
        if self.architecture.embedding_dim == 0 {
            p.push("architecture.embedding_dim must be positive".to_string());
        }
        let spec = self.constraint_spec();
        if let Err(e) = spec.validate() {
            p.extend(split_problems(&e.to_string()));
        }
        for c in &spec.columns {
            if !d.continuous.contains(&c.column) && !d.categorical.contains(&c.column) {
                p.push(format!("constrained column `{}` is not a covariate", c.column));
            }
        }
        if let Err(e) = WindowSpec::new(self.training.window) {
            p.push(format!("training.window: {}", bare(&e.to_string())));
        }
        if let Err(e) = self.train_config_unchecked().validate() {
            p.extend(split_problems(&e.to_string()));
        }
        if self.sweep.lo > self.sweep.hi {
            p.push("sweep.lo must not exceed sweep.hi".to_string());
        }
        for m in self.interpret.models.iter().chain(&self.sweep.teachers) {
            if !m.is_file() {
                p.push(format!("model file {} does not exist", m.display()));
            }
        }
        if let Some(w) = self.interpret.audit_window {
            if let Err(e) = WindowSpec::new(w) {
                p.push(format!("interpret.audit_window: {}", bare(&e.to_string())));
            }
        }
        if self.interpret.top_k == 0 || self.interpret.max_instances == 0 {
            p.push("interpret.top_k and interpret.max_instances must be positive".to_string());
        }
        p
    }

    pub fn validate(&self, needs_data: bool) -> Result<(), CliError> {
        let p = self.problems(needs_data);
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p.join("; ")))
        }
    }
}

fn bare(msg: &str) -> &str {
    msg.strip_prefix("invalid argument: ").unwrap_or(msg)
}

fn split_problems(msg: &str) -> Vec<String> {
    bare(msg).split("; ").map(String::from).collect()
}

fn header_problems(path: &Path, cfg: &RunConfig) -> Vec<String> {
    let header = match csv::Reader::from_path(path).and_then(|mut r| r.headers().cloned()) {
        Ok(h) => h,
        Err(e) => return vec![format!("cannot read header of {}: {e}", path.display())],
    };
    let d = &cfg.data;
    std::iter::once(&d.response)
        .chain([&d.exposure])
        .chain(&d.continuous)
        .chain(&d.categorical)
        .filter(|c| !header.iter().any(|h| h == c.as_str()))
        .map(|c| format!("column `{c}` is not in {}", path.display()))
        .collect()
}
