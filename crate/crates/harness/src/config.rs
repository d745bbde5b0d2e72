use std::path::{Path, PathBuf};

use clustr_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Train,
    Cluster,
    Bench,
    Ablate,
    Gradcheck,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Cluster => "cluster",
            Task::Bench => "bench",
            Task::Ablate => "ablate",
            Task::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// A named variant (`T`, `S`, `B`, `micro`), a path to a model config JSON,
/// or the config itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Name(String),
    Inline(Box<ModelConfig>),
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Name("micro".into())
    }
}

impl ModelSource {
    pub fn resolve(&self, base: &Path) -> Result<ModelConfig> {
        match self {
            ModelSource::Inline(cfg) => Ok((**cfg).clone()),
            ModelSource::Name(name) => {
                if let Some(cfg) = ModelConfig::by_name(name) {
                    return Ok(cfg);
                }
                let path = base.join(name);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| HarnessError::Config(format!("model {name:?} is neither a variant nor a readable file: {e}")))?;
                serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-3,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 50,
            steps: 2000,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Full training-set accuracy is measured every this many steps and at
    /// the last step.
    pub eval_every: usize,
    /// Stop once the measured training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub checkpoint: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eval_every: 100,
            target_accuracy: None,
            checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub resolutions: Vec<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { resolutions: vec![224] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    #[default]
    GridVsCluster,
    SingleVsMultiScale,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::GridVsCluster => "grid_vs_cluster",
            AblationAxis::SingleVsMultiScale => "single_vs_multi_scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateOptions {
    pub axes: Vec<AblationAxis>,
    /// Per-stage ratios of the single-scale arm; defaults to the first ratio
    /// of every stage of the model.
    pub single_lambdas: Option<Vec<Vec<f64>>>,
    /// Also run the identity-aggregation control pair of the grid axis.
    pub control: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            axes: vec![AblationAxis::GridVsCluster, AblationAxis::SingleVsMultiScale],
            single_lambdas: None,
            control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterOptions {
    /// Token set, `.ctr1` or `.csv`.
    pub input: PathBuf,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Sampled entries per parameter tensor for the whole-model check.
    pub entries_per_param: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            entries_per_param: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub model: ModelSource,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub precision: Precision,
    pub train: TrainOptions,
    pub bench: BenchOptions,
    pub ablate: AblateOptions,
    pub cluster: Option<ClusterOptions>,
    pub gradcheck: GradcheckOptions,
    /// Wall-clock seconds in metric records; off keeps metric files
    /// byte-identical across runs.
    pub record_wall_time: bool,
    /// Directory relative model and input paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            model: ModelSource::default(),
            dataset: DatasetSpec::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            precision: Precision::default(),
            train: TrainOptions::default(),
            bench: BenchOptions::default(),
            ablate: AblateOptions::default(),
            cluster: None,
            gradcheck: GradcheckOptions::default(),
            record_wall_time: false,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self.model.resolve(&self.base_dir)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(o.lr >= 0.0 && o.min_lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(HarnessError::Config("learning rates, weight decay and eps must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(HarnessError::Config("betas must lie in [0, 1)".into()));
        }
        if self.train.eval_every == 0 {
            return Err(HarnessError::Config("eval_every must be positive".into()));
        }
        self.dataset.validate()
    }
}
