//! TOML run configuration.
//!
//! One file drives every stage; no stage reads a parameter from anywhere
//! else. Each section maps onto one library module and documents its
//! defaults inline. Relative paths (`run.dir`, `data.dataset_dir`) are
//! resolved against the directory holding the config file, so a bundled
//! config works from any working directory. Per-section seeds default to
//! the master `run.seed` when omitted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kcgen_core::data::SplitRatios;
use kcgen_core::kt::{BackboneConfig, TrainingConfig};
use kcgen_core::lang::Language;
use kcgen_core::llm::HttpConfig;
use kcgen_core::pipeline::PipelineConfig;
use kcgen_core::curves::CurveConfig;
use kcgen_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub split: SplitSection,
    pub llm: LlmSection,
    pub pipeline: PipelineSection,
    pub kt: KtSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub curves: CurvesSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Identifier recorded in the manifest. Default: "run".
    pub run_id: String,
    /// Run directory holding the manifest, artifacts, plots, and the LLM
    /// cache; relative to the config file. Default: "runs/run".
    pub dir: PathBuf,
    /// Master seed; every per-section seed left unset inherits it.
    /// Default: 0.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            run_id: "run".to_string(),
            dir: PathBuf::from("runs/run"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with problems.csv and interactions.csv, relative to the
    /// config file. Default: "data".
    pub dataset_dir: PathBuf,
    /// Keep only each student's first submission per problem.
    /// Default: false.
    pub first_submissions_only: bool,
    /// Language of the submitted code: "java" or "python".
    /// Default: "java".
    pub language: Language,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset_dir: PathBuf::from("data"),
            first_submissions_only: false,
            language: Language::Java,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Number of independent train/validation/test splits. Default: 1.
    pub n_splits: usize,
    /// Partition fractions; must be positive and sum to 1.
    /// Defaults: 0.8 / 0.1 / 0.1.
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    /// Index of the split used by train/evaluate/curves. Default: 0.
    pub index: usize,
    /// Seed for the split family. Default: run.seed.
    pub seed: Option<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        let ratios = SplitRatios::default();
        SplitSection {
            n_splits: 1,
            train: ratios.train,
            validation: ratios.validation,
            test: ratios.test,
            index: 0,
            seed: None,
        }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            validation: self.validation,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    /// Chat provider: "mock" (offline, deterministic) or "http".
    /// Default: "mock".
    pub provider: ProviderKind,
    /// Model identifier sent with every request and recorded in the
    /// manifest. Default: "mock-model".
    pub model_id: String,
    /// Seed for the mock provider. Default: run.seed.
    pub seed: Option<u64>,
    /// Cache responses on disk under <run dir>/cache. Default: true.
    pub cache: bool,
    pub http: HttpSection,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            provider: ProviderKind::Mock,
            model_id: "mock-model".to_string(),
            seed: None,
            cache: true,
            http: HttpSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSection {
    /// Chat-completions endpoint URL; required when provider = "http".
    pub endpoint: String,
    /// Environment variable holding the bearer token; the key itself
    /// never appears in the config. Default: "KCGEN_API_KEY".
    pub api_key_env: Option<String>,
    /// Request timeout in seconds. Default: 120.
    pub timeout_secs: u64,
    /// Retries after the initial attempt. Default: 3.
    pub max_retries: u32,
    /// Base backoff in milliseconds, doubled per retry. Default: 250.
    pub backoff_base_ms: u64,
    /// Token-bucket burst capacity. Default: 4.
    pub rate_capacity: u32,
    /// Sustained requests per second. Default: 2.0.
    pub rate_per_sec: f64,
}

impl Default for HttpSection {
    fn default() -> Self {
        let base = HttpConfig::default();
        HttpSection {
            endpoint: base.endpoint,
            api_key_env: Some("KCGEN_API_KEY".to_string()),
            timeout_secs: base.timeout_secs,
            max_retries: base.max_retries,
            backoff_base_ms: base.backoff_base_ms,
            rate_capacity: base.rate_capacity,
            rate_per_sec: base.rate_per_sec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Correct solutions sampled per problem for KC generation.
    /// Default: 5.
    pub representatives_per_problem: usize,
    /// HAC cluster count, i.e. the abstraction level. Default: 50.
    pub n_clusters: usize,
    /// Few-shot examples prepended to the KC generation prompt.
    /// Default: 1.
    pub few_shot_count: usize,
    /// Cluster counts for the ontology stage, coarsest (fewest) to
    /// finest; order in the file does not matter. Default: empty
    /// (ontology stage refuses to run until levels are configured).
    pub ontology_levels: Vec<usize>,
    /// Seed for representative sampling. Default: run.seed.
    pub seed: Option<u64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let base = PipelineConfig::default();
        PipelineSection {
            representatives_per_problem: base.representatives_per_problem,
            n_clusters: base.n_clusters,
            few_shot_count: base.few_shot_count,
            ontology_levels: Vec::new(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KtSection {
    /// LSTM knowledge-state width. Default: 32.
    pub knowledge_dim: usize,
    /// Seed for parameter initialization. Default: run.seed.
    pub seed: Option<u64>,
    pub backbone: BackboneSection,
}

impl Default for KtSection {
    fn default() -> Self {
        KtSection {
            knowledge_dim: 32,
            seed: None,
            backbone: BackboneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Transformer depth. Default: 2.
    pub layers: usize,
    /// Model width; must be divisible by heads. Default: 64.
    pub dim: usize,
    /// Attention heads. Default: 2.
    pub heads: usize,
    /// Feed-forward width. Default: 128.
    pub d_ff: usize,
    /// Context window in tokens. Default: 512.
    pub max_seq_len: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let base = BackboneConfig::default();
        BackboneSection {
            layers: base.layers,
            dim: base.dim,
            heads: base.heads,
            d_ff: base.d_ff,
            max_seq_len: base.max_seq_len,
        }
    }
}

impl BackboneSection {
    pub fn to_core(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Weight on the supervised losses; 1 − lambda goes to the KC loss.
    /// Default: 0.5.
    pub lambda: f64,
    /// Epochs. Default: 10.
    pub epochs: usize,
    /// Students per batch. Default: 4.
    pub batch_size: usize,
    /// AdamW learning rate for the backbone. Default: 1e-3.
    pub lr_backbone: f64,
    /// AdamW learning rate for the mastery/correctness heads.
    /// Default: 1e-3.
    pub lr_heads: f64,
    /// RMSprop learning rate for the LSTM tracker. Default: 1e-3.
    pub lr_tracker: f64,
    /// Decoupled weight decay for AdamW. Default: 0.01.
    pub weight_decay: f64,
    /// Stop after this many epochs without validation-AUC improvement;
    /// unset disables early stopping.
    pub early_stop_patience: Option<usize>,
    /// Also write a checkpoint after every epoch (the final checkpoint is
    /// always written). Default: false.
    pub epoch_checkpoints: bool,
    /// Seed for shuffling and initialization. Default: run.seed.
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainingConfig::default();
        TrainSection {
            lambda: base.lambda,
            epochs: base.epochs,
            batch_size: base.batch_size,
            lr_backbone: base.lr_backbone,
            lr_heads: base.lr_heads,
            lr_tracker: base.lr_tracker,
            weight_decay: base.weight_decay,
            early_stop_patience: base.early_stop_patience,
            epoch_checkpoints: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// CodeBLEU component weights (n-gram, weighted n-gram, syntax,
    /// dataflow); non-negative, summing to 1.
    /// Default: [0.25, 0.25, 0.25, 0.25].
    pub codebleu_weights: [f64; 4],
    /// Budget for greedy code decoding. Default: 64.
    pub max_code_tokens: usize,
    /// Seed for the random baseline. Default: run.seed.
    pub baseline_seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            codebleu_weights: [0.25; 4],
            max_code_tokens: 64,
            baseline_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvesSection {
    /// Minimum observations a KC needs before PFA fitting. Default: 10.
    pub min_observations: usize,
    /// Attempt indices with fewer students are excluded from curves and
    /// R². Default: 5.
    pub min_students_per_attempt: usize,
    /// L2 penalty keeping separable data fittable. Default: 1e-4.
    pub ridge: f64,
    /// Newton iteration cap. Default: 100.
    pub max_iterations: usize,
    /// Newton convergence tolerance. Default: 1e-10.
    pub tolerance: f64,
    /// Significance level for the Mann-Kendall trend test.
    /// Default: 0.05.
    pub trend_alpha: f64,
    /// Students whose submissions feed the curves: "train" (the training
    /// partition) or "all". Default: "train".
    pub students: CurveStudents,
    /// Seed for error-label requests. Default: run.seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveStudents {
    Train,
    All,
}

impl Default for CurvesSection {
    fn default() -> Self {
        let base = CurveConfig::default();
        CurvesSection {
            min_observations: base.min_observations,
            min_students_per_attempt: base.min_students_per_attempt,
            ridge: base.ridge,
            max_iterations: base.max_iterations,
            tolerance: base.tolerance,
            trend_alpha: 0.05,
            students: CurveStudents::Train,
            seed: None,
        }
    }
}

impl CurvesSection {
    pub fn to_core(&self) -> CurveConfig {
        CurveConfig {
            min_observations: self.min_observations,
            min_students_per_attempt: self.min_students_per_attempt,
            ridge: self.ridge,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
        }
    }
}

impl RunConfig {
    /// Parse `path` and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.run.dir = resolve(base, &config.run.dir);
        config.data.dataset_dir = resolve(base, &config.data.dataset_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.run_id.trim().is_empty() {
            return Err(Error::domain("run.run_id must not be empty"));
        }
        if self.llm.provider == ProviderKind::Http && self.llm.http.endpoint.is_empty() {
            return Err(Error::domain(
                "llm.http.endpoint is required when llm.provider = \"http\"",
            ));
        }
        if self.llm.model_id.trim().is_empty() {
            return Err(Error::domain("llm.model_id must not be empty"));
        }
        check_ratios(&self.split.ratios())?;
        if !(0.0..=1.0).contains(&self.train.lambda) {
            return Err(Error::domain(format!(
                "train.lambda must be in [0, 1], got {}",
                self.train.lambda
            )));
        }
        self.kt.backbone.to_core().validate()?;
        Ok(())
    }

    /// Digest of the resolved configuration, recorded in the manifest.
    pub fn digest(&self) -> Result<String> {
        kcgen_core::hash::digest_of(self)
    }

    /// The fully resolved config as TOML, for --print-config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::domain(e.to_string()))
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.run.seed)
    }

    pub fn llm_seed(&self) -> u64 {
        self.llm.seed.unwrap_or(self.run.seed)
    }

    pub fn pipeline_seed(&self) -> u64 {
        self.pipeline.seed.unwrap_or(self.run.seed)
    }

    pub fn kt_seed(&self) -> u64 {
        self.kt.seed.unwrap_or(self.run.seed)
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.run.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.baseline_seed.unwrap_or(self.run.seed)
    }

    pub fn curves_seed(&self) -> u64 {
        self.curves.seed.unwrap_or(self.run.seed)
    }

    /// Every resolved seed, keyed by purpose, for the manifest.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("master".to_string(), self.run.seed),
            ("split".to_string(), self.split_seed()),
            ("llm".to_string(), self.llm_seed()),
            ("pipeline".to_string(), self.pipeline_seed()),
            ("kt".to_string(), self.kt_seed()),
            ("train".to_string(), self.train_seed()),
            ("eval".to_string(), self.eval_seed()),
            ("curves".to_string(), self.curves_seed()),
        ])
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            representatives_per_problem: self.pipeline.representatives_per_problem,
            n_clusters: self.pipeline.n_clusters,
            few_shot_count: self.pipeline.few_shot_count,
            seed: self.pipeline_seed(),
            provider_model_id: self.llm.model_id.clone(),
        }
    }

    pub fn training_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainingConfig {
        TrainingConfig {
            lambda: self.train.lambda,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_backbone: self.train.lr_backbone,
            lr_heads: self.train.lr_heads,
            lr_tracker: self.train.lr_tracker,
            weight_decay: self.train.weight_decay,
            seed: self.train_seed(),
            early_stop_patience: self.train.early_stop_patience,
            checkpoint_dir,
        }
    }

    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            endpoint: self.llm.http.endpoint.clone(),
            api_key_env: self.llm.http.api_key_env.clone(),
            timeout_secs: self.llm.http.timeout_secs,
            max_retries: self.llm.http.max_retries,
            backoff_base_ms: self.llm.http.backoff_base_ms,
            rate_capacity: self.llm.http.rate_capacity,
            rate_per_sec: self.llm.http.rate_per_sec,
        }
    }
}

fn check_ratios(ratios: &SplitRatios) -> Result<()> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if ratios.train <= 0.0 || ratios.validation <= 0.0 || ratios.test <= 0.0 {
        return Err(Error::domain("split ratios must all be positive"));
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "split ratios sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
