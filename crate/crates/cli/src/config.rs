//! Run configuration: one JSON document, dotted-path overrides, seed from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sinklab::data::Variant;
use sinklab::model::ModelConfig;
use sinklab::optim::OptimizerConfig;
use sinklab::theory::{FlowMode, ResidualOptimizer};

/// Environment variable that replaces `seed` when set.
pub const SEED_ENV: &str = "BB_SINK_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Flow,
    SimResidual,
    Intervene,
    Verify,
    Gradcheck,
    ExportSpec,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Flow => "flow",
            Command::SimResidual => "sim-residual",
            Command::Intervene => "intervene",
            Command::Verify => "verify",
            Command::Gradcheck => "gradcheck",
            Command::ExportSpec => "export-spec",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub task: TaskSection,
    /// `vocab` is always taken from the task; `max_seq` is raised to fit `seq_len + 1`.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub intervene: InterveneSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Byte corpus; the bundled text when absent.
    pub corpus_path: Option<PathBuf>,
    /// A spec exported earlier; overrides `corpus_path`, `vocab` and `smoothing`.
    pub spec_path: Option<PathBuf>,
    pub vocab: usize,
    pub smoothing: f64,
    pub variant: Variant,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { corpus_path: None, spec_path: None, vocab: 64, smoothing: 1.0, variant: Variant::Bb }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Transformer,
    Simplified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub target: Target,
    /// `{"tag": "adam", ...}` or `{"tag": "sgd", "lr": ...}`.
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub probe_every: usize,
    pub eval_batch: usize,
    pub dormant_threshold: f64,
    /// Adam step size of the simplified-model target.
    pub simplified_lr: f64,
    pub train_lambda: bool,
    pub simplified_init_std: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            target: Target::Transformer,
            optimizer: OptimizerConfig::adam(),
            steps: 2000,
            batch: 64,
            seq_len: 128,
            probe_every: 50,
            eval_batch: 64,
            dormant_threshold: sinklab::probes::DORMANT_THRESHOLD,
            simplified_lr: 0.03,
            train_lambda: true,
            simplified_init_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub mode: FlowMode,
    pub t_end: f64,
    pub rtol: f64,
    pub atol: f64,
    pub snapshots: usize,
    pub xi_scale: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub lambda: f64,
    /// `(α, ξ, λ)` ladder of the construction check.
    pub scales: Vec<(f64, f64, f64)>,
    pub growth_xi_scale: f64,
    pub growth_alpha0: f64,
    pub beta_t_end: f64,
    pub joint_t_end: f64,
    pub sim_optimizer: ResidualOptimizer,
    pub sim_steps: usize,
    pub m0: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        let v = sinklab::theory::VerifyConfig::default();
        let f = sinklab::theory::FlowConfig::default();
        Self {
            mode: f.mode,
            t_end: f.t_end,
            rtol: f.rtol,
            atol: f.atol,
            snapshots: f.snapshots,
            xi_scale: 1.0,
            alpha0: 0.0,
            beta0: 0.0,
            lambda: 0.0,
            scales: v.ladder,
            growth_xi_scale: v.growth_xi_scale,
            growth_alpha0: v.growth_alpha0,
            beta_t_end: v.beta_t_end,
            joint_t_end: v.joint_t_end,
            sim_optimizer: ResidualOptimizer::Adam,
            sim_steps: v.residual_steps,
            m0: v.residual_m0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterveneSection {
    pub checkpoint: Option<PathBuf>,
    /// `none`, `mlp`, `attn`, `layer:L`, `block:I` or `head:I:H`.
    pub ablations: Vec<String>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Default for InterveneSection {
    fn default() -> Self {
        Self { checkpoint: None, ablations: vec!["none".into(), "mlp".into(), "attn".into()], batch: 64, seq_len: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub probes: usize,
    pub h: f64,
    /// Relative-error bound on nonzero-gradient coordinates.
    pub threshold: f64,
    /// Bound on `|central difference|` where the gradient is exactly zero.
    pub zero_abs: f64,
    /// Transformer weights are drawn at this scale instead of `model.init_std`.
    pub init_std: f64,
    pub batch: usize,
    pub seq_len: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { probes: 64, h: 1e-5, threshold: 1e-5, zero_abs: 1e-8, init_std: 0.3, batch: 4, seq_len: 32 }
    }
}

/// A configuration that could not be read or did not match the schema.
#[derive(Debug)]
pub struct SchemaError(pub String);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SchemaError {}

/// Where the effective seed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Env,
    Override,
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub seed_source: SeedSource,
}

/// Parse `text`, apply `KEY=VALUE` overrides, then the seed from `env_seed`.
///
/// Precedence: file, then environment, then overrides.
pub fn load_str(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Loaded, SchemaError> {
    let base: RunConfig = serde_json::from_str(text).map_err(|e| located(&e, "config"))?;
    let mut seed_source = SeedSource::Config;
    let mut doc = serde_json::to_value(&base).map_err(|e| SchemaError(e.to_string()))?;
    if let Some(s) = env_seed {
        let seed: u64 = s.trim().parse().map_err(|_| SchemaError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        doc["seed"] = Value::from(seed);
        seed_source = SeedSource::Env;
    }
    for o in overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| SchemaError(format!("override {o:?} is not KEY=VALUE")))?;
        set_path(&mut doc, path, parse_value(raw))?;
        if path == "seed" {
            seed_source = SeedSource::Override;
        }
    }
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| SchemaError(format!("after overrides: {e}")))?;
    Ok(Loaded { config, seed_source })
}

pub fn load_file(path: &Path, overrides: &[String], env_seed: Option<&str>) -> Result<Loaded, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|e| SchemaError(format!("{}: {e}", path.display())))?;
    load_str(&text, overrides, env_seed).map_err(|e| SchemaError(format!("{}: {}", path.display(), e.0)))
}

fn located(e: &serde_json::Error, what: &str) -> SchemaError {
    SchemaError(format!("{what} line {} column {}: {e}", e.line(), e.column()))
}

/// JSON when it parses, otherwise the raw text as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), SchemaError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(SchemaError(format!("bad override path {path:?}")));
    }
    let mut node = doc;
    for k in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| SchemaError(format!("override {path:?}: `{k}` is not inside an object")))?;
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    let obj = node.as_object_mut().ok_or_else(|| SchemaError(format!("override {path:?}: parent is not an object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
