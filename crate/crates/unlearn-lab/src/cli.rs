//! Experiment configuration, binary checkpoint persistence, and the
//! orchestration behind the `unlearn-lab` binary and the examples.
//!
//! Checkpoint files: magic `UIPC`, a little-endian u32 format version, a
//! length-prefixed canonical-JSON config block, the parameter payload as
//! little-endian f64 in manifest order, and a trailing CRC-32 of the
//! payload. Experiment configs are a single TOML file; environment
//! variables override only the seed and the paths.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, DatasetBundle, KnowledgeRecord, QAPair, Scenario, ScenarioSets, Tokenizer};
use crate::error::{LabError, Result};
use crate::lm::{self, Manifest, ModelConfig, ParamVector};
use crate::metrics::{self, BeforeAfterRow, SplitEvaluation};
use crate::probe;
use crate::uipe::{self, SelectionRule, SplitScores, UpdateVector};
use crate::unlearner::{self, Checkpoint, Method, Optimizer, TrainConfig, UnlearnHistory};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UIPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Environment overrides; only the seed and paths are overridable.
pub const ENV_SEED: &str = "UNLEARN_LAB_SEED";
pub const ENV_DATA_DIR: &str = "UNLEARN_LAB_DATA_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "UNLEARN_LAB_CHECKPOINT_DIR";
pub const ENV_REPORT_DIR: &str = "UNLEARN_LAB_REPORT_DIR";

// ── CRC-32 (IEEE, reflected) ─────────────────────────────────────────

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ── Checkpoint files ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    provenance: String,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
    }
    let meta = CheckpointMeta {
        model_config: ck.model_config,
        train_config: ck.train_config,
        epoch: ck.epoch,
        provenance: ck.provenance.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut payload = Vec::with_capacity(ck.params.len() * 8);
    for v in ck.params.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&payload);

    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| LabError::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_bytes).map_err(io)?;
    w.write_all(&payload).map_err(io)?;
    w.write_all(&crc.to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> LabError {
    LabError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| LabError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| LabError::io(path, e))?;
    if bytes.len() < 12 {
        return Err(corrupt(path, "truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let meta_end = 12 + meta_len;
    if bytes.len() < meta_end {
        return Err(corrupt(path, "truncated config block"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..meta_end])
        .map_err(|e| corrupt(path, format!("config block: {e}")))?;
    meta.model_config
        .validate()
        .map_err(|e| corrupt(path, format!("config block: {e}")))?;

    let manifest = Manifest::for_config(&meta.model_config);
    let payload_len = manifest.total() * 8;
    let payload_end = meta_end + payload_len;
    if bytes.len() != payload_end + 4 {
        return Err(corrupt(
            path,
            format!(
                "payload of {} bytes expected, file holds {}",
                payload_len + 4,
                bytes.len() - meta_end
            ),
        ));
    }
    let payload = &bytes[meta_end..payload_end];
    let stored_crc = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 bytes"));
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(corrupt(
            path,
            format!("checksum mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}"),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Checkpoint {
        params: ParamVector::new(manifest, values)?,
        model_config: meta.model_config,
        train_config: meta.train_config,
        epoch: meta.epoch,
        provenance: meta.provenance,
        lineage: None,
    })
}

// ── Experiment configuration ─────────────────────────────────────────

fn default_persons() -> usize {
    12
}
fn default_utility_pairs() -> usize {
    100
}
fn default_d_model() -> usize {
    32
}
fn default_context_len() -> usize {
    48
}
fn default_alpha() -> f64 {
    1.0
}
fn default_max_utility_drop() -> f64 {
    0.10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: default_d_model(),
            context_len: default_context_len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnSection {
    pub method: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "crate::cli::default_retain_weight")]
    pub retain_weight: f64,
    #[serde(default = "crate::cli::default_npo_beta")]
    pub npo_beta: f64,
    #[serde(default = "crate::cli::default_kl_reference_first")]
    pub kl_reference_first: bool,
}

pub(crate) fn default_retain_weight() -> f64 {
    1.0
}
pub(crate) fn default_npo_beta() -> f64 {
    0.1
}
pub(crate) fn default_kl_reference_first() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UipeSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_max_utility_drop")]
    pub max_utility_drop: f64,
    /// Pin the unlearned checkpoint to a fixed epoch instead of the
    /// utility-floor rule.
    #[serde(default)]
    pub select_epoch: Option<usize>,
}

impl Default for UipeSection {
    fn default() -> Self {
        UipeSection {
            alpha: default_alpha(),
            max_utility_drop: default_max_utility_drop(),
            select_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

/// The full experiment description, parsed from one TOML file and checked
/// into the experiment directory for provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    #[serde(default = "default_persons")]
    pub persons: usize,
    #[serde(default = "default_utility_pairs")]
    pub utility_pairs: usize,
    #[serde(default)]
    pub model: ModelSection,
    pub finetune: TrainSection,
    pub unlearn: UnlearnSection,
    #[serde(default)]
    pub uipe: UipeSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    /// Only the seed and paths may come from the environment.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.seed = seed
                .parse()
                .map_err(|_| LabError::Config(format!("{ENV_SEED} must be an integer")))?;
        }
        if let Ok(dir) = std::env::var(ENV_DATA_DIR) {
            self.paths.data_dir = PathBuf::from(dir);
        }
        if let Ok(dir) = std::env::var(ENV_CHECKPOINT_DIR) {
            self.paths.checkpoint_dir = PathBuf::from(dir);
        }
        if let Ok(dir) = std::env::var(ENV_REPORT_DIR) {
            self.paths.report_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario.parse()
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune.learning_rate,
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            optimizer: Optimizer::Adam,
            method: Method::Finetune,
            retain_weight: 1.0,
            npo_beta: 0.1,
            kl_reference_first: true,
            seed: self.seed,
        }
    }

    pub fn unlearn_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.unlearn.learning_rate,
            epochs: self.unlearn.epochs,
            batch_size: self.unlearn.batch_size,
            optimizer: Optimizer::Sgd,
            method: self.unlearn.method.parse()?,
            retain_weight: self.unlearn.retain_weight,
            npo_beta: self.unlearn.npo_beta,
            kl_reference_first: self.unlearn.kl_reference_first,
            seed: self.seed,
        })
    }

    pub fn selection_rule(&self) -> SelectionRule {
        match self.uipe.select_epoch {
            Some(epoch) => SelectionRule::FixedEpoch(epoch),
            None => SelectionRule::UtilityFloor {
                max_drop: self.uipe.max_utility_drop,
            },
        }
    }
}

// ── Data directory layout ────────────────────────────────────────────

pub fn records_path(data_dir: &Path) -> PathBuf {
    data_dir.join("records.jsonl")
}

pub fn utility_path(data_dir: &Path) -> PathBuf {
    data_dir.join("utility.jsonl")
}

pub fn counts_path(data_dir: &Path) -> PathBuf {
    data_dir.join("counts.json")
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusCounts {
    persons: usize,
    records: usize,
    qa_pairs: usize,
    utility_pairs: usize,
    seed: u64,
}

/// Generate the corpus and write `records.jsonl`, `utility.jsonl`, and a
/// `counts.json` manifest into `out_dir`.
pub fn cmd_gen_data(persons: usize, utility_pairs: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let records = corpus::generate(persons, seed)?;
    let utility = corpus::generate_utility(utility_pairs, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    corpus::write_records_jsonl(&records_path(out_dir), &records)?;
    corpus::write_utility_jsonl(&utility_path(out_dir), &utility)?;
    let counts = CorpusCounts {
        persons,
        records: records.len(),
        qa_pairs: records.len() * 2,
        utility_pairs: utility.len(),
        seed,
    };
    let path = counts_path(out_dir);
    let file = File::create(&path).map_err(|e| LabError::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &counts)?;
    Ok(())
}

/// Loaded corpus files plus the tokenizer built over them.
pub struct LoadedData {
    pub records: Vec<KnowledgeRecord>,
    pub utility: Vec<QAPair>,
    pub tokenizer: Tokenizer,
}

pub fn load_data(data_dir: &Path) -> Result<LoadedData> {
    let records = corpus::read_records_jsonl(&records_path(data_dir))?;
    let utility = corpus::read_utility_jsonl(&utility_path(data_dir))?;
    let tokenizer = corpus::build_tokenizer(&records, &utility);
    Ok(LoadedData {
        records,
        utility,
        tokenizer,
    })
}

impl LoadedData {
    /// The splits do not depend on the scenario; only the training-set
    /// selection does.
    pub fn bundle(&self, scenario: Scenario, seed: u64) -> Result<(DatasetBundle, ScenarioSets)> {
        corpus::build_bundle(&self.records, &self.utility, scenario, &self.tokenizer, seed)
    }
}

// ── Evaluation plumbing shared by commands ───────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AllSplitScores {
    pub forget: f64,
    pub related: f64,
    pub retain: f64,
    pub utility: f64,
}

pub fn eval_all_splits(
    cfg: &ModelConfig,
    params: &ParamVector,
    bundle: &DatasetBundle,
    tokenizer: &Tokenizer,
) -> Result<AllSplitScores> {
    let score = |pairs, name| -> Result<f64> {
        Ok(metrics::eval_split(cfg, params, pairs, tokenizer, name)?.mean_f1)
    };
    Ok(AllSplitScores {
        forget: score(&bundle.forget, "forget")?,
        related: score(&bundle.related, "related")?,
        retain: score(&bundle.retain, "retain")?,
        utility: score(&bundle.utility, "utility")?,
    })
}

/// Split evaluator for sweeps: forget / related / utility means.
pub fn sweep_evaluator<'a>(
    cfg: &'a ModelConfig,
    bundle: &'a DatasetBundle,
    tokenizer: &'a Tokenizer,
) -> impl Fn(&ParamVector) -> Result<SplitScores> + Sync + 'a {
    move |params: &ParamVector| {
        Ok(SplitScores {
            forget: metrics::eval_split(cfg, params, &bundle.forget, tokenizer, "forget")?.mean_f1,
            related: metrics::eval_split(cfg, params, &bundle.related, tokenizer, "related")?
                .mean_f1,
            utility: metrics::eval_split(cfg, params, &bundle.utility, tokenizer, "utility")?
                .mean_f1,
        })
    }
}

// ── Per-epoch metrics file ───────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub forget_rouge: f64,
    pub related_rouge: f64,
    pub utility_rouge: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UnlearnMetricsFile {
    pub method: String,
    pub initial_forget: f64,
    pub initial_related: f64,
    pub initial_utility: f64,
    pub epochs: Vec<EpochMetrics>,
    pub aborted: Option<String>,
}

pub fn unlearn_metrics(method: Method, history: &UnlearnHistory) -> UnlearnMetricsFile {
    UnlearnMetricsFile {
        method: method.to_string(),
        initial_forget: history.initial_forget,
        initial_related: history.initial_related,
        initial_utility: history.initial_utility,
        epochs: history
            .epochs
            .iter()
            .map(|e| EpochMetrics {
                epoch: e.epoch,
                forget_rouge: e.forget_rouge,
                related_rouge: e.related_rouge,
                utility_rouge: e.utility_rouge,
                mean_loss: e.mean_loss,
            })
            .collect(),
        aborted: history.aborted.clone(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    w.flush().map_err(|e| LabError::io(path, e))
}

// ── The full pipeline ────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub scenario: String,
    pub seed: u64,
    pub persons: usize,
    pub vocab_size: usize,
    pub finetune_epochs: usize,
    pub unlearn_method: String,
    pub unlearn_epochs: usize,
    pub alpha: f64,
    pub initial_scores: AllSplitScores,
    pub per_epoch: Vec<EpochMetrics>,
    pub selected_epoch: usize,
    pub selection_fell_back: bool,
    pub update_vector_norm: f64,
    pub theta_un_scores: AllSplitScores,
    pub theta_uipe_scores: AllSplitScores,
    pub aborted: Option<String>,
    pub files: PipelineFiles,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineFiles {
    pub records: String,
    pub utility: String,
    pub theta_ini: String,
    pub theta_un: String,
    pub theta_uipe: String,
    pub unlearn_metrics: String,
    pub reports: Vec<String>,
}

/// Everything the pipeline produced, for callers that keep working with
/// the artifacts in memory.
pub struct PipelineOutput {
    pub summary: PipelineSummary,
    pub theta_ini: Checkpoint,
    pub theta_un: Checkpoint,
    pub theta_uipe: Checkpoint,
    pub history: UnlearnHistory,
    pub update_vector: UpdateVector,
}

/// Run the whole procedure end to end: generate data, fine-tune the
/// initial model, unlearn for T epochs with per-epoch forget/utility
/// scoring, select the unlearned checkpoint, compute the update vector,
/// extrapolate, and evaluate everything. Artifacts and a summary with
/// every intermediate metric are persisted under the configured paths.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let scenario = config.scenario()?;
    let ucfg = config.unlearn_config()?;
    if ucfg.epochs == 0 {
        return Err(LabError::Config("pipeline needs unlearn.epochs >= 1".into()));
    }
    let ftcfg = config.finetune_config();

    // stage: data
    cmd_gen_data(config.persons, config.utility_pairs, config.seed, &config.paths.data_dir)
        .map_err(|e| stage_error("gen-data", e))?;
    let data = load_data(&config.paths.data_dir).map_err(|e| stage_error("gen-data", e))?;
    let (bundle, sets) = data.bundle(scenario, config.seed)?;

    let model_config = ModelConfig::new(
        data.tokenizer.vocab_size(),
        config.model.d_model,
        config.model.context_len,
        config.seed,
    );
    model_config.validate()?;
    let longest = bundle.max_sequence_len();
    if longest > model_config.context_len {
        return Err(LabError::Config(format!(
            "context_len {} shorter than the longest encoded pair ({longest})",
            model_config.context_len
        )));
    }

    // stage: finetune
    let init = lm::init(&model_config)?;
    let theta_ini = unlearner::finetune(&init, &model_config, &sets.finetune, &ftcfg)
        .map_err(|e| stage_error("finetune", e))?;
    let ckpt_dir = &config.paths.checkpoint_dir;
    let theta_ini_path = ckpt_dir.join("theta_ini.uipc");
    save_checkpoint(&theta_ini_path, &theta_ini)?;
    let initial_scores = eval_all_splits(&model_config, &theta_ini.params, &bundle, &data.tokenizer)?;

    // stage: unlearn
    let history = unlearner::run_unlearning(&theta_ini, &bundle, &sets.unlearn, &data.tokenizer, &ucfg)
        .map_err(|e| stage_error("unlearn", e))?;
    let metrics_file = unlearn_metrics(ucfg.method, &history);
    let metrics_path = config.paths.report_dir.join("unlearn_metrics.json");
    write_json(&metrics_path, &metrics_file)?;
    if history.epochs.is_empty() {
        return Err(stage_error(
            "unlearn",
            LabError::Config(format!(
                "no completed epochs ({})",
                history.aborted.as_deref().unwrap_or("unknown cause")
            )),
        ));
    }

    // stage: select + extrapolate
    let selection = uipe::select_checkpoint(
        &history.epochs,
        initial_scores.utility,
        config.selection_rule(),
    )
    .map_err(|e| stage_error("select", e))?;
    let selected_epoch = selection.record.epoch;
    let selection_fell_back = selection.fell_back;
    let theta_un = selection.record.checkpoint.clone();
    let theta_un_path = ckpt_dir.join("theta_un.uipc");
    save_checkpoint(&theta_un_path, &theta_un)?;

    let v = uipe::update_vector(&theta_ini, &theta_un).map_err(|e| stage_error("uipe", e))?;
    let theta_uipe =
        uipe::extrapolate(&theta_un, &v, config.uipe.alpha).map_err(|e| stage_error("uipe", e))?;
    let theta_uipe_path = ckpt_dir.join("theta_uipe.uipc");
    save_checkpoint(&theta_uipe_path, &theta_uipe)?;

    // stage: final evaluation + reports
    let theta_un_scores = eval_all_splits(&model_config, &theta_un.params, &bundle, &data.tokenizer)?;
    let theta_uipe_scores =
        eval_all_splits(&model_config, &theta_uipe.params, &bundle, &data.tokenizer)?;

    let label = format!("{}-{}", ucfg.method, scenario);
    let curves = vec![(label, history.epoch_points())];
    let before_after = vec![
        BeforeAfterRow {
            split: "forget".into(),
            before: theta_un_scores.forget,
            after: theta_uipe_scores.forget,
        },
        BeforeAfterRow {
            split: "related".into(),
            before: theta_un_scores.related,
            after: theta_uipe_scores.related,
        },
        BeforeAfterRow {
            split: "utility".into(),
            before: theta_un_scores.utility,
            after: theta_uipe_scores.utility,
        },
    ];
    let report_files =
        metrics::experiment_report(&config.paths.report_dir, &curves, None, &before_after)?;

    let summary = PipelineSummary {
        scenario: scenario.to_string(),
        seed: config.seed,
        persons: config.persons,
        vocab_size: data.tokenizer.vocab_size(),
        finetune_epochs: ftcfg.epochs,
        unlearn_method: ucfg.method.to_string(),
        unlearn_epochs: ucfg.epochs,
        alpha: config.uipe.alpha,
        initial_scores,
        per_epoch: metrics_file.epochs,
        selected_epoch,
        selection_fell_back,
        update_vector_norm: v.norm(),
        theta_un_scores,
        theta_uipe_scores,
        aborted: history.aborted.clone(),
        files: PipelineFiles {
            records: records_path(&config.paths.data_dir).display().to_string(),
            utility: utility_path(&config.paths.data_dir).display().to_string(),
            theta_ini: theta_ini_path.display().to_string(),
            theta_un: theta_un_path.display().to_string(),
            theta_uipe: theta_uipe_path.display().to_string(),
            unlearn_metrics: metrics_path.display().to_string(),
            reports: report_files
                .written
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        },
    };
    write_json(&config.paths.report_dir.join("summary.json"), &summary)?;
    Ok(PipelineOutput {
        summary,
        theta_ini,
        theta_un,
        theta_uipe,
        history,
        update_vector: v,
    })
}

fn stage_error(stage: &str, err: LabError) -> LabError {
    match err {
        LabError::Config(msg) => LabError::Config(format!("stage {stage}: {msg}")),
        other => other,
    }
}

// ── Thin command wrappers used by the binary ─────────────────────────

pub fn cmd_eval(
    ckpt_path: &Path,
    data_dir: &Path,
    split: &str,
    out: Option<&Path>,
) -> Result<SplitEvaluation> {
    let ck = load_checkpoint(ckpt_path)?;
    let data = load_data(data_dir)?;
    let (bundle, _) = data.bundle(Scenario::P1, ck.model_config.seed)?;
    let pairs = bundle
        .split(split)
        .ok_or_else(|| LabError::Config(format!("unknown split {split:?}")))?;
    let eval = metrics::eval_split(&ck.model_config, &ck.params, pairs, &data.tokenizer, split)?;
    if let Some(path) = out {
        write_json(path, &eval)?;
    }
    Ok(eval)
}

pub fn cmd_probe(
    ckpt_path: &Path,
    data_dir: &Path,
    seed: u64,
    permutations: usize,
    out_json: &Path,
    out_csv: &Path,
) -> Result<probe::SimilarityReport> {
    let ck = load_checkpoint(ckpt_path)?;
    let data = load_data(data_dir)?;
    let report = probe::paired_similarity_experiment_with(
        &ck.model_config,
        &ck.params,
        &data.tokenizer,
        &data.records,
        seed,
        permutations,
    )?;
    probe::write_similarity_report(&report, out_json, out_csv)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    ini_path: &Path,
    un_path: &Path,
    next_path: Option<&Path>,
    data_dir: &Path,
    alphas: &[f64],
    out_csv: &Path,
) -> Result<Vec<uipe::SweepRow>> {
    let theta_ini = load_checkpoint(ini_path)?;
    let theta_un = load_checkpoint(un_path)?;
    let next = next_path.map(load_checkpoint).transpose()?;
    let data = load_data(data_dir)?;
    let (bundle, _) = data.bundle(Scenario::P1, theta_un.model_config.seed)?;
    let eval = sweep_evaluator(&theta_un.model_config, &bundle, &data.tokenizer);
    let rows = uipe::alpha_sweep(&theta_ini, &theta_un, next.as_ref(), alphas, &eval)?;
    uipe::write_sweep_csv(out_csv, &rows)?;
    Ok(rows)
}
