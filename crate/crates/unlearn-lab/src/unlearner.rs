//! Fine-tuning and the gradient-ascent family of unlearning objectives,
//! with per-epoch checkpointing and split evaluation.
//!
//! Sign convention: every objective here is *minimized*. The gradient
//! ascent objective is the mean forget-set log-probability, so descending
//! it drives the forget data's likelihood down; all directional
//! quantities downstream (update vectors, projections) are defined from
//! actual checkpoint differences and are therefore independent of how the
//! update step is written on paper.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DatasetBundle, EncodedPair, Tokenizer};
use crate::error::{LabError, Result};
use crate::lm::{
    self, build_logits_graph, build_logp_graph, collect_leaf_grads, GradientVector, ModelConfig,
    ParamVector,
};
use crate::metrics;

/// Gradient accumulation chunk: fixed so parallel reductions combine in
/// the same order regardless of thread scheduling.
const GRAD_CHUNK: usize = 8;

/// Gradient norm below which an example is treated as saturated.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Ga,
    GradDiff,
    KlMin,
    Npo,
}

impl Method {
    pub fn is_unlearning(self) -> bool {
        !matches!(self, Method::Finetune)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Method::KlMin | Method::Npo)
    }

    pub fn needs_retain(self) -> bool {
        matches!(self, Method::GradDiff | Method::KlMin)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Finetune => "finetune",
            Method::Ga => "ga",
            Method::GradDiff => "graddiff",
            Method::KlMin => "klmin",
            Method::Npo => "npo",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "finetune" => Ok(Method::Finetune),
            "ga" => Ok(Method::Ga),
            "graddiff" | "grad_diff" | "grad-diff" => Ok(Method::GradDiff),
            "klmin" | "kl_min" | "kl-min" => Ok(Method::KlMin),
            "npo" => Ok(Method::Npo),
            other => Err(LabError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Pass 0 to get the identity run (epoch-0 checkpoint / empty history).
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub method: Method,
    /// Retain-term weight for graddiff / klmin.
    pub retain_weight: f64,
    pub npo_beta: f64,
    /// KL direction: true anchors KL(reference || current), false the
    /// reverse.
    pub kl_reference_first: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LabError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be >= 1".into()));
        }
        if self.method == Method::Npo && !(self.npo_beta > 0.0) {
            return Err(LabError::Config(format!(
                "npo_beta must be positive, got {}",
                self.npo_beta
            )));
        }
        Ok(())
    }

    pub fn finetune_defaults(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 160,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            method: Method::Finetune,
            retain_weight: 1.0,
            npo_beta: 0.1,
            kl_reference_first: true,
            seed,
        }
    }

    /// Unlearning default: plain first-order steps at half the fine-tune
    /// rate, so the update vector stays an unweighted accumulation of
    /// loss gradients.
    pub fn unlearn_defaults(method: Method, finetune_rate: f64, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.5 * finetune_rate,
            epochs: 10,
            batch_size: 16,
            optimizer: Optimizer::Sgd,
            method,
            retain_weight: 1.0,
            npo_beta: 0.1,
            kl_reference_first: true,
            seed,
        }
    }
}

/// Model parameters plus the configuration and training lineage that
/// produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub provenance: String,
    /// Set only on checkpoints produced by extrapolation; carries what is
    /// needed to compose further extrapolations exactly.
    pub lineage: Option<Box<crate::uipe::ExtrapolationLineage>>,
}

impl Checkpoint {
    /// Content address over model config and parameter payload. Two
    /// checkpoints with equal configs and bit-equal payloads share an id.
    pub fn content_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.model_config).expect("config serializes"));
        for v in self.params.values() {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Mean over the batch of the summed answer-token log-probability: the
/// gradient ascent objective. Always <= 0; unlearning steps decrease it.
pub fn loss_ga(cfg: &ModelConfig, params: &ParamVector, forget_batch: &[EncodedPair]) -> Result<f64> {
    if forget_batch.is_empty() {
        return Err(LabError::Config("empty forget batch".into()));
    }
    let mut total = 0.0;
    for pair in forget_batch {
        total += lm::seq_log_prob(cfg, params, &pair.prompt, &pair.completion)?;
    }
    Ok(total / forget_batch.len() as f64)
}

fn mean_nll(cfg: &ModelConfig, params: &ParamVector, batch: &[EncodedPair]) -> Result<f64> {
    let mut total = 0.0;
    for pair in batch {
        total -= lm::seq_log_prob(cfg, params, &pair.prompt, &pair.completion)?;
    }
    Ok(total / batch.len() as f64)
}

/// Forget objective plus a weighted retain negative log-likelihood.
pub fn loss_graddiff(
    cfg: &ModelConfig,
    params: &ParamVector,
    forget_batch: &[EncodedPair],
    retain_batch: &[EncodedPair],
    retain_weight: f64,
) -> Result<f64> {
    if retain_batch.is_empty() {
        return Err(LabError::Config("empty retain batch".into()));
    }
    Ok(loss_ga(cfg, params, forget_batch)? + retain_weight * mean_nll(cfg, params, retain_batch)?)
}

/// Log-probabilities of every vocabulary entry at each answer position,
/// flattened `[answer_len * vocab]`. Value-only forward pass.
fn row_log_probs(
    cfg: &ModelConfig,
    params: &ParamVector,
    x: &[usize],
    y: &[usize],
) -> Result<Vec<f64>> {
    let tokens: Vec<usize> = x.iter().chain(y).copied().collect();
    let rows: Vec<usize> = (x.len() - 1..x.len() - 1 + y.len()).collect();
    let mut graph = build_logits_graph(cfg, params, &tokens, &rows)?;
    let ls = graph.tape.row_log_softmax(graph.logits)?;
    Ok(graph.tape.value(ls).to_vec())
}

/// KL divergence summed over rows of two row-stacked log-distributions.
/// `lhs` is the distribution the expectation is taken under.
pub fn kl_divergence_rows(lhs_log: &[f64], rhs_log: &[f64], vocab: usize) -> f64 {
    debug_assert_eq!(lhs_log.len(), rhs_log.len());
    debug_assert_eq!(lhs_log.len() % vocab, 0);
    lhs_log
        .iter()
        .zip(rhs_log)
        .map(|(&l, &r)| l.exp() * (l - r))
        .sum()
}

/// Forget objective plus a weighted KL anchor to the frozen reference
/// model, measured only at retain answer positions.
pub fn loss_klmin(
    cfg: &ModelConfig,
    params: &ParamVector,
    ref_params: &ParamVector,
    forget_batch: &[EncodedPair],
    retain_batch: &[EncodedPair],
    retain_weight: f64,
    reference_first: bool,
) -> Result<f64> {
    if retain_batch.is_empty() {
        return Err(LabError::Config("empty retain batch".into()));
    }
    let vocab = cfg.vocab_size;
    let mut kl_total = 0.0;
    let mut rows_total = 0usize;
    for pair in retain_batch {
        let ref_lp = row_log_probs(cfg, ref_params, &pair.prompt, &pair.completion)?;
        let cur_lp = row_log_probs(cfg, params, &pair.prompt, &pair.completion)?;
        kl_total += if reference_first {
            kl_divergence_rows(&ref_lp, &cur_lp, vocab)
        } else {
            kl_divergence_rows(&cur_lp, &ref_lp, vocab)
        };
        rows_total += pair.completion.len();
    }
    let kl_mean = kl_total / rows_total as f64;
    Ok(loss_ga(cfg, params, forget_batch)? + retain_weight * kl_mean)
}

/// Saturating preference-style objective over negatives only:
/// `(2/beta) * mean log(1 + exp(beta * (log P_theta - log P_ref)))`.
pub fn loss_npo(
    cfg: &ModelConfig,
    params: &ParamVector,
    ref_params: &ParamVector,
    forget_batch: &[EncodedPair],
    beta: f64,
) -> Result<f64> {
    if forget_batch.is_empty() {
        return Err(LabError::Config("empty forget batch".into()));
    }
    if !(beta > 0.0) {
        return Err(LabError::Config("npo beta must be positive".into()));
    }
    let mut total = 0.0;
    for pair in forget_batch {
        let cur = lm::seq_log_prob(cfg, params, &pair.prompt, &pair.completion)?;
        let reference = lm::seq_log_prob(cfg, ref_params, &pair.prompt, &pair.completion)?;
        let z = beta * (cur - reference);
        let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
        total += (2.0 / beta) * softplus;
    }
    Ok(total / forget_batch.len() as f64)
}

/// Per-example contribution to a batch objective: gradient, a primary
/// value, and its normalization weight.
type ExampleTerm = (GradientVector, f64, f64);

/// Map every example through `f` and combine in fixed-size chunks so the
/// reduction order never depends on thread scheduling.
fn accumulate_terms<F>(examples: &[EncodedPair], n_params: usize, f: F) -> Result<(Vec<f64>, f64, f64)>
where
    F: Fn(&EncodedPair) -> Result<ExampleTerm> + Sync,
{
    let chunks: Vec<Result<(Vec<f64>, f64, f64)>> = examples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad_sum = vec![0.0; n_params];
            let mut value_sum = 0.0;
            let mut weight_sum = 0.0;
            for pair in chunk {
                let (grad, value, weight) = f(pair)?;
                for (g, &d) in grad_sum.iter_mut().zip(grad.values()) {
                    *g += d;
                }
                value_sum += value;
                weight_sum += weight;
            }
            Ok((grad_sum, value_sum, weight_sum))
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    let mut value = 0.0;
    let mut weight = 0.0;
    for chunk in chunks {
        let (g, v, w) = chunk?;
        for (a, &b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        value += v;
        weight += w;
    }
    Ok((grad, value, weight))
}

/// Gradient of log P(y|x) for one pair.
fn logp_term(cfg: &ModelConfig, params: &ParamVector, pair: &EncodedPair) -> Result<ExampleTerm> {
    let mut graph = build_logp_graph(cfg, params, &pair.prompt, &pair.completion)?;
    graph.tape.backward(graph.logp)?;
    let value = graph.tape.value(graph.logp)[0];
    let grad = collect_leaf_grads(&graph.tape, &graph.leaves, params.manifest());
    Ok((grad, value, 1.0))
}

/// Gradient and value of the summed-over-rows KL term for one retain pair.
fn kl_term(
    cfg: &ModelConfig,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &EncodedPair,
    reference_first: bool,
) -> Result<ExampleTerm> {
    let (x, y) = (&pair.prompt, &pair.completion);
    let ref_lp = row_log_probs(cfg, ref_params, x, y)?;
    let tokens: Vec<usize> = x.iter().chain(y).copied().collect();
    let rows: Vec<usize> = (x.len() - 1..x.len() - 1 + y.len()).collect();
    let mut graph = build_logits_graph(cfg, params, &tokens, &rows)?;
    let tape = &mut graph.tape;
    let shape = [y.len(), cfg.vocab_size];

    let kl_node = if reference_first {
        // KL(ref || cur) = sum p_ref ln p_ref - sum p_ref log_softmax(cur)
        let entropy: f64 = ref_lp.iter().map(|&l| l.exp() * l).sum();
        let p_ref: Vec<f64> = ref_lp.iter().map(|&l| l.exp()).collect();
        let pref_leaf = tape.leaf(&shape, p_ref)?;
        let cur_ls = tape.row_log_softmax(graph.logits)?;
        let prod = tape.mul(pref_leaf, cur_ls)?;
        let cross = tape.sum_all(prod)?;
        let neg = tape.scale(cross, -1.0)?;
        tape.add_scalar(neg, entropy)?
    } else {
        // KL(cur || ref) = sum p_cur log_softmax(cur) - sum p_cur ln p_ref
        let cur_sm = tape.row_softmax(graph.logits)?;
        let cur_ls = tape.row_log_softmax(graph.logits)?;
        let self_prod = tape.mul(cur_sm, cur_ls)?;
        let self_term = tape.sum_all(self_prod)?;
        let ref_leaf = tape.leaf(&shape, ref_lp)?;
        let cross_prod = tape.mul(cur_sm, ref_leaf)?;
        let cross = tape.sum_all(cross_prod)?;
        let neg_cross = tape.scale(cross, -1.0)?;
        tape.add(self_term, neg_cross)?
    };
    tape.backward(kl_node)?;
    let value = tape.value(kl_node)[0];
    let grad = collect_leaf_grads(tape, &graph.leaves, params.manifest());
    Ok((grad, value, y.len() as f64))
}

/// NPO per-example loss node built on top of the log-probability graph.
fn npo_term(
    cfg: &ModelConfig,
    params: &ParamVector,
    ref_logp: f64,
    pair: &EncodedPair,
    beta: f64,
) -> Result<ExampleTerm> {
    let mut graph = build_logp_graph(cfg, params, &pair.prompt, &pair.completion)?;
    let tape = &mut graph.tape;
    let shifted = tape.add_scalar(graph.logp, -ref_logp)?;
    let scaled = tape.scale(shifted, beta)?;
    let sp = tape.softplus(scaled)?;
    let loss = tape.scale(sp, 2.0 / beta)?;
    tape.backward(loss)?;
    let value = tape.value(loss)[0];
    let grad = collect_leaf_grads(tape, &graph.leaves, params.manifest());
    Ok((grad, value, 1.0))
}

/// The minimized objective's batch gradient and value for one method.
struct BatchContext<'a> {
    cfg: &'a ModelConfig,
    ref_params: Option<&'a ParamVector>,
    /// Reference log-probs aligned with the forget batch (NPO only).
    npo_ref_logps: Option<&'a [f64]>,
    tcfg: &'a TrainConfig,
}

fn objective_batch(
    ctx: &BatchContext<'_>,
    params: &ParamVector,
    forget_batch: &[EncodedPair],
    retain_batch: &[EncodedPair],
) -> Result<(Vec<f64>, f64)> {
    let n = params.len();
    let cfg = ctx.cfg;
    match ctx.tcfg.method {
        Method::Finetune => {
            let (grad_sum, logp_sum, count) =
                accumulate_terms(forget_batch, n, |pair| logp_term(cfg, params, pair))?;
            let inv = -1.0 / count;
            Ok((grad_sum.iter().map(|g| g * inv).collect(), logp_sum * inv))
        }
        Method::Ga => {
            let (grad_sum, logp_sum, count) =
                accumulate_terms(forget_batch, n, |pair| logp_term(cfg, params, pair))?;
            let inv = 1.0 / count;
            Ok((grad_sum.iter().map(|g| g * inv).collect(), logp_sum * inv))
        }
        Method::GradDiff => {
            let (fgrad, flogp, fcount) =
                accumulate_terms(forget_batch, n, |pair| logp_term(cfg, params, pair))?;
            let (rgrad, rlogp, rcount) =
                accumulate_terms(retain_batch, n, |pair| logp_term(cfg, params, pair))?;
            let lam = ctx.tcfg.retain_weight;
            let grad: Vec<f64> = fgrad
                .iter()
                .zip(&rgrad)
                .map(|(f, r)| f / fcount - lam * r / rcount)
                .collect();
            Ok((grad, flogp / fcount - lam * rlogp / rcount))
        }
        Method::KlMin => {
            let reference = ctx
                .ref_params
                .ok_or_else(|| LabError::Config("klmin requires reference params".into()))?;
            let (fgrad, flogp, fcount) =
                accumulate_terms(forget_batch, n, |pair| logp_term(cfg, params, pair))?;
            let (kgrad, ksum, krows) = accumulate_terms(retain_batch, n, |pair| {
                kl_term(cfg, params, reference, pair, ctx.tcfg.kl_reference_first)
            })?;
            let lam = ctx.tcfg.retain_weight;
            let grad: Vec<f64> = fgrad
                .iter()
                .zip(&kgrad)
                .map(|(f, k)| f / fcount + lam * k / krows)
                .collect();
            Ok((grad, flogp / fcount + lam * ksum / krows))
        }
        Method::Npo => {
            let refs = ctx
                .npo_ref_logps
                .ok_or_else(|| LabError::Config("npo requires reference log-probs".into()))?;
            debug_assert_eq!(refs.len(), forget_batch.len());
            let beta = ctx.tcfg.npo_beta;
            let terms: Vec<Result<ExampleTerm>> = forget_batch
                .par_iter()
                .zip(refs.par_iter())
                .map(|(pair, &c)| npo_term(cfg, params, c, pair, beta))
                .collect();
            let mut grad = vec![0.0; n];
            let mut total = 0.0;
            let count = forget_batch.len() as f64;
            for term in terms {
                let (g, v, _) = term?;
                for (a, &b) in grad.iter_mut().zip(g.values()) {
                    *a += b;
                }
                total += v;
            }
            let inv = 1.0 / count;
            Ok((grad.iter().map(|g| g * inv).collect(), total * inv))
        }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, &g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Minimize mean negative log-likelihood over the training set. Returns
/// the resulting checkpoint; zero epochs returns the initialization as an
/// epoch-0 checkpoint.
pub fn finetune(
    init: &ParamVector,
    model_config: &ModelConfig,
    train_set: &[EncodedPair],
    tcfg: &TrainConfig,
) -> Result<Checkpoint> {
    if tcfg.method != Method::Finetune {
        return Err(LabError::Config(format!(
            "finetune called with method {}",
            tcfg.method
        )));
    }
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(LabError::Config("empty training set".into()));
    }
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = AdamState::new(params.len());
    let ctx = BatchContext {
        cfg: model_config,
        ref_params: None,
        npo_ref_logps: None,
        tcfg,
    };
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tcfg.epochs {
        indices.shuffle(&mut rng);
        for batch_idx in indices.chunks(tcfg.batch_size) {
            let batch: Vec<EncodedPair> =
                batch_idx.iter().map(|&i| train_set[i].clone()).collect();
            let (grad, loss) = objective_batch(&ctx, &params, &batch, &[])?;
            if !loss.is_finite() {
                return Err(LabError::Diverged { epoch });
            }
            match tcfg.optimizer {
                Optimizer::Adam => adam.step(params.values_mut(), &grad, tcfg.learning_rate),
                Optimizer::Sgd => sgd_step(params.values_mut(), &grad, tcfg.learning_rate),
            }
        }
    }
    Ok(Checkpoint {
        params,
        model_config: *model_config,
        train_config: *tcfg,
        epoch: tcfg.epochs,
        provenance: format!("finetune seed {} epochs {}", tcfg.seed, tcfg.epochs),
        lineage: None,
    })
}

/// One epoch of an unlearning run: the checkpoint after the epoch and the
/// split scores measured on it.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub checkpoint: Checkpoint,
    pub forget_rouge: f64,
    pub related_rouge: f64,
    pub utility_rouge: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct UnlearnHistory {
    pub epochs: Vec<EpochRecord>,
    pub initial_forget: f64,
    pub initial_related: f64,
    pub initial_utility: f64,
    /// Set when a non-finite loss aborted the run; the history retains
    /// every epoch completed before the abort.
    pub aborted: Option<String>,
}

impl UnlearnHistory {
    pub fn epoch_points(&self) -> Vec<metrics::EpochPoint> {
        let mut points = vec![metrics::EpochPoint {
            epoch: 0,
            forget: self.initial_forget,
            related: self.initial_related,
            utility: self.initial_utility,
        }];
        points.extend(self.epochs.iter().map(|e| metrics::EpochPoint {
            epoch: e.epoch,
            forget: e.forget_rouge,
            related: e.related_rouge,
            utility: e.utility_rouge,
        }));
        points
    }
}

fn eval_triple(
    cfg: &ModelConfig,
    params: &ParamVector,
    bundle: &DatasetBundle,
    tokenizer: &Tokenizer,
) -> Result<(f64, f64, f64)> {
    let forget = metrics::eval_split(cfg, params, &bundle.forget, tokenizer, "forget")?;
    let related = metrics::eval_split(cfg, params, &bundle.related, tokenizer, "related")?;
    let utility = metrics::eval_split(cfg, params, &bundle.utility, tokenizer, "utility")?;
    Ok((forget.mean_f1, related.mean_f1, utility.mean_f1))
}

/// Run `tcfg.epochs` passes of mini-batch updates of the chosen method
/// over `unlearn_set`, evaluating forget-quality and utility after every
/// epoch and snapshotting the parameters. Retain batches for the
/// regularized methods cycle through the bundle's retain split.
pub fn run_unlearning(
    theta_ini: &Checkpoint,
    bundle: &DatasetBundle,
    unlearn_set: &[EncodedPair],
    tokenizer: &Tokenizer,
    tcfg: &TrainConfig,
) -> Result<UnlearnHistory> {
    if !tcfg.method.is_unlearning() {
        return Err(LabError::Config(format!(
            "run_unlearning called with method {}",
            tcfg.method
        )));
    }
    tcfg.validate()?;
    if unlearn_set.is_empty() {
        return Err(LabError::Config("empty unlearn set".into()));
    }
    let cfg = &theta_ini.model_config;
    let (initial_forget, initial_related, initial_utility) =
        eval_triple(cfg, &theta_ini.params, bundle, tokenizer)?;

    let ref_params = theta_ini.params.clone();
    let npo_ref_logps: Option<Vec<f64>> = if tcfg.method == Method::Npo {
        let logps: Vec<Result<f64>> = unlearn_set
            .par_iter()
            .map(|pair| lm::seq_log_prob(cfg, &ref_params, &pair.prompt, &pair.completion))
            .collect();
        Some(logps.into_iter().collect::<Result<Vec<f64>>>()?)
    } else {
        None
    };

    let mut params = theta_ini.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut history = UnlearnHistory {
        epochs: Vec::with_capacity(tcfg.epochs),
        initial_forget,
        initial_related,
        initial_utility,
        aborted: None,
    };

    let mut forget_idx: Vec<usize> = (0..unlearn_set.len()).collect();
    let mut retain_idx: Vec<usize> = (0..bundle.retain.len()).collect();
    'epochs: for epoch in 1..=tcfg.epochs {
        forget_idx.shuffle(&mut rng);
        if tcfg.method.needs_retain() {
            if bundle.retain.is_empty() {
                return Err(LabError::Config(format!(
                    "method {} needs a retain split but it is empty",
                    tcfg.method
                )));
            }
            retain_idx.shuffle(&mut rng);
        }
        let mut retain_cursor = 0usize;
        let mut loss_sum = 0.0;
        let mut loss_examples = 0usize;
        for batch_idx in forget_idx.chunks(tcfg.batch_size) {
            let forget_batch: Vec<EncodedPair> =
                batch_idx.iter().map(|&i| unlearn_set[i].clone()).collect();
            let retain_batch: Vec<EncodedPair> = if tcfg.method.needs_retain() {
                (0..forget_batch.len().min(bundle.retain.len()))
                    .map(|_| {
                        let pair = bundle.retain[retain_idx[retain_cursor]].clone();
                        retain_cursor = (retain_cursor + 1) % retain_idx.len();
                        pair
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch_refs: Option<Vec<f64>> = npo_ref_logps
                .as_ref()
                .map(|all| batch_idx.iter().map(|&i| all[i]).collect());
            let ctx = BatchContext {
                cfg,
                ref_params: Some(&ref_params),
                npo_ref_logps: batch_refs.as_deref(),
                tcfg,
            };
            let step = objective_batch(&ctx, &params, &forget_batch, &retain_batch);
            let (grad, loss) = match step {
                Ok(pair) => pair,
                Err(LabError::NonFinite { op }) => {
                    history.aborted = Some(format!(
                        "non-finite value in {op} during epoch {epoch}; keeping last good checkpoint"
                    ));
                    break 'epochs;
                }
                Err(other) => return Err(other),
            };
            if !loss.is_finite() {
                history.aborted = Some(format!(
                    "non-finite loss at epoch {epoch}; keeping last good checkpoint"
                ));
                break 'epochs;
            }
            match tcfg.optimizer {
                Optimizer::Adam => adam.step(params.values_mut(), &grad, tcfg.learning_rate),
                Optimizer::Sgd => sgd_step(params.values_mut(), &grad, tcfg.learning_rate),
            }
            loss_sum += loss * forget_batch.len() as f64;
            loss_examples += forget_batch.len();
        }
        let (forget_rouge, related_rouge, utility_rouge) =
            eval_triple(cfg, &params, bundle, tokenizer)?;
        history.epochs.push(EpochRecord {
            epoch,
            checkpoint: Checkpoint {
                params: params.clone(),
                model_config: *cfg,
                train_config: *tcfg,
                epoch,
                provenance: format!(
                    "unlearn {} epoch {epoch} from {}",
                    tcfg.method,
                    theta_ini.content_id()
                ),
                lineage: None,
            },
            forget_rouge,
            related_rouge,
            utility_rouge,
            mean_loss: loss_sum / loss_examples as f64,
        });
    }
    Ok(history)
}

/// Descent sanity check: halve the step size until a single step of the
/// method's objective strictly decreases the loss on its own batch.
/// Returns the step size that worked.
pub fn descent_check(
    cfg: &ModelConfig,
    params: &ParamVector,
    ref_params: &ParamVector,
    forget_batch: &[EncodedPair],
    retain_batch: &[EncodedPair],
    tcfg: &TrainConfig,
    max_halvings: usize,
) -> Result<f64> {
    let npo_refs: Option<Vec<f64>> = if tcfg.method == Method::Npo {
        Some(
            forget_batch
                .iter()
                .map(|p| lm::seq_log_prob(cfg, ref_params, &p.prompt, &p.completion))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    let ctx = BatchContext {
        cfg,
        ref_params: Some(ref_params),
        npo_ref_logps: npo_refs.as_deref(),
        tcfg,
    };
    let (grad, loss0) = objective_batch(&ctx, params, forget_batch, retain_batch)?;
    let mut eta = tcfg.learning_rate;
    for _ in 0..=max_halvings {
        let mut stepped = params.clone();
        sgd_step(stepped.values_mut(), &grad, eta);
        let (_, loss1) = objective_batch(&ctx, &stepped, forget_batch, retain_batch)?;
        if loss1 < loss0 {
            return Ok(eta);
        }
        eta *= 0.5;
    }
    Err(LabError::Config(format!(
        "no descent after {max_halvings} halvings from eta {}",
        tcfg.learning_rate
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, Scenario};

    fn tiny_world() -> (ModelConfig, crate::corpus::Tokenizer, DatasetBundle, crate::corpus::ScenarioSets) {
        let records = corpus::generate(2, 5).unwrap();
        let utility = corpus::generate_utility(8, 5).unwrap();
        let tok = corpus::build_tokenizer(&records, &utility);
        let (bundle, sets) = corpus::build_bundle(&records, &utility, Scenario::P1, &tok, 5).unwrap();
        let cfg = ModelConfig::new(tok.vocab_size(), 16, 48, 9);
        (cfg, tok, bundle, sets)
    }

    #[test]
    fn loss_ga_is_mean_of_log_probs_and_nonpositive() {
        let (cfg, _tok, bundle, _) = tiny_world();
        let params = lm::init(&cfg).unwrap();
        let batch = &bundle.forget[..4];
        let by_hand: f64 = batch
            .iter()
            .map(|p| lm::seq_log_prob(&cfg, &params, &p.prompt, &p.completion).unwrap())
            .sum::<f64>()
            / 4.0;
        let loss = loss_ga(&cfg, &params, batch).unwrap();
        assert!((loss - by_hand).abs() < 1e-12);
        assert!(loss <= 0.0);
    }

    #[test]
    fn graddiff_reduces_to_ga_at_zero_weight() {
        let (cfg, _tok, bundle, _) = tiny_world();
        let params = lm::init(&cfg).unwrap();
        let f = &bundle.forget[..3];
        let r = &bundle.retain[..3];
        let ga = loss_ga(&cfg, &params, f).unwrap();
        let gd = loss_graddiff(&cfg, &params, f, r, 0.0).unwrap();
        assert_eq!(ga, gd);
        // arithmetic composition: ga + lambda * retain NLL
        let nll = mean_nll(&cfg, &params, r).unwrap();
        let gd1 = loss_graddiff(&cfg, &params, f, r, 1.0).unwrap();
        assert!((gd1 - (ga + nll)).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_oracle_two_tokens() {
        // ref (0.75, 0.25) vs cur (0.5, 0.5):
        // KL = 0.75 ln 1.5 + 0.25 ln 0.5 = 0.13081...
        let ref_lp = [0.75f64.ln(), 0.25f64.ln()];
        let cur_lp = [0.5f64.ln(), 0.5f64.ln()];
        let kl = kl_divergence_rows(&ref_lp, &cur_lp, 2);
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.130812035941137).abs() < 1e-12);
    }

    #[test]
    fn klmin_is_zero_kl_against_itself_and_reduces_to_ga() {
        let (cfg, _tok, bundle, _) = tiny_world();
        let params = lm::init(&cfg).unwrap();
        let f = &bundle.forget[..2];
        let r = &bundle.retain[..2];
        let ga = loss_ga(&cfg, &params, f).unwrap();
        let kl_same = loss_klmin(&cfg, &params, &params, f, r, 1.0, true).unwrap();
        assert!((kl_same - ga).abs() < 1e-12, "identical models have zero KL");
        let kl_zero_weight = loss_klmin(&cfg, &params, &params, f, r, 0.0, true).unwrap();
        assert_eq!(kl_zero_weight, ga);
    }

    #[test]
    fn kl_term_is_nonnegative_for_distinct_models() {
        let (cfg, _tok, bundle, _) = tiny_world();
        let params = lm::init(&cfg).unwrap();
        let mut other_cfg = cfg;
        other_cfg.seed = 77;
        let other = lm::init(&other_cfg).unwrap();
        let f = &bundle.forget[..2];
        let r = &bundle.retain[..2];
        let ga = loss_ga(&cfg, &params, f).unwrap();
        for reference_first in [true, false] {
            let loss =
                loss_klmin(&cfg, &params, &other, f, r, 1.0, reference_first).unwrap();
            assert!(loss >= ga, "KL term must be nonnegative");
        }
    }

    #[test]
    fn npo_closed_forms() {
        let (cfg, _tok, bundle, _) = tiny_world();
        let params = lm::init(&cfg).unwrap();
        let batch = &bundle.forget[..3];
        // identical models: (2/beta) ln 2 per example
        for beta in [0.1, 1.0] {
            let loss = loss_npo(&cfg, &params, &params, batch, beta).unwrap();
            assert!((loss - (2.0 / beta) * 2f64.ln()).abs() < 1e-12);
        }
        // beta = 1, log-ratio exactly -1: 2 ln(1 + e^-1)
        let z: f64 = -1.0;
        let expect = 2.0 * (1.0 + z.exp()).ln();
        assert!((expect - 0.6265233750364456).abs() < 1e-12);
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let (cfg, _tok, _bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let mut tcfg = TrainConfig::finetune_defaults(3);
        tcfg.epochs = 0;
        let ck = finetune(&init, &cfg, &sets.finetune, &tcfg).unwrap();
        assert_eq!(ck.epoch, 0);
        assert_eq!(ck.params.values(), init.values());
    }

    #[test]
    fn finetune_is_deterministic() {
        let (cfg, _tok, _bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let mut tcfg = TrainConfig::finetune_defaults(3);
        tcfg.epochs = 2;
        let a = finetune(&init, &cfg, &sets.finetune, &tcfg).unwrap();
        let b = finetune(&init, &cfg, &sets.finetune, &tcfg).unwrap();
        assert_eq!(a.params.values(), b.params.values());
        assert_eq!(a.content_id(), b.content_id());
    }

    #[test]
    fn finetune_decreases_nll() {
        let (cfg, _tok, _bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let mut tcfg = TrainConfig::finetune_defaults(3);
        tcfg.epochs = 5;
        let before = mean_nll(&cfg, &init, &sets.finetune).unwrap();
        let ck = finetune(&init, &cfg, &sets.finetune, &tcfg).unwrap();
        let after = mean_nll(&cfg, &ck.params, &sets.finetune).unwrap();
        assert!(after < before, "before={before} after={after}");
    }

    #[test]
    fn run_unlearning_zero_epochs_gives_empty_history() {
        let (cfg, tok, bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let ck = Checkpoint {
            params: init,
            model_config: cfg,
            train_config: TrainConfig::finetune_defaults(3),
            epoch: 0,
            provenance: "test".into(),
            lineage: None,
        };
        let mut ucfg = TrainConfig::unlearn_defaults(Method::Ga, 3e-3, 3);
        ucfg.epochs = 0;
        let history = run_unlearning(&ck, &bundle, &sets.unlearn, &tok, &ucfg).unwrap();
        assert!(history.epochs.is_empty());
        assert!(history.aborted.is_none());
    }

    #[test]
    fn run_unlearning_is_bit_deterministic() {
        let (cfg, tok, bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let ck = Checkpoint {
            params: init,
            model_config: cfg,
            train_config: TrainConfig::finetune_defaults(3),
            epoch: 0,
            provenance: "test".into(),
            lineage: None,
        };
        let mut ucfg = TrainConfig::unlearn_defaults(Method::Ga, 3e-3, 11);
        ucfg.epochs = 2;
        let h1 = run_unlearning(&ck, &bundle, &sets.unlearn, &tok, &ucfg).unwrap();
        let h2 = run_unlearning(&ck, &bundle, &sets.unlearn, &tok, &ucfg).unwrap();
        assert_eq!(h1.epochs.len(), h2.epochs.len());
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.checkpoint.params.values(), b.checkpoint.params.values());
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
            assert_eq!(a.forget_rouge.to_bits(), b.forget_rouge.to_bits());
        }
    }

    #[test]
    fn ga_log_prob_non_increasing_at_small_eta() {
        let (cfg, tok, bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let mut ft = TrainConfig::finetune_defaults(3);
        ft.epochs = 30;
        let theta_ini = finetune(&init, &cfg, &sets.finetune, &ft).unwrap();
        let mut ucfg = TrainConfig::unlearn_defaults(Method::Ga, ft.learning_rate, 3);
        ucfg.epochs = 3;
        ucfg.learning_rate = 1e-4;
        let mut prev = loss_ga(&cfg, &theta_ini.params, &sets.unlearn).unwrap();
        let history = run_unlearning(&theta_ini, &bundle, &sets.unlearn, &tok, &ucfg).unwrap();
        for rec in &history.epochs {
            let cur = loss_ga(&cfg, &rec.checkpoint.params, &sets.unlearn).unwrap();
            assert!(
                cur <= prev + 1e-9,
                "epoch {}: mean log-prob rose from {prev} to {cur}",
                rec.epoch
            );
            prev = cur;
        }
    }

    #[test]
    fn every_method_passes_the_descent_check() {
        let (cfg, _tok, bundle, sets) = tiny_world();
        let init = lm::init(&cfg).unwrap();
        let mut ft = TrainConfig::finetune_defaults(3);
        ft.epochs = 20;
        let theta_ini = finetune(&init, &cfg, &sets.finetune, &ft).unwrap();
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for method in [Method::Ga, Method::GradDiff, Method::KlMin, Method::Npo] {
            let mut tcfg = TrainConfig::unlearn_defaults(method, ft.learning_rate, 3);
            tcfg.learning_rate = 0.05;
            for _ in 0..10 {
                let forget: Vec<EncodedPair> = sets
                    .unlearn
                    .choose_multiple(&mut rng, 4)
                    .cloned()
                    .collect();
                let retain: Vec<EncodedPair> =
                    bundle.retain.choose_multiple(&mut rng, 4).cloned().collect();
                descent_check(
                    &cfg,
                    &theta_ini.params,
                    &theta_ini.params,
                    &forget,
                    &retain,
                    &tcfg,
                    40,
                )
                .unwrap_or_else(|e| panic!("{method}: {e}"));
            }
        }
    }
}
