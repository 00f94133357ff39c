//! Tiny decoder-only autoregressive language model.
//!
//! One attention block, one head, no layer norm, tanh MLP, untied output
//! head. The model exposes the conditional log-probability of an answer
//! given a question, its exact parameter gradient, and greedy decoding.
//! Parameters live in a canonical flat ordering ([`Manifest`]) so
//! checkpoints subtract and extrapolate as plain vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numcore::{self, Tape, Tensor, TensorId};

/// Attention mask fill for disallowed (future) positions.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, context_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            context_len,
            n_blocks: 1,
            n_heads: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(LabError::Config(format!(
                "vocab_size {} too small: must hold BOS/SEP/EOS/PAD/UNK plus content",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.context_len < 2 {
            return Err(LabError::Config(format!(
                "degenerate model dims d_model={} context_len={}",
                self.d_model, self.context_len
            )));
        }
        if self.n_blocks != 1 || self.n_heads != 1 {
            return Err(LabError::Config(format!(
                "architecture is fixed to 1 block / 1 head, got {}/{}",
                self.n_blocks, self.n_heads
            )));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        4 * self.d_model
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 5,
            d_model: 64,
            context_len: 64,
            n_blocks: 1,
            n_heads: 1,
            seed: 0,
        }
    }
}

/// One named contiguous slice of the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered parameter layout; a pure function of [`ModelConfig`], so two
/// models with equal configs always agree on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    segments: Vec<Segment>,
    total: usize,
}

impl Manifest {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let (v, d, h) = (cfg.vocab_size, cfg.d_model, cfg.hidden());
        let shapes: [(&'static str, Vec<usize>); 10] = [
            ("wte", vec![v, d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("w1", vec![d, h]),
            ("b1", vec![h]),
            ("w2", vec![h, d]),
            ("b2", vec![d]),
            ("w_out", vec![d, v]),
        ];
        let mut segments = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            segments.push(Segment {
                name,
                offset,
                shape,
            });
            offset += len;
        }
        Manifest {
            segments,
            total: offset,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat f64 array of every model parameter plus its layout manifest.
/// Immutable in normal use; optimizers go through `values_mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    manifest: Manifest,
}

impl ParamVector {
    pub fn new(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        if values.len() != manifest.total() {
            return Err(LabError::Config(format!(
                "parameter payload of {} values does not match manifest total {}",
                values.len(),
                manifest.total()
            )));
        }
        Ok(ParamVector { values, manifest })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let seg = self.manifest.segment(name)?;
        Some(&self.values[seg.offset..seg.offset + seg.len()])
    }

    /// Split into per-segment tensors, manifest order.
    pub fn unflatten(&self) -> Vec<(&'static str, Tensor)> {
        self.manifest
            .segments
            .iter()
            .map(|seg| {
                let data = self.values[seg.offset..seg.offset + seg.len()].to_vec();
                (
                    seg.name,
                    Tensor {
                        shape: seg.shape.clone(),
                        data,
                        grad: None,
                    },
                )
            })
            .collect()
    }

    /// Rebuild from per-segment tensors. Round-trips [`unflatten`]
    /// bit-exactly.
    pub fn flatten(manifest: Manifest, parts: &[(&'static str, Tensor)]) -> Result<Self> {
        let mut values = vec![0.0; manifest.total()];
        for (seg, (name, tensor)) in manifest.segments.iter().zip(parts) {
            if seg.name != *name || seg.shape != tensor.shape {
                return Err(LabError::Config(format!(
                    "segment {} does not match manifest entry {}",
                    name, seg.name
                )));
            }
            values[seg.offset..seg.offset + seg.len()].copy_from_slice(&tensor.data);
        }
        ParamVector::new(manifest, values)
    }
}

/// Flat per-example gradient, same layout as its paired [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        GradientVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        numcore::norm(&self.values)
    }
}

/// Deterministic scaled-uniform initialization: weights from
/// U(-1/sqrt(d_model), 1/sqrt(d_model)), biases zero, segments filled in
/// manifest order from a ChaCha stream seeded by the config.
pub fn init(cfg: &ModelConfig) -> Result<ParamVector> {
    cfg.validate()?;
    let manifest = Manifest::for_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let mut values = vec![0.0; manifest.total()];
    for seg in manifest.segments() {
        let slice = &mut values[seg.offset..seg.offset + seg.len()];
        if seg.name.starts_with('b') {
            continue; // biases start at zero
        }
        for v in slice {
            *v = rng.gen_range(-scale..scale);
        }
    }
    ParamVector::new(manifest, values)
}

pub(crate) struct LmGraph {
    pub tape: Tape,
    /// Parameter leaves in manifest order.
    pub leaves: Vec<TensorId>,
    /// Logits at the requested rows, shape `[rows.len(), vocab]`.
    pub logits: TensorId,
}

/// Record the full forward pass on a fresh tape and return logits at the
/// selected sequence positions. The output projection is applied only at
/// those rows, which is what keeps training and decoding cheap.
pub(crate) fn build_logits_graph(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokens: &[usize],
    rows: &[usize],
) -> Result<LmGraph> {
    let t = tokens.len();
    if t == 0 {
        return Err(LabError::Config("empty token sequence".into()));
    }
    if t > cfg.context_len {
        return Err(LabError::SequenceTooLong {
            len: t,
            context: cfg.context_len,
        });
    }
    let d = cfg.d_model;
    let mut tape = Tape::new();

    let mut leaves = Vec::with_capacity(params.manifest().segments().len());
    for seg in params.manifest().segments() {
        let data = params.values()[seg.offset..seg.offset + seg.len()].to_vec();
        leaves.push(tape.leaf(&seg.shape, data)?);
    }
    let [wte, wq, wk, wv, wo, w1, b1, w2, b2, w_out]: [TensorId; 10] =
        leaves.clone().try_into().expect("manifest has 10 segments");

    let x = tape.gather_rows(wte, tokens)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;

    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask[i * t + j] = MASK_NEG;
        }
    }
    let mask_leaf = tape.leaf(&[t, t], mask)?;
    let masked = tape.add(scaled, mask_leaf)?;
    let attn = tape.row_softmax(masked)?;
    let ctx = tape.matmul(attn, v)?;
    let proj = tape.matmul(ctx, wo)?;
    let h = tape.add(x, proj)?;

    let m1 = tape.matmul(h, w1)?;
    let m1b = tape.add_bias(m1, b1)?;
    let a1 = tape.tanh(m1b)?;
    let m2 = tape.matmul(a1, w2)?;
    let m2b = tape.add_bias(m2, b2)?;
    let out = tape.add(h, m2b)?;

    let picked = tape.gather_rows(out, rows)?;
    let logits = tape.matmul(picked, w_out)?;
    Ok(LmGraph {
        tape,
        leaves,
        logits,
    })
}

/// The sequence positions whose logits predict the answer tokens: the
/// question's last position through the second-to-last position overall.
fn answer_rows(x_len: usize, y_len: usize) -> Vec<usize> {
    (x_len - 1..x_len - 1 + y_len).collect()
}

pub(crate) struct LogProbGraph {
    pub tape: Tape,
    pub leaves: Vec<TensorId>,
    /// Scalar node holding `log P(y|x)`.
    pub logp: TensorId,
}

/// Forward pass plus the summed answer-token log-probability as a scalar
/// node, ready for further composition (NPO, KL terms) before backward.
/// `y` must be non-empty; callers handle the empty case directly.
pub(crate) fn build_logp_graph(
    cfg: &ModelConfig,
    params: &ParamVector,
    x: &[usize],
    y: &[usize],
) -> Result<LogProbGraph> {
    assert!(!y.is_empty(), "build_logp_graph requires non-empty y");
    let tokens: Vec<usize> = x.iter().chain(y).copied().collect();
    let rows = answer_rows(x.len(), y.len());
    let mut graph = build_logits_graph(cfg, params, &tokens, &rows)?;
    let (ce, _) = graph.tape.cross_entropy(graph.logits, y)?;
    // mean cross entropy over |y| rows -> negated sum of log-probs
    let logp = graph.tape.scale(ce, -(y.len() as f64))?;
    Ok(LogProbGraph {
        tape: graph.tape,
        leaves: graph.leaves,
        logp,
    })
}

/// Sum over answer positions of `log P(next token | prefix)`, conditioning
/// on the full question prefix. Question tokens contribute context but no
/// loss. Always <= 0; empty `y` gives exactly 0.
pub fn seq_log_prob(
    cfg: &ModelConfig,
    params: &ParamVector,
    x: &[usize],
    y: &[usize],
) -> Result<f64> {
    if y.is_empty() {
        let total = x.len();
        if total > cfg.context_len {
            return Err(LabError::SequenceTooLong {
                len: total,
                context: cfg.context_len,
            });
        }
        return Ok(0.0);
    }
    let graph = build_logp_graph(cfg, params, x, y)?;
    Ok(graph.tape.value(graph.logp)[0])
}

/// Exact gradient of [`seq_log_prob`] with respect to every parameter,
/// flattened in manifest order.
///
/// The raw probability gradient is never materialized: this returns
/// grad log P = (1/P) grad P, which differs from grad P only by the
/// positive per-example scalar 1/P. Cosine similarities computed on these
/// log-gradients therefore equal cosines on raw probability gradients
/// exactly, and the log form is the numerically stable one.
pub fn grad_log_prob(
    cfg: &ModelConfig,
    params: &ParamVector,
    x: &[usize],
    y: &[usize],
) -> Result<GradientVector> {
    if y.is_empty() {
        return Ok(GradientVector::zeros(params.len()));
    }
    let mut graph = build_logp_graph(cfg, params, x, y)?;
    graph.tape.backward(graph.logp)?;
    Ok(collect_leaf_grads(
        &graph.tape,
        &graph.leaves,
        params.manifest(),
    ))
}

/// Copy per-segment leaf gradients into one flat vector, manifest order.
pub(crate) fn collect_leaf_grads(
    tape: &Tape,
    leaves: &[TensorId],
    manifest: &Manifest,
) -> GradientVector {
    let mut values = vec![0.0; manifest.total()];
    for (seg, &leaf) in manifest.segments().iter().zip(leaves) {
        values[seg.offset..seg.offset + seg.len()].copy_from_slice(tape.grad(leaf));
    }
    GradientVector::from_values(values)
}

/// Greedy argmax decoding from the prompt until the stop token, the length
/// cap, or the context window is hit. Ties break toward the lowest token
/// id. The stop token is not included in the output.
pub fn greedy_decode(
    cfg: &ModelConfig,
    params: &ParamVector,
    x: &[usize],
    max_len: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if x.len() > cfg.context_len {
        return Err(LabError::SequenceTooLong {
            len: x.len(),
            context: cfg.context_len,
        });
    }
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let mut prefix = x.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && prefix.len() < cfg.context_len {
        let rows = [prefix.len() - 1];
        let graph = build_logits_graph(cfg, params, &prefix, &rows)?;
        let logits = graph.tape.value(graph.logits);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (tok, &v) in logits.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = tok;
            }
        }
        if stop == Some(best) {
            break;
        }
        out.push(best);
        prefix.push(best);
    }
    Ok(out)
}
