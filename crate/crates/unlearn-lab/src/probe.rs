//! Gradient-space instrumentation: per-example gradient cosine
//! similarity between paired target/related knowledge, the projection
//! decomposition of the update vector onto a gradient direction, and the
//! paired-vs-mismatched similarity experiment with a permutation test.
//!
//! Gradients are taken at whatever checkpoint the caller anchors on; the
//! principled anchor is the fine-tuned, pre-unlearning model, because
//! once forgetting completes its gradients no longer represent how the
//! knowledge was stored and the projection relationship degrades. That
//! degradation is itself measurable through the degenerate-gradient
//! counts reported here.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeRecord, QAPair, Tokenizer};
use crate::error::{LabError, Result};
use crate::lm::{grad_log_prob, ModelConfig, ParamVector};
use crate::numcore::{dot, norm};
use crate::uipe::UpdateVector;

/// Gradient norms below this are treated as degenerate (a saturated or
/// empty example) and excluded from similarity statistics.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine similarity of two raw vectors; the unit-test seam the model
/// level functions reduce to.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    let min = DEGENERATE_NORM;
    if na < min || nb < min {
        return Err(LabError::DegenerateGradient {
            norm: na.min(nb),
            min,
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradient cosine similarity of two QA pairs at the given parameters.
///
/// Computed on gradients of log P. Cosine is invariant to positive
/// per-vector scaling and grad log P = (1/P) grad P with P > 0, so this
/// equals the cosine of raw probability gradients exactly; the raw
/// gradient is never materialized.
pub fn grad_similarity(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokenizer: &Tokenizer,
    k: &QAPair,
    k_related: &QAPair,
) -> Result<f64> {
    let g1 = pair_gradient(cfg, params, tokenizer, k)?;
    let g2 = pair_gradient(cfg, params, tokenizer, k_related)?;
    cosine(&g1, &g2)
}

fn pair_gradient(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokenizer: &Tokenizer,
    pair: &QAPair,
) -> Result<Vec<f64>> {
    let x = tokenizer.encode_prompt(&pair.question);
    let y = tokenizer.encode_completion(&pair.answer);
    Ok(grad_log_prob(cfg, params, &x, &y)?.values().to_vec())
}

/// Aggregate paired-similarity statistics over a record set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean cosine over matched (k1, k2) partners.
    pub paired_mean: f64,
    /// Mean cosine over one seeded mismatched assignment.
    pub shuffled_mean: f64,
    /// One-sided permutation p-value for paired_mean exceeding chance.
    pub permutation_p: f64,
    pub permutations: usize,
    /// Records excluded for degenerate gradients on either side.
    pub excluded: usize,
    pub per_pair: Vec<(String, f64)>,
}

/// Compare gradient similarity of true (k1, k2) partners against
/// mismatched pairings. The permutation test shuffles the partner
/// assignment `permutations` times and reports the fraction of shuffles
/// whose mean similarity reaches the paired mean.
pub fn paired_similarity_experiment(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokenizer: &Tokenizer,
    records: &[KnowledgeRecord],
    seed: u64,
) -> Result<SimilarityReport> {
    paired_similarity_experiment_with(cfg, params, tokenizer, records, seed, 1000)
}

pub fn paired_similarity_experiment_with(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokenizer: &Tokenizer,
    records: &[KnowledgeRecord],
    seed: u64,
    permutations: usize,
) -> Result<SimilarityReport> {
    if records.len() < 20 {
        return Err(LabError::Config(format!(
            "paired similarity experiment needs >= 20 records, got {}",
            records.len()
        )));
    }
    if permutations < 1 {
        return Err(LabError::Config("need at least one permutation".into()));
    }

    // normalized gradients for both sides, record order
    let grads: Vec<Result<(Option<Vec<f64>>, Option<Vec<f64>>)>> = records
        .par_iter()
        .map(|r| {
            let g1 = pair_gradient(cfg, params, tokenizer, &r.k1)?;
            let g2 = pair_gradient(cfg, params, tokenizer, &r.k2)?;
            Ok((normalize(g1), normalize(g2)))
        })
        .collect();

    let mut kept_ids: Vec<String> = Vec::new();
    let mut u1: Vec<Vec<f64>> = Vec::new();
    let mut u2: Vec<Vec<f64>> = Vec::new();
    let mut excluded = 0usize;
    for (i, entry) in grads.into_iter().enumerate() {
        match entry? {
            (Some(a), Some(b)) => {
                kept_ids.push(records[i].id(i));
                u1.push(a);
                u2.push(b);
            }
            _ => excluded += 1,
        }
    }
    let n = u1.len();
    if n < 2 {
        return Err(LabError::DegenerateGradient {
            norm: 0.0,
            min: DEGENERATE_NORM,
        });
    }

    // full cross-similarity matrix: row i = k1 of record i vs every k2
    let sim: Vec<Vec<f64>> = u1
        .par_iter()
        .map(|a| u2.iter().map(|b| dot(a, b)).collect())
        .collect();

    let per_pair: Vec<(String, f64)> = kept_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), sim[i][i]))
        .collect();
    let paired_mean = per_pair.iter().map(|(_, r)| r).sum::<f64>() / n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<usize> = (0..n).collect();
    // one mismatched assignment for the headline shuffled_mean: rotate so
    // no record keeps its own partner
    let shuffled_mean = (0..n).map(|i| sim[i][(i + 1) % n]).sum::<f64>() / n as f64;

    let mut at_least = 0usize;
    for _ in 0..permutations {
        assignment.shuffle(&mut rng);
        let mean = (0..n).map(|i| sim[i][assignment[i]]).sum::<f64>() / n as f64;
        if mean >= paired_mean {
            at_least += 1;
        }
    }
    let permutation_p = (at_least + 1) as f64 / (permutations + 1) as f64;

    Ok(SimilarityReport {
        paired_mean,
        shuffled_mean,
        permutation_p,
        permutations,
        excluded,
        per_pair,
    })
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    if n < DEGENERATE_NORM {
        return None;
    }
    for x in &mut v {
        *x /= n;
    }
    Some(v)
}

/// The component of an update vector along one gradient direction.
#[derive(Debug, Clone)]
pub struct Projection {
    /// The projection itself: `(v . u) u` for the unit direction `u`.
    pub component: Vec<f64>,
    /// Signed length `v . u` = |v| cos(v, g).
    pub magnitude: f64,
    /// Norm of `v - component`.
    pub residual_norm: f64,
}

/// Project raw vector `v` onto direction `g`; the unit-test seam.
///
/// Two algebraically identical routes are evaluated — `(v . u) u` and
/// `|v| cos(v, g) u` — and must agree to 1e-10 relative; a mismatch means
/// the arithmetic itself regressed, and is reported as a numeric error.
pub fn project_raw(v: &[f64], g: &[f64]) -> Result<Projection> {
    if v.len() != g.len() {
        return Err(LabError::ShapeMismatch {
            op: "project",
            left: vec![v.len()],
            right: vec![g.len()],
        });
    }
    let g_norm = norm(g);
    if g_norm < DEGENERATE_NORM {
        return Err(LabError::DegenerateGradient {
            norm: g_norm,
            min: DEGENERATE_NORM,
        });
    }
    let unit: Vec<f64> = g.iter().map(|x| x / g_norm).collect();
    let magnitude = dot(v, &unit);

    // second route: |v| * cos(v, g)
    let v_norm = norm(v);
    let alt_magnitude = if v_norm < DEGENERATE_NORM {
        0.0
    } else {
        v_norm * (dot(v, g) / (v_norm * g_norm))
    };
    let scale = magnitude.abs().max(alt_magnitude.abs()).max(1e-300);
    if (magnitude - alt_magnitude).abs() / scale > 1e-10 {
        return Err(LabError::NonFinite { op: "project" });
    }

    let component: Vec<f64> = unit.iter().map(|u| magnitude * u).collect();
    let residual: Vec<f64> = v.iter().zip(&component).map(|(a, b)| a - b).collect();
    Ok(Projection {
        component,
        magnitude,
        residual_norm: norm(&residual),
    })
}

/// Project the update vector onto the gradient direction of a related QA
/// pair, with the gradient taken at `params`.
pub fn project(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokenizer: &Tokenizer,
    v: &UpdateVector,
    k_related: &QAPair,
) -> Result<Projection> {
    let g = pair_gradient(cfg, params, tokenizer, k_related)?;
    project_raw(&v.values, &g)
}

/// Witness that amplifying the update vector scales its projection by the
/// same factor.
#[derive(Debug, Clone, Copy)]
pub struct ScalingWitness {
    pub base_magnitude: f64,
    pub amplified_magnitude: f64,
    pub passed: bool,
}

/// Check that `project((1 + alpha) v)` has magnitude `(1 + alpha)` times
/// the base projection, to 1e-12 relative.
pub fn projection_scaling_check(
    cfg: &ModelConfig,
    params: &ParamVector,
    tokenizer: &Tokenizer,
    v: &UpdateVector,
    k_related: &QAPair,
    alpha: f64,
) -> Result<ScalingWitness> {
    let g = pair_gradient(cfg, params, tokenizer, k_related)?;
    projection_scaling_check_raw(&v.values, &g, alpha)
}

pub fn projection_scaling_check_raw(v: &[f64], g: &[f64], alpha: f64) -> Result<ScalingWitness> {
    let base = project_raw(v, g)?;
    let amplified_v: Vec<f64> = v.iter().map(|x| (1.0 + alpha) * x).collect();
    let amplified = project_raw(&amplified_v, g)?;
    let expect = (1.0 + alpha) * base.magnitude;
    let scale = expect.abs().max(amplified.magnitude.abs()).max(1e-300);
    let passed = (amplified.magnitude - expect).abs() / scale < 1e-12;
    Ok(ScalingWitness {
        base_magnitude: base.magnitude,
        amplified_magnitude: amplified.magnitude,
        passed,
    })
}

/// Write the similarity report as JSON plus a per-pair CSV
/// (`record_id,cosine`).
pub fn write_similarity_report(
    report: &SimilarityReport,
    json_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    let file = File::create(json_path).map_err(|e| LabError::io(json_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)?;
    let file = File::create(csv_path).map_err(|e| LabError::io(csv_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "record_id,cosine").map_err(|e| LabError::io(csv_path, e))?;
    for (id, r) in &report.per_pair {
        writeln!(w, "{id},{r}").map_err(|e| LabError::io(csv_path, e))?;
    }
    w.flush().map_err(|e| LabError::io(csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::lm;

    #[test]
    fn cosine_hand_cases() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(LabError::DegenerateGradient { .. })
        ));
    }

    #[test]
    fn self_similarity_is_one() {
        let records = corpus::generate(2, 3).unwrap();
        let utility = corpus::generate_utility(10, 3).unwrap();
        let tok = corpus::build_tokenizer(&records, &utility);
        let cfg = ModelConfig::new(tok.vocab_size(), 8, 48, 1);
        let params = lm::init(&cfg).unwrap();
        let r = grad_similarity(&cfg, &params, &tok, &records[0].k1, &records[0].k1).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let symm_ab = grad_similarity(&cfg, &params, &tok, &records[0].k1, &records[0].k2).unwrap();
        let symm_ba = grad_similarity(&cfg, &params, &tok, &records[0].k2, &records[0].k1).unwrap();
        assert_eq!(symm_ab.to_bits(), symm_ba.to_bits());
        assert!((-1.0..=1.0).contains(&symm_ab));
    }

    #[test]
    fn projection_hand_case() {
        // v = [3,4] onto g = [1,0]: component [3,0], magnitude 3, residual 4
        let p = project_raw(&[3.0, 4.0], &[1.0, 0.0]).unwrap();
        assert_eq!(p.component, vec![3.0, 0.0]);
        assert_eq!(p.magnitude, 3.0);
        assert!((p.residual_norm - 4.0).abs() < 1e-12);
    }

    #[test]
    fn projection_orthogonal_and_parallel() {
        let p = project_raw(&[0.0, 5.0], &[2.0, 0.0]).unwrap();
        assert!(p.magnitude.abs() < 1e-12);
        assert!((p.residual_norm - 5.0).abs() < 1e-12);

        let q = project_raw(&[4.0, 6.0], &[2.0, 3.0]).unwrap();
        assert!(q.residual_norm < 1e-10);
    }

    #[test]
    fn projection_is_idempotent_and_pythagorean() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = project_raw(&v, &g).unwrap();
            let pp = project_raw(&p.component, &g).unwrap();
            for (a, b) in p.component.iter().zip(&pp.component) {
                assert!((a - b).abs() < 1e-12);
            }
            let lhs = p.magnitude * p.magnitude + p.residual_norm * p.residual_norm;
            let rhs = dot(&v, &v);
            assert!((lhs - rhs).abs() / rhs.abs().max(1e-12) < 1e-9);
        }
    }

    #[test]
    fn scaling_check_arithmetic() {
        let v = [3.0, 4.0, -1.0];
        let g = [0.5, -2.0, 1.5];
        for alpha in [0.0, 0.5, 1.0, 4.0] {
            let w = projection_scaling_check_raw(&v, &g, alpha).unwrap();
            assert!(w.passed, "alpha={alpha}");
            assert!(
                (w.amplified_magnitude - (1.0 + alpha) * w.base_magnitude).abs()
                    < 1e-12 * w.base_magnitude.abs().max(1.0)
            );
        }
    }

    #[test]
    fn forced_identical_partners_give_paired_mean_one() {
        let mut records = corpus::generate(3, 5).unwrap();
        for r in &mut records {
            r.k2 = r.k1.clone(); // degenerate design: partner is a copy
        }
        let utility = corpus::generate_utility(10, 5).unwrap();
        let tok = corpus::build_tokenizer(&records, &utility);
        let cfg = ModelConfig::new(tok.vocab_size(), 8, 48, 2);
        let params = lm::init(&cfg).unwrap();
        let report =
            paired_similarity_experiment_with(&cfg, &params, &tok, &records, 7, 50).unwrap();
        assert!((report.paired_mean - 1.0).abs() < 1e-10);
        assert_eq!(report.excluded, 0);
    }

    #[test]
    fn similarity_report_is_deterministic() {
        let records = corpus::generate(2, 5).unwrap();
        let utility = corpus::generate_utility(10, 5).unwrap();
        let tok = corpus::build_tokenizer(&records, &utility);
        let cfg = ModelConfig::new(tok.vocab_size(), 8, 48, 2);
        let params = lm::init(&cfg).unwrap();
        let a = paired_similarity_experiment_with(&cfg, &params, &tok, &records, 9, 100).unwrap();
        let b = paired_similarity_experiment_with(&cfg, &params, &tok, &records, 9, 100).unwrap();
        assert_eq!(a.paired_mean.to_bits(), b.paired_mean.to_bits());
        assert_eq!(a.permutation_p, b.permutation_p);
        assert_eq!(a.shuffled_mean.to_bits(), b.shuffled_mean.to_bits());
    }
}
