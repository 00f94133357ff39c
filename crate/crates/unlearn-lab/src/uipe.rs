//! Update-vector computation, linear parameter extrapolation, checkpoint
//! selection, and amplify-coefficient sweeps.
//!
//! The update vector is always the elementwise checkpoint difference
//! `theta_un - theta_ini`, regardless of the optimizer path that produced
//! it. Extrapolation amplifies that displacement: with coefficient
//! `alpha`, the result is `theta_un + alpha * v`, equivalently
//! `theta_ini + (1 + alpha) * v`. Chained extrapolations along the same
//! vector are resolved against the original base with the summed
//! coefficient, so composing them is exact in floating point.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::lm::ParamVector;
use crate::numcore;
use crate::unlearner::{Checkpoint, EpochRecord};

/// The net parameter displacement produced by unlearning.
#[derive(Debug, Clone)]
pub struct UpdateVector {
    pub values: Vec<f64>,
    pub source_ini: String,
    pub source_un: String,
}

impl UpdateVector {
    pub fn norm(&self) -> f64 {
        numcore::norm(&self.values)
    }
}

/// Extrapolation provenance kept on derived checkpoints: the payload the
/// chain started from and the cumulative coefficient applied to it.
#[derive(Debug, Clone)]
pub struct ExtrapolationLineage {
    pub base: ParamVector,
    pub base_id: String,
    pub source_ini: String,
    pub source_un: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct UipeConfig {
    /// Amplify coefficient; 0 is the identity configuration.
    pub alpha: f64,
    pub selection: SelectionRule,
}

impl Default for UipeConfig {
    fn default() -> Self {
        UipeConfig {
            alpha: 1.0,
            selection: SelectionRule::default(),
        }
    }
}

/// Default grid for amplify-coefficient sweeps.
pub const DEFAULT_ALPHA_GRID: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

/// Elementwise difference `theta_un - theta_ini` with source lineage.
pub fn update_vector(theta_ini: &Checkpoint, theta_un: &Checkpoint) -> Result<UpdateVector> {
    if theta_ini.model_config != theta_un.model_config
        || theta_ini.params.manifest() != theta_un.params.manifest()
    {
        return Err(LabError::Incompatible(format!(
            "checkpoint configs differ: {:?} vs {:?}",
            theta_ini.model_config, theta_un.model_config
        )));
    }
    let values: Vec<f64> = theta_un
        .params
        .values()
        .iter()
        .zip(theta_ini.params.values())
        .map(|(un, ini)| un - ini)
        .collect();
    Ok(UpdateVector {
        values,
        source_ini: theta_ini.content_id(),
        source_un: theta_un.content_id(),
    })
}

/// `theta_uipe = theta_un + alpha * v`. Requires `alpha >= 0` (the method
/// only amplifies; interpolating back toward the initial model has no
/// defined meaning here) and that `v` was computed against `theta_un` —
/// or against the base of an extrapolation chain `theta_un` belongs to,
/// in which case the coefficients are summed and applied to the original
/// base so that composed and single-shot extrapolation agree exactly.
pub fn extrapolate(theta_un: &Checkpoint, v: &UpdateVector, alpha: f64) -> Result<Checkpoint> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(LabError::Config(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    if v.values.len() != theta_un.params.len() {
        return Err(LabError::Incompatible(format!(
            "update vector of {} values vs checkpoint of {}",
            v.values.len(),
            theta_un.params.len()
        )));
    }

    let (base_params, base_id, alpha_total) = match &theta_un.lineage {
        Some(lineage) if lineage.source_ini == v.source_ini && lineage.source_un == v.source_un => {
            (lineage.base.clone(), lineage.base_id.clone(), lineage.alpha + alpha)
        }
        Some(lineage) => {
            return Err(LabError::Lineage(format!(
                "checkpoint extrapolated from vector ({}, {}) but given vector ({}, {})",
                lineage.source_ini, lineage.source_un, v.source_ini, v.source_un
            )));
        }
        None => {
            let id = theta_un.content_id();
            if id != v.source_un {
                return Err(LabError::Lineage(format!(
                    "update vector was computed against {}, not this checkpoint {}",
                    v.source_un, id
                )));
            }
            (theta_un.params.clone(), id, alpha)
        }
    };

    // alpha_total == 0 must reproduce the base payload byte-for-byte,
    // including negative zeros, so bypass the arithmetic.
    let values: Vec<f64> = if alpha_total == 0.0 {
        base_params.values().to_vec()
    } else {
        base_params
            .values()
            .iter()
            .zip(&v.values)
            .map(|(b, d)| b + alpha_total * d)
            .collect()
    };
    let params = ParamVector::new(theta_un.params.manifest().clone(), values)?;
    Ok(Checkpoint {
        params,
        model_config: theta_un.model_config,
        train_config: theta_un.train_config,
        epoch: theta_un.epoch,
        provenance: format!(
            "uipe alpha {alpha_total} over {base_id} (v: {} -> {})",
            v.source_ini, v.source_un
        ),
        lineage: Some(Box::new(ExtrapolationLineage {
            base: base_params,
            base_id,
            source_ini: v.source_ini.clone(),
            source_un: v.source_un.clone(),
            alpha: alpha_total,
        })),
    })
}

/// How the unlearned checkpoint is picked out of the per-epoch history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    /// Among epochs whose utility stayed within `max_drop` of the initial
    /// utility, pick the lowest forget score; ties go to the earliest
    /// epoch. If no epoch qualifies, fall back to the max-utility epoch.
    UtilityFloor { max_drop: f64 },
    /// Lowest forget score outright.
    LowestForget,
    /// A fixed epoch number (1-based, as recorded in the history).
    FixedEpoch(usize),
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::UtilityFloor { max_drop: 0.10 }
    }
}

/// Outcome of checkpoint selection; `fell_back` marks the case where no
/// epoch met the utility floor and the max-utility epoch was used.
pub struct Selection<'a> {
    pub record: &'a EpochRecord,
    pub fell_back: bool,
}

pub fn select_checkpoint<'a>(
    history: &'a [EpochRecord],
    initial_utility: f64,
    rule: SelectionRule,
) -> Result<Selection<'a>> {
    if history.is_empty() {
        return Err(LabError::EmptyHistory);
    }
    match rule {
        SelectionRule::UtilityFloor { max_drop } => {
            let floor = initial_utility - max_drop;
            let qualified = history
                .iter()
                .filter(|r| r.utility_rouge >= floor)
                .min_by(|a, b| {
                    a.forget_rouge
                        .total_cmp(&b.forget_rouge)
                        .then(a.epoch.cmp(&b.epoch))
                });
            match qualified {
                Some(record) => Ok(Selection {
                    record,
                    fell_back: false,
                }),
                None => {
                    let record = history
                        .iter()
                        .max_by(|a, b| {
                            a.utility_rouge
                                .total_cmp(&b.utility_rouge)
                                .then(b.epoch.cmp(&a.epoch))
                        })
                        .expect("non-empty");
                    Ok(Selection {
                        record,
                        fell_back: true,
                    })
                }
            }
        }
        SelectionRule::LowestForget => {
            let record = history
                .iter()
                .min_by(|a, b| {
                    a.forget_rouge
                        .total_cmp(&b.forget_rouge)
                        .then(a.epoch.cmp(&b.epoch))
                })
                .expect("non-empty");
            Ok(Selection {
                record,
                fell_back: false,
            })
        }
        SelectionRule::FixedEpoch(epoch) => {
            let record = history.iter().find(|r| r.epoch == epoch).ok_or_else(|| {
                LabError::Config(format!("history has no epoch {epoch}"))
            })?;
            Ok(Selection {
                record,
                fell_back: false,
            })
        }
    }
}

/// Mean ROUGE-L f1 per evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitScores {
    pub forget: f64,
    pub related: f64,
    pub utility: f64,
}

/// One row of the amplify-coefficient sweep: score deltas of the
/// extrapolated model against the unlearned base model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub forget_rouge_delta: f64,
    pub related_rouge_delta: f64,
    pub utility_rouge_delta: f64,
}

/// Evaluate the extrapolation at each coefficient and report score deltas
/// against `theta_un`. The `alpha = 0` row measures the *next unlearning
/// epoch* against `theta_un` when one exists (continuing training is the
/// natural zero-amplification comparison point) and is all zeros
/// otherwise.
pub fn alpha_sweep(
    theta_ini: &Checkpoint,
    theta_un: &Checkpoint,
    next_epoch: Option<&Checkpoint>,
    alphas: &[f64],
    eval: &(dyn Fn(&ParamVector) -> Result<SplitScores> + Sync),
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(LabError::Config("alpha grid is empty".into()));
    }
    let v = update_vector(theta_ini, theta_un)?;
    let base = eval(&theta_un.params)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let scores = if alpha == 0.0 {
            match next_epoch {
                Some(next) => Some(eval(&next.params)?),
                None => None,
            }
        } else {
            let theta_uipe = extrapolate(theta_un, &v, alpha)?;
            Some(eval(&theta_uipe.params)?)
        };
        let row = match scores {
            Some(s) => SweepRow {
                alpha,
                forget_rouge_delta: s.forget - base.forget,
                related_rouge_delta: s.related - base.related,
                utility_rouge_delta: s.utility - base.utility,
            },
            None => SweepRow {
                alpha,
                forget_rouge_delta: 0.0,
                related_rouge_delta: 0.0,
                utility_rouge_delta: 0.0,
            },
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    Ok(rows)
}

/// Sweep table as CSV with the fixed header
/// `alpha,forget_rouge_delta,related_rouge_delta,utility_rouge_delta`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "alpha,forget_rouge_delta,related_rouge_delta,utility_rouge_delta")
        .map_err(|e| LabError::io(path, e))?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.alpha, row.forget_rouge_delta, row.related_rouge_delta, row.utility_rouge_delta
        )
        .map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{self, ModelConfig};
    use crate::unlearner::{Method, TrainConfig};

    fn checkpoint_from(values: Vec<f64>, cfg: &ModelConfig) -> Checkpoint {
        let manifest = crate::lm::Manifest::for_config(cfg);
        assert_eq!(values.len(), manifest.total());
        Checkpoint {
            params: ParamVector::new(manifest, values).unwrap(),
            model_config: *cfg,
            train_config: TrainConfig::unlearn_defaults(Method::Ga, 1e-3, 0),
            epoch: 1,
            provenance: "test".into(),
            lineage: None,
        }
    }

    fn pair_of_checkpoints(seed_a: u64, seed_b: u64) -> (Checkpoint, Checkpoint, ModelConfig) {
        let cfg = ModelConfig::new(6, 2, 8, seed_a);
        let a = lm::init(&cfg).unwrap();
        let mut cfg_b = cfg;
        cfg_b.seed = seed_b;
        let b = lm::init(&cfg_b).unwrap();
        (
            checkpoint_from(a.values().to_vec(), &cfg),
            checkpoint_from(b.values().to_vec(), &cfg),
            cfg,
        )
    }

    #[test]
    fn update_vector_is_elementwise_difference() {
        let (ini, un, _) = pair_of_checkpoints(1, 2);
        let v = update_vector(&ini, &un).unwrap();
        for ((d, &u), &i) in v.values.iter().zip(un.params.values()).zip(ini.params.values()) {
            assert_eq!(*d, u - i);
        }
        let self_v = update_vector(&ini, &ini).unwrap();
        assert!(self_v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn update_vector_hand_case() {
        // ini [1,2], un [3,0] -> v [2,-2] on the leading elements
        let cfg = ModelConfig::new(6, 2, 8, 0);
        let total = crate::lm::Manifest::for_config(&cfg).total();
        let mut a = vec![0.0; total];
        let mut b = vec![0.0; total];
        (a[0], a[1]) = (1.0, 2.0);
        (b[0], b[1]) = (3.0, 0.0);
        let ini = checkpoint_from(a, &cfg);
        let un = checkpoint_from(b, &cfg);
        let v = update_vector(&ini, &un).unwrap();
        assert_eq!(&v.values[..2], &[2.0, -2.0]);

        // extrapolate by 0.5: [3,0] + 0.5 [2,-2] = [4,-1]
        let uipe = extrapolate(&un, &v, 0.5).unwrap();
        assert_eq!(&uipe.params.values()[..2], &[4.0, -1.0]);
    }

    #[test]
    fn mismatched_configs_error() {
        let cfg_a = ModelConfig::new(6, 2, 8, 1);
        let cfg_b = ModelConfig::new(6, 4, 8, 1);
        let a = lm::init(&cfg_a).unwrap();
        let b = lm::init(&cfg_b).unwrap();
        let ini = checkpoint_from(a.values().to_vec(), &cfg_a);
        let un = checkpoint_from(b.values().to_vec(), &cfg_b);
        assert!(matches!(
            update_vector(&ini, &un),
            Err(LabError::Incompatible(_))
        ));
    }

    #[test]
    fn alpha_zero_is_byte_identical() {
        let (ini, un, _) = pair_of_checkpoints(3, 4);
        let v = update_vector(&ini, &un).unwrap();
        let out = extrapolate(&un, &v, 0.0).unwrap();
        for (a, b) in out.params.values().iter().zip(un.params.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn negative_alpha_rejected() {
        let (ini, un, _) = pair_of_checkpoints(3, 4);
        let v = update_vector(&ini, &un).unwrap();
        assert!(extrapolate(&un, &v, -0.5).is_err());
    }

    #[test]
    fn lineage_mismatch_rejected() {
        let (ini, un, _) = pair_of_checkpoints(3, 4);
        let v = update_vector(&ini, &un).unwrap();
        // v was computed against `un`, not `ini`
        assert!(matches!(
            extrapolate(&ini, &v, 1.0),
            Err(LabError::Lineage(_))
        ));
    }

    #[test]
    fn composed_extrapolation_is_exact() {
        let (ini, un, _) = pair_of_checkpoints(5, 6);
        let v = update_vector(&ini, &un).unwrap();
        for (a1, a2) in [(0.25, 0.5), (1.0, 1.0), (0.3, 2.2), (0.0, 4.0)] {
            let single = extrapolate(&un, &v, a1 + a2).unwrap();
            let first = extrapolate(&un, &v, a1).unwrap();
            let composed = extrapolate(&first, &v, a2).unwrap();
            for (x, y) in composed.params.values().iter().zip(single.params.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "a1={a1} a2={a2}");
            }
        }
    }

    #[test]
    fn doubling_alpha_one_matches_linearity() {
        let (ini, un, _) = pair_of_checkpoints(7, 8);
        let v = update_vector(&ini, &un).unwrap();
        let out = extrapolate(&un, &v, 1.0).unwrap();
        for ((o, &u), &i) in out
            .params
            .values()
            .iter()
            .zip(un.params.values())
            .zip(ini.params.values())
        {
            let expect = u + (u - i);
            assert!((o - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
    }

    fn record(epoch: usize, forget: f64, utility: f64) -> EpochRecord {
        let cfg = ModelConfig::new(6, 2, 8, 0);
        let total = crate::lm::Manifest::for_config(&cfg).total();
        EpochRecord {
            epoch,
            checkpoint: checkpoint_from(vec![epoch as f64; total], &cfg),
            forget_rouge: forget,
            related_rouge: 0.0,
            utility_rouge: utility,
            mean_loss: 0.0,
        }
    }

    #[test]
    fn selection_applies_the_utility_floor() {
        // hand-applied rule: floor = 0.9 - 0.1 = 0.8; epoch 2 qualifies
        // with the lowest forget score
        let history = vec![record(1, 0.5, 0.9), record(2, 0.1, 0.85), record(3, 0.05, 0.3)];
        let sel = select_checkpoint(&history, 0.9, SelectionRule::default()).unwrap();
        assert_eq!(sel.record.epoch, 2);
        assert!(!sel.fell_back);
    }

    #[test]
    fn selection_falls_back_to_max_utility() {
        let history = vec![record(1, 0.5, 0.2), record(2, 0.1, 0.4)];
        let sel = select_checkpoint(&history, 0.9, SelectionRule::default()).unwrap();
        assert_eq!(sel.record.epoch, 2);
        assert!(sel.fell_back);
    }

    #[test]
    fn selection_single_epoch_and_ties() {
        let single = vec![record(4, 0.3, 0.9)];
        let sel = select_checkpoint(&single, 0.9, SelectionRule::default()).unwrap();
        assert_eq!(sel.record.epoch, 4);

        let tied = vec![record(1, 0.2, 0.9), record(2, 0.2, 0.9)];
        let sel = select_checkpoint(&tied, 0.9, SelectionRule::default()).unwrap();
        assert_eq!(sel.record.epoch, 1, "ties go to the earliest epoch");

        assert!(matches!(
            select_checkpoint(&[], 0.9, SelectionRule::default()),
            Err(LabError::EmptyHistory)
        ));
    }

    #[test]
    fn sweep_zero_alpha_without_next_epoch_is_zero_row() {
        let (ini, un, _) = pair_of_checkpoints(9, 10);
        let eval = |_: &ParamVector| {
            Ok(SplitScores {
                forget: 0.5,
                related: 0.5,
                utility: 0.5,
            })
        };
        let rows = alpha_sweep(&ini, &un, None, &[0.0], &eval).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].forget_rouge_delta, 0.0);
        assert_eq!(rows[0].related_rouge_delta, 0.0);
        assert_eq!(rows[0].utility_rouge_delta, 0.0);
    }

    #[test]
    fn sweep_rows_are_sorted_and_deterministic() {
        let (ini, un, _) = pair_of_checkpoints(11, 12);
        // score by parameter norm so different alphas give different rows
        let eval = |p: &ParamVector| {
            let n = crate::numcore::norm(p.values());
            Ok(SplitScores {
                forget: n,
                related: n * 0.5,
                utility: n * 0.25,
            })
        };
        let rows1 = alpha_sweep(&ini, &un, None, &[2.0, 0.5, 1.0], &eval).unwrap();
        let rows2 = alpha_sweep(&ini, &un, None, &[2.0, 0.5, 1.0], &eval).unwrap();
        let alphas: Vec<f64> = rows1.iter().map(|r| r.alpha).collect();
        assert_eq!(alphas, vec![0.5, 1.0, 2.0]);
        for (a, b) in rows1.iter().zip(&rows2) {
            assert_eq!(a.forget_rouge_delta.to_bits(), b.forget_rouge_delta.to_bits());
        }
    }
}
