//! ROUGE-L scoring, split evaluation, and the figure-data report files.
//!
//! Forget quality is the forget-split mean ROUGE-L f1 (lower is better
//! once unlearning starts); model utility is the utility-split mean f1
//! (higher is better). Scoring is word-level over lowercased,
//! punctuation-stripped tokens, matching the corpus tokenizer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedPair, Tokenizer, EOS};
use crate::error::{LabError, Result};
use crate::lm::{greedy_decode, ModelConfig, ParamVector};
use crate::uipe::SweepRow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// ROUGE-L with a configurable f-measure beta (beta = 1 is the balanced
/// harmonic mean used everywhere in this crate).
pub fn rouge_l_with_beta<T: PartialEq>(
    reference: &[T],
    hypothesis: &[T],
    beta: f64,
) -> RougeScore {
    if reference.is_empty() || hypothesis.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_len(reference, hypothesis) as f64;
    let precision = lcs / hypothesis.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f1 = if precision == 0.0 || recall == 0.0 {
        0.0
    } else {
        let b2 = beta * beta;
        (1.0 + b2) * precision * recall / (b2 * precision + recall)
    };
    RougeScore {
        precision,
        recall,
        f1,
    }
}

/// LCS-based ROUGE-L: P = LCS/|hyp|, R = LCS/|ref|, f1 their harmonic
/// mean. Empty reference or hypothesis scores all zeros.
pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> RougeScore {
    rouge_l_with_beta(reference, hypothesis, 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub score: RougeScore,
    pub decoded: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: String,
    pub mean_f1: f64,
    pub per_example: Vec<ExampleScore>,
}

/// Greedy-decode every question in the split and score the decode against
/// the reference answer. Read-only in the parameters; per-example work
/// runs in parallel and is aggregated in dataset order.
pub fn eval_split(
    cfg: &ModelConfig,
    params: &ParamVector,
    pairs: &[EncodedPair],
    tokenizer: &Tokenizer,
    split: &str,
) -> Result<SplitEvaluation> {
    if pairs.is_empty() {
        return Err(LabError::Config(format!("split {split:?} is empty")));
    }
    let max_len = pairs.iter().map(|p| p.completion.len()).max().unwrap_or(0) + 2;
    let per_example: Vec<ExampleScore> = pairs
        .par_iter()
        .map(|pair| -> Result<ExampleScore> {
            let decoded = greedy_decode(cfg, params, &pair.prompt, max_len, Some(EOS))?;
            let hyp = tokenizer.content_ids(&decoded);
            let reference = tokenizer.content_ids(&pair.completion);
            let score = rouge_l(&reference, &hyp);
            Ok(ExampleScore {
                id: pair.id.clone(),
                score,
                decoded: tokenizer.decode(&decoded),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_f1 =
        per_example.iter().map(|e| e.score.f1).sum::<f64>() / per_example.len() as f64;
    Ok(SplitEvaluation {
        split: split.to_string(),
        mean_f1,
        per_example,
    })
}

/// One epoch of an unlearning trajectory, as the report files consume it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub forget: f64,
    pub related: f64,
    pub utility: f64,
}

/// Before/after row for the extrapolation comparison file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeforeAfterRow {
    pub split: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Default)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
    pub notes: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| LabError::io(path, e))?,
    ))
}

/// Write the figure-data CSVs: per-epoch (utility, forget) and
/// (forget, related) series for each labeled trajectory, the alpha sweep
/// table, and the before/after extrapolation comparison. Rows are sorted
/// by epoch then alpha; files for absent inputs are skipped with a note.
pub fn experiment_report(
    dir: &Path,
    curves: &[(String, Vec<EpochPoint>)],
    sweep: Option<&[SweepRow]>,
    before_after: &[BeforeAfterRow],
) -> Result<ReportFiles> {
    if curves.is_empty() {
        return Err(LabError::Config("experiment_report needs at least one history".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut files = ReportFiles::default();

    let uf = dir.join("utility_forget_by_epoch.csv");
    {
        let mut w = create(&uf)?;
        writeln!(w, "label,epoch,utility_rouge,forget_rouge").map_err(|e| LabError::io(&uf, e))?;
        for (label, points) in curves {
            let mut sorted = points.clone();
            sorted.sort_by_key(|p| p.epoch);
            for p in sorted {
                writeln!(w, "{label},{},{},{}", p.epoch, p.utility, p.forget)
                    .map_err(|e| LabError::io(&uf, e))?;
            }
        }
    }
    files.written.push(uf);

    let fr = dir.join("forget_related_by_epoch.csv");
    {
        let mut w = create(&fr)?;
        writeln!(w, "label,epoch,forget_rouge,related_rouge").map_err(|e| LabError::io(&fr, e))?;
        for (label, points) in curves {
            let mut sorted = points.clone();
            sorted.sort_by_key(|p| p.epoch);
            for p in sorted {
                writeln!(w, "{label},{},{},{}", p.epoch, p.forget, p.related)
                    .map_err(|e| LabError::io(&fr, e))?;
            }
        }
    }
    files.written.push(fr);

    match sweep {
        Some(rows) if !rows.is_empty() => {
            let path = dir.join("alpha_sweep.csv");
            crate::uipe::write_sweep_csv(&path, rows)?;
            files.written.push(path);
        }
        _ => files.notes.push("no sweep rows; alpha_sweep.csv omitted".into()),
    }

    if before_after.is_empty() {
        files
            .notes
            .push("no extrapolation points; uipe_before_after.csv omitted".into());
    } else {
        let path = dir.join("uipe_before_after.csv");
        let mut w = create(&path)?;
        writeln!(w, "split,before_rouge,after_rouge").map_err(|e| LabError::io(&path, e))?;
        for row in before_after {
            writeln!(w, "{},{},{}", row.split, row.before, row.after)
                .map_err(|e| LabError::io(&path, e))?;
        }
        files.written.push(path);
    }
    Ok(files)
}
