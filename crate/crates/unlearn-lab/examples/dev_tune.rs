//! Scratch tuning harness (not part of the deliverable examples).

use std::time::Instant;

use unlearn_lab::cli::eval_all_splits;
use unlearn_lab::corpus::{self, Scenario};
use unlearn_lab::lm::{self, ModelConfig};
use unlearn_lab::unlearner::{self, Method, Optimizer, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ft_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let ft_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let un_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.5e-3);
    let un_epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(12);
    let d_model: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let scenario: Scenario = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(Scenario::P1);
    let optimizer = match args.get(7).map(String::as_str) {
        Some("adam") => Optimizer::Adam,
        _ => Optimizer::Sgd,
    };
    let method: Method = args
        .get(8)
        .map(|s| s.parse().unwrap())
        .unwrap_or(Method::Ga);

    let seed = 7u64;
    let records = corpus::generate(12, seed).unwrap();
    let utility = corpus::generate_utility(100, seed).unwrap();
    let tok = corpus::build_tokenizer(&records, &utility);
    println!("vocab = {}", tok.vocab_size());
    let (bundle, sets) = corpus::build_bundle(&records, &utility, scenario, &tok, seed).unwrap();
    println!(
        "max seq len = {}, finetune {} pairs, unlearn {} pairs",
        bundle.max_sequence_len(),
        sets.finetune.len(),
        sets.unlearn.len()
    );

    let cfg = ModelConfig::new(tok.vocab_size(), d_model, 48, seed);
    let init = lm::init(&cfg).unwrap();
    let ftcfg = TrainConfig {
        learning_rate: ft_lr,
        epochs: ft_epochs,
        batch_size: 16,
        optimizer: Optimizer::Adam,
        method: Method::Finetune,
        retain_weight: 1.0,
        npo_beta: 0.1,
        kl_reference_first: true,
        seed,
    };
    let t0 = Instant::now();
    let theta_ini = unlearner::finetune(&init, &cfg, &sets.finetune, &ftcfg).unwrap();
    println!("finetune {} epochs took {:.1?}", ft_epochs, t0.elapsed());
    let t0 = Instant::now();
    let scores = eval_all_splits(&cfg, &theta_ini.params, &bundle, &tok).unwrap();
    println!(
        "theta_ini: forget {:.3} related {:.3} retain {:.3} utility {:.3}  (eval {:.1?})",
        scores.forget, scores.related, scores.retain, scores.utility, t0.elapsed()
    );

    let unlearn_seed: u64 = if args.get(10).map(String::as_str) == Some("analyze") {
        args.get(9).and_then(|s| s.parse().ok()).unwrap_or(seed)
    } else {
        seed
    };
    let ucfg = TrainConfig {
        learning_rate: un_lr,
        epochs: un_epochs,
        batch_size: 16,
        optimizer,
        method,
        retain_weight: 1.0,
        npo_beta: 0.1,
        kl_reference_first: true,
        seed: unlearn_seed,
    };
    let t0 = Instant::now();
    let history =
        unlearner::run_unlearning(&theta_ini, &bundle, &sets.unlearn, &tok, &ucfg).unwrap();
    println!("unlearning took {:.1?}", t0.elapsed());
    for rec in &history.epochs {
        println!(
            "epoch {:2}: forget {:.3} related {:.3} utility {:.3} loss {:+.4}",
            rec.epoch, rec.forget_rouge, rec.related_rouge, rec.utility_rouge, rec.mean_loss
        );
    }
    if let Some(a) = &history.aborted {
        println!("aborted: {a}");
    }

    // paired-similarity probe on the fine-tuned model
    if args.get(10).map(String::as_str) == Some("probe") {
        let t0 = Instant::now();
        let report = unlearn_lab::probe::paired_similarity_experiment(
            &cfg,
            &theta_ini.params,
            &tok,
            &records,
            seed,
        )
        .unwrap();
        println!(
            "paired {:.4} shuffled {:.4} p {:.5} excluded {} ({:.1?})",
            report.paired_mean,
            report.shuffled_mean,
            report.permutation_p,
            report.excluded,
            t0.elapsed()
        );
        return;
    }

    // joint margin analysis for the plateau criteria
    if args.get(10).map(String::as_str) == Some("analyze") {
        let eval = unlearn_lab::cli::sweep_evaluator(&cfg, &bundle, &tok);
        let points: Vec<(usize, f64, f64, f64)> = history
            .epochs
            .iter()
            .map(|r| (r.epoch, r.forget_rouge, r.related_rouge, r.utility_rouge))
            .collect();
        let estar = points.iter().find(|p| p.1 <= 0.2).map(|p| p.0);
        println!("E* (first forget<=0.2) = {estar:?}");
        for t in 30..=history.epochs.len() {
            let rel = |e: usize| points[e - 1].2;
            let pairs = [rel(t - 3) - rel(t - 2), rel(t - 2) - rel(t - 1), rel(t - 1) - rel(t)];
            let plateau_margin = pairs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if plateau_margin >= 0.02 {
                continue;
            }
            let rec = &history.epochs[t - 1];
            let rows = unlearn_lab::uipe::alpha_sweep(
                &theta_ini,
                &rec.checkpoint,
                None,
                &[0.25, 0.5, 1.0, 2.0, 4.0],
                &eval,
            )
            .unwrap();
            let best = rows
                .iter()
                .filter(|r| r.related_rouge_delta <= -0.05 && r.utility_rouge_delta.abs() <= 0.10)
                .map(|r| {
                    let m1 = -r.related_rouge_delta - 0.05;
                    let m2 = 0.10 - r.utility_rouge_delta.abs();
                    (r.alpha, m1.min(m2))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1));
            println!(
                "T={t}: plateau worst pair {plateau_margin:+.3} (margin {:.3}); c9 best {best:?}",
                0.02 - plateau_margin
            );
        }
        return;
    }

    // sweep from candidate theta_un epochs
    let sweep_epochs: Vec<usize> = args
        .get(9)
        .map(|s| s.split(',').map(|p| p.parse().unwrap()).collect())
        .unwrap_or_default();
    let eval = unlearn_lab::cli::sweep_evaluator(&cfg, &bundle, &tok);
    for &e in &sweep_epochs {
        let Some(rec) = history.epochs.iter().find(|r| r.epoch == e) else {
            continue;
        };
        let next = history.epochs.iter().find(|r| r.epoch == e + 1);
        println!(
            "--- sweep from epoch {e} (forget {:.3} related {:.3} utility {:.3})",
            rec.forget_rouge, rec.related_rouge, rec.utility_rouge
        );
        let rows = unlearn_lab::uipe::alpha_sweep(
            &theta_ini,
            &rec.checkpoint,
            next.map(|r| &r.checkpoint),
            &[0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            &eval,
        )
        .unwrap();
        for row in rows {
            println!(
                "alpha {:>5}: dF {:+.3} dRel {:+.3} dU {:+.3}  (abs: F {:.3} Rel {:.3} U {:.3})",
                row.alpha,
                row.forget_rouge_delta,
                row.related_rouge_delta,
                row.utility_rouge_delta,
                rec.forget_rouge + row.forget_rouge_delta,
                rec.related_rouge + row.related_rouge_delta,
                rec.utility_rouge + row.utility_rouge_delta,
            );
        }
        // peek at decodes of wrecked models
        for alpha in [1.0, 4.0, 16.0] {
            let v = unlearn_lab::uipe::update_vector(&theta_ini, &rec.checkpoint).unwrap();
            let thu = unlearn_lab::uipe::extrapolate(&rec.checkpoint, &v, alpha).unwrap();
            let ev = unlearn_lab::metrics::eval_split(&cfg, &thu.params, &bundle.forget[..4], &tok, "forget")
                .unwrap();
            for ex in &ev.per_example {
                println!("  a={alpha} {}: {:?}", ex.id, ex.decoded);
            }
        }
    }
}
