//! Command-line surface over the library: data generation, fine-tuning,
//! unlearning, extrapolation, evaluation, probes, sweeps, and the full
//! pipeline. Exit codes: 0 success, 1 usage, 2 IO, 3 data integrity,
//! 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unlearn_lab::cli::{self, ExperimentConfig};
use unlearn_lab::corpus::Scenario;
use unlearn_lab::lm::{self, ModelConfig};
use unlearn_lab::uipe;
use unlearn_lab::unlearner::{self, Method, Optimizer, TrainConfig};
use unlearn_lab::LabError;

#[derive(Parser)]
#[command(name = "unlearn-lab", version, about = "Desk-scale unlearning laboratory")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic persons corpus and utility split.
    GenData {
        #[arg(long, default_value_t = 12)]
        persons: usize,
        #[arg(long, default_value_t = 100)]
        utility_pairs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a fresh model on a scenario's training set.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario: Scenario2,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 48)]
        context_len: usize,
        #[arg(long, default_value_t = 3e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 160)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlearn from an initial checkpoint; writes per-epoch checkpoints
    /// and a metrics file.
    Unlearn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario: Scenario2,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "ga")]
        method: String,
        #[arg(long, default_value_t = 1.5e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1.0)]
        retain_weight: f64,
        #[arg(long, default_value_t = 0.1)]
        npo_beta: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Extrapolate: theta_uipe = theta_un + alpha * (theta_un - theta_ini).
    Uipe {
        #[arg(long)]
        ini: PathBuf,
        #[arg(long)]
        un: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one split of the corpus with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "forget")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired-vs-mismatched gradient similarity experiment.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
        #[arg(long)]
        out_json: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Amplify-coefficient sweep between two checkpoints.
    Sweep {
        #[arg(long)]
        ini: PathBuf,
        #[arg(long)]
        un: PathBuf,
        /// Checkpoint of the unlearning epoch after theta_un, for the
        /// alpha = 0 comparison row.
        #[arg(long)]
        next: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated grid; defaults to 0,0.25,0.5,1,2,4.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full procedure from a TOML experiment config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Clap-parseable scenario wrapper.
#[derive(Clone, Copy)]
struct Scenario2(Scenario);

impl std::str::FromStr for Scenario2 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse::<Scenario>()
            .map(Scenario2)
            .map_err(|e| e.to_string())
    }
}

fn parse_alphas(text: &str) -> Result<Vec<f64>, LabError> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| LabError::Config(format!("bad alpha {part:?}")))
        })
        .collect()
}

fn run(command: Command) -> Result<(), LabError> {
    match command {
        Command::GenData {
            persons,
            utility_pairs,
            seed,
            out,
        } => {
            cli::cmd_gen_data(persons, utility_pairs, seed, &out)?;
            println!(
                "wrote {} records and {utility_pairs} utility pairs to {}",
                persons * 10,
                out.display()
            );
            Ok(())
        }
        Command::Finetune {
            data,
            scenario,
            seed,
            d_model,
            context_len,
            learning_rate,
            epochs,
            batch_size,
            out,
        } => {
            let loaded = cli::load_data(&data)?;
            let (bundle, sets) = loaded.bundle(scenario.0, seed)?;
            let model_config =
                ModelConfig::new(loaded.tokenizer.vocab_size(), d_model, context_len, seed);
            let longest = bundle.max_sequence_len();
            if longest > model_config.context_len {
                return Err(LabError::Config(format!(
                    "context_len {context_len} shorter than the longest encoded pair ({longest})"
                )));
            }
            let tcfg = TrainConfig {
                learning_rate,
                epochs,
                batch_size,
                optimizer: Optimizer::Adam,
                method: Method::Finetune,
                retain_weight: 1.0,
                npo_beta: 0.1,
                kl_reference_first: true,
                seed,
            };
            let init = lm::init(&model_config)?;
            let ck = unlearner::finetune(&init, &model_config, &sets.finetune, &tcfg)?;
            cli::save_checkpoint(&out, &ck)?;
            let scores =
                cli::eval_all_splits(&model_config, &ck.params, &bundle, &loaded.tokenizer)?;
            println!(
                "finetuned {} epochs; rouge: forget {:.3} related {:.3} utility {:.3} -> {}",
                epochs,
                scores.forget,
                scores.related,
                scores.utility,
                out.display()
            );
            Ok(())
        }
        Command::Unlearn {
            data,
            scenario,
            init,
            method,
            learning_rate,
            epochs,
            batch_size,
            retain_weight,
            npo_beta,
            seed,
            out_dir,
        } => {
            let loaded = cli::load_data(&data)?;
            let theta_ini = cli::load_checkpoint(&init)?;
            let (bundle, sets) = loaded.bundle(scenario.0, seed)?;
            let method: Method = method.parse()?;
            let tcfg = TrainConfig {
                learning_rate,
                epochs,
                batch_size,
                optimizer: Optimizer::Sgd,
                method,
                retain_weight,
                npo_beta,
                kl_reference_first: true,
                seed,
            };
            let history =
                unlearner::run_unlearning(&theta_ini, &bundle, &sets.unlearn, &loaded.tokenizer, &tcfg)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| LabError::io(&out_dir, e))?;
            for record in &history.epochs {
                let path = out_dir.join(format!("epoch_{:02}.uipc", record.epoch));
                cli::save_checkpoint(&path, &record.checkpoint)?;
            }
            cli::write_json(
                &out_dir.join("metrics.json"),
                &cli::unlearn_metrics(method, &history),
            )?;
            for record in &history.epochs {
                println!(
                    "epoch {:2}: forget {:.3} related {:.3} utility {:.3} loss {:+.4}",
                    record.epoch,
                    record.forget_rouge,
                    record.related_rouge,
                    record.utility_rouge,
                    record.mean_loss
                );
            }
            if let Some(note) = &history.aborted {
                println!("aborted: {note}");
            }
            Ok(())
        }
        Command::Uipe { ini, un, alpha, out } => {
            let theta_ini = cli::load_checkpoint(&ini)?;
            let theta_un = cli::load_checkpoint(&un)?;
            let v = uipe::update_vector(&theta_ini, &theta_un)?;
            let theta_uipe = uipe::extrapolate(&theta_un, &v, alpha)?;
            cli::save_checkpoint(&out, &theta_uipe)?;
            println!(
                "|v| = {:.6}; wrote alpha={alpha} extrapolation to {}",
                v.norm(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
        } => {
            let eval = cli::cmd_eval(&ckpt, &data, &split, out.as_deref())?;
            println!("{} mean rouge-l f1: {:.4}", eval.split, eval.mean_f1);
            Ok(())
        }
        Command::Probe {
            ckpt,
            data,
            seed,
            permutations,
            out_json,
            out_csv,
        } => {
            let report = cli::cmd_probe(&ckpt, &data, seed, permutations, &out_json, &out_csv)?;
            println!(
                "paired mean {:.4}, shuffled mean {:.4}, permutation p = {:.4} ({} excluded)",
                report.paired_mean, report.shuffled_mean, report.permutation_p, report.excluded
            );
            Ok(())
        }
        Command::Sweep {
            ini,
            un,
            next,
            data,
            alphas,
            out,
        } => {
            let grid = match alphas {
                Some(text) => parse_alphas(&text)?,
                None => uipe::DEFAULT_ALPHA_GRID.to_vec(),
            };
            let rows = cli::cmd_sweep(&ini, &un, next.as_deref(), &data, &grid, &out)?;
            for row in &rows {
                println!(
                    "alpha {:>5}: forget {:+.4} related {:+.4} utility {:+.4}",
                    row.alpha,
                    row.forget_rouge_delta,
                    row.related_rouge_delta,
                    row.utility_rouge_delta
                );
            }
            Ok(())
        }
        Command::Pipeline { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let output = cli::run_pipeline(&cfg)?;
            let s = &output.summary;
            println!(
                "pipeline done: scenario {} method {} T={} alpha={}",
                s.scenario, s.unlearn_method, s.unlearn_epochs, s.alpha
            );
            println!(
                "selected epoch {} (|v| = {:.6}); theta_un forget {:.3} related {:.3} utility {:.3}",
                s.selected_epoch,
                s.update_vector_norm,
                s.theta_un_scores.forget,
                s.theta_un_scores.related,
                s.theta_un_scores.utility
            );
            println!(
                "theta_uipe: forget {:.3} related {:.3} utility {:.3}",
                s.theta_uipe_scores.forget, s.theta_uipe_scores.related, s.theta_uipe_scores.utility
            );
            println!(
                "summary: {}",
                cfg.paths.report_dir.join("summary.json").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(err) => {
            // help/version requests are not usage errors
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
