//! End-to-end checks of the file formats, the CLI exit-code contract,
//! and pipeline determinism at a miniature scale.

use std::path::Path;
use std::process::Command;

use unlearn_lab::cli::{self, ExperimentConfig};
use unlearn_lab::corpus::Scenario;
use unlearn_lab::lm::{self, ModelConfig};
use unlearn_lab::unlearner::{Checkpoint, Method, TrainConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unlearn-lab"))
}

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
scenario = "P1"
seed = 5
persons = 3
utility_pairs = 30

[model]
d_model = 16
context_len = 48

[finetune]
learning_rate = 0.003
epochs = 12
batch_size = 16

[unlearn]
method = "ga"
learning_rate = 0.0003
epochs = 2
batch_size = 16

[uipe]
alpha = 0.5

[paths]
data_dir = "{0}/data"
checkpoint_dir = "{0}/ckpts"
report_dir = "{0}/reports"
"#,
        dir.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn gen_data_cli_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-data", "--persons", "3", "--seed", "9", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = cli::load_data(dir.path()).unwrap();
    assert_eq!(data.records.len(), 30);

    // persons = 0 is a usage error: exit 1
    let out = bin()
        .args(["gen-data", "--persons", "0", "--seed", "9", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_on_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    cli::cmd_gen_data(2, 10, 3, dir.path()).unwrap();
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(dir.path().join("absent.uipc"))
        .arg("--data")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    cli::cmd_gen_data(2, 10, 3, dir.path()).unwrap();
    let cfg = ModelConfig::new(8, 4, 16, 1);
    let ck = Checkpoint {
        params: lm::init(&cfg).unwrap(),
        model_config: cfg,
        train_config: TrainConfig::finetune_defaults(1),
        epoch: 0,
        provenance: "integration test".into(),
        lineage: None,
    };
    let path = dir.path().join("ck.uipc");
    cli::save_checkpoint(&path, &ck).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 6;
    bytes[last] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();

    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&path)
        .arg("--data")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_is_byte_deterministic_and_alpha_zero_matches_theta_un() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.uipe.alpha = 0.0;

    let out1 = cli::run_pipeline(&config).unwrap();
    let summary1 = std::fs::read(dir.path().join("reports/summary.json")).unwrap();
    let un1 = std::fs::read(dir.path().join("ckpts/theta_un.uipc")).unwrap();
    let uipe1 = std::fs::read(dir.path().join("ckpts/theta_uipe.uipc")).unwrap();

    let out2 = cli::run_pipeline(&config).unwrap();
    let summary2 = std::fs::read(dir.path().join("reports/summary.json")).unwrap();
    let un2 = std::fs::read(dir.path().join("ckpts/theta_un.uipc")).unwrap();

    assert_eq!(summary1, summary2, "summary JSON must be byte-identical");
    assert_eq!(un1, un2);
    assert_eq!(
        out1.theta_uipe.params.values(),
        out2.theta_uipe.params.values()
    );

    // alpha = 0: extrapolated payload equals theta_un's payload
    let loaded_un = cli::load_checkpoint(&dir.path().join("ckpts/theta_un.uipc")).unwrap();
    let loaded_uipe = cli::load_checkpoint(&dir.path().join("ckpts/theta_uipe.uipc")).unwrap();
    for (a, b) in loaded_un
        .params
        .values()
        .iter()
        .zip(loaded_uipe.params.values())
    {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // the payload section of both files is identical
    assert_eq!(payload_bytes(&un1), payload_bytes(&uipe1));
}

/// Strip header (magic + version + length-prefixed meta) and trailing CRC.
fn payload_bytes(file: &[u8]) -> &[u8] {
    let meta_len = u32::from_le_bytes(file[8..12].try_into().unwrap()) as usize;
    &file[12 + meta_len..file.len() - 4]
}

#[test]
fn pipeline_summary_carries_every_procedure_quantity() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let output = cli::run_pipeline(&config).unwrap();
    let s = &output.summary;
    assert_eq!(s.unlearn_epochs, 2);
    assert_eq!(s.per_epoch.len(), 2);
    assert!(s.per_epoch.iter().all(|e| e.forget_rouge.is_finite()
        && e.utility_rouge.is_finite()
        && e.related_rouge.is_finite()));
    assert!(s.selected_epoch >= 1 && s.selected_epoch <= 2);
    assert!(s.update_vector_norm > 0.0);
    assert_eq!(s.alpha, 0.5);
    assert!(s.files.reports.len() >= 2);

    // summary JSON exposes the same fields
    let text = std::fs::read_to_string(dir.path().join("reports/summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in [
        "unlearn_epochs",
        "alpha",
        "per_epoch",
        "selected_epoch",
        "update_vector_norm",
        "initial_scores",
        "theta_un_scores",
        "theta_uipe_scores",
    ] {
        assert!(json.get(key).is_some(), "summary missing {key}");
    }
}

#[test]
fn sweep_command_emits_fixed_header_and_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cli::run_pipeline(&config).unwrap();
    let out_csv = dir.path().join("sweep.csv");
    let out = bin()
        .args(["sweep", "--ini"])
        .arg(dir.path().join("ckpts/theta_ini.uipc"))
        .arg("--un")
        .arg(dir.path().join("ckpts/theta_un.uipc"))
        .arg("--data")
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "alpha,forget_rouge_delta,related_rouge_delta,utility_rouge_delta"
    );
    assert_eq!(lines.len(), 1 + 6, "default grid emits six rows");
}

#[test]
fn probe_command_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cli::run_pipeline(&config).unwrap();
    let json = dir.path().join("probe.json");
    let csv = dir.path().join("probe.csv");
    let report = cli::cmd_probe(
        &dir.path().join("ckpts/theta_ini.uipc"),
        &dir.path().join("data"),
        5,
        50,
        &json,
        &csv,
    )
    .unwrap();
    assert!(report.permutation_p > 0.0 && report.permutation_p <= 1.0);
    let text = std::fs::read_to_string(&json).unwrap();
    assert!(text.contains("permutation_p"));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("record_id,cosine"));
}

#[test]
fn scenario_round_trip_through_cli_layer() {
    for s in ["P1", "P2", "P3"] {
        let parsed: Scenario = s.parse().unwrap();
        assert_eq!(parsed.to_string(), s);
    }
}
