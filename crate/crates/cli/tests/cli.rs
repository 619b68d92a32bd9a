use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
samples = 80

[train]
epochs = 1
batch_size = 16

[model]
dim = 16
heads = 2
depth = 1
decoder_dim = 8
decoder_depth = 1
decoder_heads = 2
mlp_ratio = 2

[viz]
count = 4
"#;

fn automask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_automask")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn out_arg(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn pretrain_writes_manifest_checkpoint_and_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = out_arg(dir.path(), "run");
    let o = automask(&["pretrain", "--config", &cfg, "--out", &out, "--mode", "random"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    assert!(run.join("checkpoint.amae").exists());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,mode,loss_recon,loss_adv_g,loss_adv_d,lr,seed\n"));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["config"]["train"]["mode"], "random");
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = out_arg(dir.path(), name);
        let o = automask(&["pretrain", "--config", &cfg, "--out", &out, "--seed", "7"]);
        assert!(o.status.success());
        csvs.push(std::fs::read(dir.path().join(name).join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn resume_appends_the_remaining_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let one = write_config(dir.path(), SMALL);
    let out = out_arg(dir.path(), "run");
    assert!(automask(&["pretrain", "--config", &one, "--out", &out]).status.success());
    let ckpt = dir.path().join("run/checkpoint.amae").to_string_lossy().into_owned();
    let three = write_config(dir.path(), &SMALL.replace("epochs = 1", "epochs = 3"));
    let o = automask(&["pretrain", "--config", &three, "--out", &out, "--checkpoint", &ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let epochs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3"]);
}

#[test]
fn probe_and_viz_use_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = out_arg(dir.path(), "run");
    assert!(automask(&["pretrain", "--config", &cfg, "--out", &out]).status.success());
    let ckpt = dir.path().join("run/checkpoint.amae").to_string_lossy().into_owned();

    let o = automask(&["probe", "--config", &cfg, "--out", &out, "--checkpoint", &ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/probe.json")).unwrap()).unwrap();
    let acc = probe["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let viz = out_arg(dir.path(), "viz");
    let o = automask(&["viz-masks", "--config", &cfg, "--out", &viz, "--checkpoint", &ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..4 {
        let bytes = std::fs::read(dir.path().join(format!("viz/mask_{i:03}.pgm"))).unwrap();
        let (w, h, pixels) = automask::generator::decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (64, 64));
        // One pixel per 8×8 cell block.
        let white_cells = (0..8)
            .flat_map(|r| (0..8).map(move |c| (r, c)))
            .filter(|&(r, c)| pixels[(r * 8) * w + c * 8] == 255)
            .count();
        assert_eq!(white_cells, 16);
    }
}

#[test]
fn probe_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = out_arg(dir.path(), "run");
    let o = automask(&["probe", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[gradcheck]\nseeds = 2\n");
    let out = out_arg(dir.path(), "gc");
    let o = automask(&["gradcheck", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report = std::fs::read_to_string(dir.path().join("gc/gradcheck.txt")).unwrap();
    assert!(report.lines().count() > 30);
    assert!(!report.contains("FAIL"));
}

#[test]
fn gen_data_round_trips_through_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nsamples = 10\n");
    let out = out_arg(dir.path(), "data");
    assert!(automask(&["gen-data", "--config", &cfg, "--out", &out]).status.success());
    let path = dir.path().join("data/dataset.amds");
    let samples = automask::data::read_dataset(&path).unwrap();
    assert_eq!(samples, automask::data::generate_dataset(10, 0, 0.05).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path(), "x");
    let cfg = write_config(dir.path(), "[train]\nepochz = 3\n");
    let o = automask(&["pretrain", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epochz") && err.contains("line 2"), "{err}");

    let cfg = write_config(dir.path(), "");
    let o = automask(&["pretrain", "--config", &cfg, "--out", &out, "--mode", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    let o = automask(&["pretrain", "--config", "/nonexistent/cfg.toml", "--out", &out]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = out_arg(dir.path(), "run");
    let bogus = dir.path().join("bogus.amae");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = automask(&["probe", "--config", &cfg, "--out", &out, "--checkpoint", &bogus.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
}
