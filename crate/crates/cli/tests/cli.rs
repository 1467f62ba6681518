use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_antipasto"));
    c.env_remove("ANTIPASTO_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_PRETRAIN: &str = "\
[model]
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32
[corpus]
n_docs = 200
[pretrain]
epochs = 1
eval_docs = 40
min_persona_acc = -1
min_format_acc = -1
";

const TINY_STEER: &str = "\
[adapter]
rank = 3
[signals]
n_pairs = 40
subspace_rank = 4
taskdiff_rank = 8
suppressed_rank = 12
head_rank = 4
[train]
epochs = 1
batch_size = 4
accum_steps = 2
calib_pairs = 16
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn selfcheck_passes() {
    let o = run(&["selfcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn prompting_with_an_adapter_is_a_usage_error() {
    let o = run(&["eval", "--model", "m.apst", "--adapter", "a.apst", "--method", "prompting", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("usage"));
}

#[test]
fn antipasto_without_an_adapter_is_a_usage_error() {
    let o = run(&["eval", "--model", "m.apst", "--method", "antipasto", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_names_the_nearest_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.txt", "[pretrain]\nepoch = 3\n");
    let out = dir.path().join("out");
    let o = run(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("pretrain.epoch") && err.contains("pretrain.epochs"), "{err}");
    assert!(!out.join("model.apst").exists());
}

#[test]
fn missing_out_dir_without_env_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", TINY_PRETRAIN);
    let o = run(&["pretrain", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ANTIPASTO_OUT"));
}

#[test]
fn missing_model_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.apst");
    let out = dir.path().join("out");
    let o = run(&["train-steer", "--model", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn corrupt_model_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.apst", "not a checkpoint");
    let o = run(&["eval", "--model", &bad, "--method", "prompting", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn report_aggregates_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let (model, world, _) = antipasto::microlm::pretrain::PretrainSetup::parse(TINY_PRETRAIN).unwrap().run().unwrap();
    let items = antipasto::evalharness::heldout_items(&world);
    let base = antipasto::evalharness::run_prompt_baseline(&model, &world, &items, "h").unwrap();
    let mut runs = Vec::new();
    for seed in 0..3 {
        let d = dir.path().join(format!("seed-{seed}"));
        std::fs::create_dir_all(&d).unwrap();
        let mut rep = base.clone();
        rep.method = antipasto::evalharness::Method::Antipasto;
        rep.seed = Some(seed);
        rep.aggregates.f1 = seed as f64;
        std::fs::write(d.join("report.json"), rep.to_json().unwrap()).unwrap();
        std::fs::write(d.join("prompting_report.json"), base.to_json().unwrap()).unwrap();
        runs.push(d.to_string_lossy().into_owned());
    }
    let out = dir.path().join("summary.csv");
    let mut args = vec!["report", "--out", out.to_str().unwrap(), "--runs"];
    args.extend(runs.iter().map(|s| s.as_str()));
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("method,runs,F1,F1_std"));
    let anti: Vec<&str> = lines.iter().find(|l| l.starts_with("antipasto,")).unwrap().split(',').collect();
    assert_eq!(anti[1], "3");
    assert_eq!(anti[2], "1.0000");
    assert_eq!(anti[3], "1.0000");
    assert!(lines.iter().any(|l| l.starts_with("prompting,3,")));
    assert_eq!(antipasto::manifest::read_all(dir.path()).unwrap().len(), 1);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let pre_cfg = write(root, "pretrain.txt", TINY_PRETRAIN);
    let steer_cfg = write(root, "steer.txt", TINY_STEER);

    let o = bin().env("ANTIPASTO_OUT", root).args(["pretrain", "--config", &pre_cfg]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let pre = root.join("pretrain");
    for f in ["model.apst", "config.txt", "metrics.json", "loss_curve.csv", "items.jsonl", "manifest.jsonl"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let model = pre.join("model.apst");
    let model = model.to_str().unwrap();

    let steer = root.join("steer");
    let o = run(&["train-steer", "--model", model, "--config", &steer_cfg, "--seeds", "5", "--out", steer.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed_dir = steer.join("seed-5");
    for f in [
        "config.txt",
        "train_log.csv",
        "val_log.csv",
        "adapter.apst",
        "calibration.txt",
        "pairs.jsonl",
        "report.json",
        "report.csv",
        "report_plot.csv",
        "prompting_report.json",
        "coherence.json",
        "manifest.jsonl",
    ] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(seed_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,l_proj,b_coh,b_mono,total,cos_pos,cos_neg\n"));

    let adapter = seed_dir.join("adapter.apst");
    let items = pre.join("items.jsonl");
    let eval_out = root.join("eval");
    let o = run(&[
        "eval",
        "--model",
        model,
        "--adapter",
        adapter.to_str().unwrap(),
        "--items",
        items.to_str().unwrap(),
        "--method",
        "antipasto",
        "--seed",
        "5",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stored = std::fs::read_to_string(seed_dir.join("report.json")).unwrap();
    let fresh = std::fs::read_to_string(eval_out.join("report.json")).unwrap();
    assert_eq!(stored, fresh);

    let o = run(&["report", "--runs", seed_dir.to_str().unwrap(), "--out", root.join("summary.csv").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}
