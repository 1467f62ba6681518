use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use antipasto::adapter::AdapterState;
use antipasto::evalharness::{
    coherence_check, heldout_items, items_from_jsonl, items_to_jsonl, model_hash, run_eval, run_prompt_baseline, SteeringReport,
};
use antipasto::manifest::RunManifest;
use antipasto::microlm::checkpoint::{load_model, save_model};
use antipasto::microlm::pretrain::PretrainSetup;
use antipasto::microlm::World;
use antipasto::trainer::{run_seed, Calibration, SteerConfig, CALIBRATION_FILE};
use antipasto::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

const OUT_ENV: &str = "ANTIPASTO_OUT";
const MODEL_FILE: &str = "model.apst";
const ITEMS_FILE: &str = "items.jsonl";
const REPORT_FILE: &str = "report.json";
const PROMPTING_REPORT_FILE: &str = "prompting_report.json";
const COHERENCE_PROMPTS: usize = 200;

#[derive(Parser)]
#[command(name = "antipasto", version, about = "Train and evaluate anti-parallel steering adapters on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Antipasto,
    Prompting,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the toy model on the synthetic persona corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one steering adapter per seed, calibrate and evaluate it.
    TrainSteer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score an item file with a trained adapter or with persona prompting.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Defaults to the calibration record next to the adapter.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Defaults to the held-out items of the model's world.
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean and std of report metrics across run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast invariant and gradient suite.
    Selfcheck,
}

fn usage(msg: &str) -> Error {
    Error::Config(format!("usage: {msg}"))
}

fn out_dir(flag: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => std::env::var_os(OUT_ENV)
            .map(|root| PathBuf::from(root).join(command))
            .ok_or_else(|| usage(&format!("pass --out or set {OUT_ENV}"))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

fn write_report(dir: &Path, name: &str, report: &SteeringReport) -> Result<()> {
    let stem = name.trim_end_matches(".json");
    std::fs::write(dir.join(name), report.to_json()? + "\n")?;
    std::fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    std::fs::write(dir.join(format!("{stem}_plot.csv")), report.plot_csv())?;
    Ok(())
}

fn pretrain(config: Option<PathBuf>, out: Option<PathBuf>, mut manifest: RunManifest) -> Result<()> {
    let text = config.as_deref().map(read_text).transpose()?.unwrap_or_default();
    let setup = PretrainSetup::parse(&text)?;
    let out = out_dir(out, "pretrain")?;
    std::fs::create_dir_all(&out)?;
    manifest.config_path = config;
    manifest.seeds = vec![setup.pretrain.seed];
    std::fs::write(out.join("config.txt"), setup.render())?;
    let (model, world, outcome) = setup.run()?;
    save_model(&out.join(MODEL_FILE), &model, &setup.corpus)?;
    write_json(&out.join("metrics.json"), &outcome.metrics)?;
    let curve: String = outcome.curve.iter().enumerate().map(|(i, l)| format!("{i},{l:?}\n")).collect();
    std::fs::write(out.join("loss_curve.csv"), format!("step,loss\n{curve}"))?;
    std::fs::write(out.join(ITEMS_FILE), items_to_jsonl(&heldout_items(&world))?)?;
    println!(
        "persona accuracy {:.3}, format accuracy {:.3}, control TV {:.3}",
        outcome.metrics.persona_acc, outcome.metrics.format_acc, outcome.metrics.control_tv
    );
    manifest.outputs = vec![out.join(MODEL_FILE)];
    manifest.finish(&out)
}

fn train_steer(model_path: PathBuf, config: Option<PathBuf>, seeds: Option<Vec<u64>>, out: Option<PathBuf>, mut manifest: RunManifest) -> Result<()> {
    let text = config.as_deref().map(read_text).transpose()?.unwrap_or_default();
    let mut cfg = SteerConfig::parse(&text)?;
    if let Some(s) = seeds {
        cfg.train.seeds = s;
    }
    cfg.train.validate()?;
    let out = out_dir(out, "train-steer")?;
    let bytes = std::fs::read(&model_path)?;
    let (model, corpus) = load_model(&model_path)?;
    let world = World::new(&corpus)?;
    let hash = model_hash(&bytes);
    let items = heldout_items(&world);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), cfg.render())?;
    let baseline = run_prompt_baseline(&model, &world, &items, &hash)?;
    manifest.config_path = config;
    manifest.seeds = cfg.train.seeds.clone();
    manifest.inputs = vec![model_path];
    for &seed in &cfg.train.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let run = run_seed(&model, &world, &cfg, seed, Some(&dir))?;
        let report = run_eval(&model, &world, &run.adapter, &run.calibration, &items, &hash, Some(seed))?;
        write_report(&dir, REPORT_FILE, &report)?;
        write_report(&dir, PROMPTING_REPORT_FILE, &baseline)?;
        let prompts: Vec<Vec<usize>> = run.train_pairs.iter().take(COHERENCE_PROMPTS).map(|p| p.x_cho.clone()).collect();
        let coh = coherence_check(&model, &run.adapter, &run.calibration, &prompts, &cfg.loss)?;
        write_json(&dir.join("coherence.json"), &coh)?;
        let a = &report.aggregates;
        println!(
            "seed {seed}: F1 {:.2} Tgt% {:.1} Wrong% {:.1} Arb% {:.1} (prompting F1 {:.2}){}",
            a.f1,
            a.tgt_pct,
            a.wrong_pct,
            a.arb_pct,
            baseline.aggregates.f1,
            if run.calibration.indeterminate { " [calibration indeterminate]" } else { "" }
        );
        let mut m = manifest.clone();
        m.seeds = vec![seed];
        m.outputs = vec![dir.clone()];
        m.finish(&dir)?;
        manifest.outputs.push(dir);
    }
    manifest.finish(&out)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    model_path: PathBuf,
    adapter: Option<PathBuf>,
    calibration: Option<PathBuf>,
    items_path: Option<PathBuf>,
    method: MethodArg,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mut manifest: RunManifest,
) -> Result<()> {
    if method == MethodArg::Prompting && (adapter.is_some() || calibration.is_some()) {
        return Err(usage("--method prompting cannot be combined with --adapter or --calibration"));
    }
    if method == MethodArg::Antipasto && adapter.is_none() {
        return Err(usage("--method antipasto needs --adapter"));
    }
    let out = out_dir(out, "eval")?;
    let bytes = std::fs::read(&model_path)?;
    let (model, corpus) = load_model(&model_path)?;
    let world = World::new(&corpus)?;
    let hash = model_hash(&bytes);
    let items = match &items_path {
        Some(p) => items_from_jsonl(&read_text(p)?)?,
        None => heldout_items(&world),
    };
    manifest.inputs.push(model_path);
    manifest.inputs.extend(items_path);
    let report = match adapter {
        None => run_prompt_baseline(&model, &world, &items, &hash)?,
        Some(path) => {
            let state = AdapterState::load(&path, &model)?;
            let cal_path = calibration.unwrap_or_else(|| path.with_file_name(CALIBRATION_FILE));
            let cal = Calibration::parse(&read_text(&cal_path)?)?;
            manifest.inputs.extend([path, cal_path]);
            run_eval(&model, &world, &state, &cal, &items, &hash, seed)?
        }
    };
    std::fs::create_dir_all(&out)?;
    write_report(&out, REPORT_FILE, &report)?;
    print!("{}", report.to_csv());
    manifest.seeds = seed.into_iter().collect();
    manifest.outputs = vec![out.join(REPORT_FILE)];
    manifest.finish(&out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

const COLUMNS: [&str; 7] = ["F1", "Tgt%", "Wrong%", "Arb%", "Tgt_W%", "Wrong_W%", "Pmass"];

fn report(runs: Vec<PathBuf>, out: PathBuf, mut manifest: RunManifest) -> Result<()> {
    let mut by_method: BTreeMap<&'static str, Vec<[f64; 7]>> = BTreeMap::new();
    for dir in &runs {
        let mut found = false;
        for name in [REPORT_FILE, PROMPTING_REPORT_FILE] {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            found = true;
            let r = SteeringReport::from_json(&read_text(&path)?)?;
            let a = &r.aggregates;
            by_method
                .entry(r.method.name())
                .or_default()
                .push([a.f1, a.tgt_pct, a.wrong_pct, a.arb_pct, a.tgt_w_pct, a.wrong_w_pct, a.pmass]);
        }
        if !found {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: no {REPORT_FILE} or {PROMPTING_REPORT_FILE}", dir.display()),
            )));
        }
    }
    let mut csv = String::from("method,runs");
    for c in COLUMNS {
        csv.push_str(&format!(",{c},{c}_std"));
    }
    csv.push('\n');
    for (method, rows) in &by_method {
        csv.push_str(&format!("{method},{}", rows.len()));
        for k in 0..COLUMNS.len() {
            let (m, s) = mean_std(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
            csv.push_str(&format!(",{m:.4},{s:.4}"));
        }
        csv.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, &csv)?;
    print!("{csv}");
    manifest.inputs = runs;
    manifest.outputs = vec![out.clone()];
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    manifest.finish(dir)
}

fn selfcheck() -> Result<()> {
    let checks = antipasto::selfcheck::run();
    let mut failed = 0;
    for c in &checks {
        println!("{} {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.pass);
    }
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.cmd {
        Cmd::Pretrain { config, out } => pretrain(config, out, RunManifest::start("pretrain", args)),
        Cmd::TrainSteer { model, config, seeds, out } => train_steer(model, config, seeds, out, RunManifest::start("train-steer", args)),
        Cmd::Eval {
            model,
            adapter,
            calibration,
            items,
            method,
            seed,
            out,
        } => eval(model, adapter, calibration, items, method, seed, out, RunManifest::start("eval", args)),
        Cmd::Report { runs, out } => report(runs, out, RunManifest::start("report", args)),
        Cmd::Selfcheck => selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
