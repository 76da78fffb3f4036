use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mlkp::archive::{load_params, save_weights};
use mlkp::config::RunConfig;
use mlkp::detect::format_detection;
use mlkp::model::{DetectSettings, DetectorParams};
use mlkp::suite::{gradcheck_suite, oracle_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use mlkp::synth::{export_scene, generate_scene};
use mlkp::train::{evaluate, train, Evaluation};
use mlkp::ParamStore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Oracle relative tolerance for the kernel and predictor comparisons.
const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "mlkp", version, about = "Train, check and evaluate the location-aware kernel detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of the kernel block, fusion, head and RoI pooling.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Compares the fast kernel maps and factored predictor against direct evaluation.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
    },
    /// Trains a detector and writes its weight archive.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a weight archive on the held-out scenes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Writes one line per detection on the held-out scenes.
    ExportDetections {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the built-in toy experiment.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Renders scenes as PPM images with plain-text annotations.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Defaults to all training and held-out scenes.
        #[arg(long)]
        count: Option<usize>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_model(cfg: &RunConfig, weights: &Path) -> Result<DetectorParams> {
    let mut params = DetectorParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_params(weights, &mut params).with_context(|| format!("cannot load weights {}", weights.display()))?;
    Ok(params)
}

fn held_out(cfg: &RunConfig, weights: &Path) -> Result<Evaluation> {
    let params = load_model(cfg, weights)?;
    Ok(evaluate(&cfg.model, &params, &cfg.data, &cfg.train, &DetectSettings::default())?)
}

fn gradcheck(config: &Path, tolerance: f64) -> Result<bool> {
    let cfg = load_config(config)?;
    let mlkp = &cfg.model.mlkp;
    let reports = gradcheck_suite(mlkp.max_order, mlkp.location_weight, cfg.train.seed, DEFAULT_EPS, tolerance)?;
    let mut text = String::new();
    let mut all = true;
    for (name, r) in &reports {
        all &= r.passed();
        writeln!(text, "== {name}\n{r}\n")?;
    }
    writeln!(text, "overall: {}", if all { "PASS" } else { "FAIL" })?;
    write_or_print(cfg.paths.report.as_deref(), &text)?;
    Ok(all)
}

fn oracle(config: &Path, trials: usize) -> Result<bool> {
    let cfg = load_config(config)?;
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let s = oracle_suite(trials, cfg.train.seed)?;
    let passed = s.passed(ORACLE_TOLERANCE);
    let text = format!(
        "trials {}\nkernel order 2 max relative error {:.3e}\nkernel order 3 max relative error {:.3e}\npredictor max relative gap {:.3e}\ntolerance {ORACLE_TOLERANCE:.1e}: {}\n",
        s.trials,
        s.kernel_max_error[0],
        s.kernel_max_error[1],
        s.predictor_max_gap,
        if passed { "PASS" } else { "FAIL" }
    );
    write_or_print(cfg.paths.report.as_deref(), &text)?;
    Ok(passed)
}

fn run_train(config: &Path, out: &Path) -> Result<bool> {
    let cfg = load_config(config)?;
    let outcome = train(&cfg.model, &cfg.train, &cfg.data, |line| println!("{line}"))?;
    save_weights(&ParamStore::from_params(&outcome.params), out)
        .with_context(|| format!("cannot write weights {}", out.display()))?;
    if let Some(report) = &cfg.paths.report {
        let mut log = outcome.log.join("\n");
        log.push('\n');
        fs::write(report, log).with_context(|| format!("cannot write {}", report.display()))?;
    }
    Ok(true)
}

fn eval(config: &Path, weights: &Path, report: &Path) -> Result<bool> {
    let cfg = load_config(config)?;
    let e = held_out(&cfg, weights)?;
    let mut text = String::new();
    for c in &e.report.per_class {
        writeln!(text, "class={} gt={} ap50={:.6}", c.class_id, c.ground_truths, c.ap)?;
    }
    writeln!(text, "map50={:.6}", e.report.map)?;
    fs::write(report, &text).with_context(|| format!("cannot write {}", report.display()))?;
    print!("{text}");
    Ok(true)
}

fn export_detections(weights: &Path, out: &Path, config: Option<&Path>) -> Result<bool> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let e = held_out(&cfg, weights)?;
    let mut text = String::new();
    for (&image, dets) in e.scene_indices.iter().zip(&e.detections) {
        for d in dets {
            writeln!(text, "{}", format_detection(image as usize, d))?;
        }
    }
    fs::write(out, text).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(true)
}

fn gen_data(config: &Path, out_dir: &Path, count: Option<usize>) -> Result<bool> {
    let cfg = load_config(config)?;
    let count = count.unwrap_or(cfg.train.train_scenes + cfg.train.eval_scenes);
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    for i in 0..count as u64 {
        let scene = generate_scene(&cfg.data, i)?;
        export_scene(&scene, out_dir).with_context(|| format!("cannot write scene {i}"))?;
    }
    println!("wrote {count} scenes to {}", out_dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck { config, tolerance } => gradcheck(config, *tolerance),
        Command::Oracle { config, trials } => oracle(config, *trials),
        Command::Train { config, out } => run_train(config, out),
        Command::Eval { config, weights, report } => eval(config, weights, report),
        Command::ExportDetections { weights, out, config } => export_detections(weights, out, config.as_deref()),
        Command::GenData { config, out_dir, count } => gen_data(config, out_dir, *count),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
