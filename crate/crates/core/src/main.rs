use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tbava::data::{bayes_oracle, read_jsonl, segment_accuracy, write_jsonl, SyntheticSample};
use tbava::experiment::{
    build_world, inspect_gates, run_ablation, write_heatmaps, ExperimentConfig, World,
};
use tbava::text_anchor::{default_classes, read_class_list};
use tbava::training::{
    census, encode_prefixes, evaluate, grad_check, train, write_metrics_csv, GradCheckConfig, Model, TrainMode,
};
use tbava::weights::NamedTensors;
use tbava::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tbava", version, about = "Text-bridged audio-visual adapter over frozen toy encoders")]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for backbone, data and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// backbone_only, tbava_no_gsm or tbava_full.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "tbava_out")]
    out: PathBuf,
    /// Class list, one name per line.
    #[arg(long, global = true)]
    classes: Option<PathBuf>,
    /// Config override such as `train.steps=100`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.jsonl and test.jsonl.
    GenData,
    /// Train one model and save metrics, census and checkpoint.
    Train {
        /// Directory with train.jsonl and test.jsonl from gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint directory written by train.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train all three modes over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Export class-grouped gate heatmaps of a tbava_full checkpoint.
    InspectGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Verify every trainable adjoint against finite differences.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TBAVA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("TBAVA_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config file {}: {e}", path.display())))?;
            ExperimentConfig::from_toml_str(&text, &cli.overrides)?
        }
        None => ExperimentConfig::from_toml_str("", &cli.overrides)?,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = &cli.mode {
        cfg = cfg.with_mode(TrainMode::parse(mode)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_classes(cli: &Cli, n: usize) -> Result<Vec<String>> {
    match &cli.classes {
        Some(p) => read_class_list(p),
        None => Ok(default_classes(n)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generated splits, or splits read from `data` when given.
fn world(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<World> {
    let mut w = build_world(cfg)?;
    if let Some(dir) = data {
        w.train = read_checked(&dir.join("train.jsonl"), cfg)?;
        w.test = read_checked(&dir.join("test.jsonl"), cfg)?;
    }
    Ok(w)
}

fn read_checked(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<SyntheticSample>> {
    let samples = read_jsonl(path)?;
    for s in &samples {
        let shape = s.visual_evidence.shape();
        if shape[1] != cfg.backbone.evidence_width || s.audio_evidence.shape() != shape {
            return Err(Error::Data(format!(
                "{}: evidence shape {shape:?} does not match evidence width {}",
                path.display(),
                cfg.backbone.evidence_width
            )));
        }
        if s.segment_label.iter().flatten().any(|&c| c >= cfg.backbone.n_classes) {
            return Err(Error::Data(format!("{}: label outside {} classes", path.display(), cfg.backbone.n_classes)));
        }
    }
    Ok(samples)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let classes = load_classes(&cli, cfg.backbone.n_classes)?;
    match &cli.command {
        Command::GenData => {
            let w = build_world(&cfg)?;
            create_dir(&cli.out)?;
            write_jsonl(&cli.out.join("train.jsonl"), &w.train)?;
            write_jsonl(&cli.out.join("test.jsonl"), &w.test)?;
            let oracle = segment_accuracy(&w.test, |s| bayes_oracle(&w.basis, s), |_| true);
            println!(
                "wrote {} train and {} test videos to {} (oracle test accuracy {:.4})",
                w.train.len(),
                w.test.len(),
                cli.out.display(),
                oracle
            );
        }
        Command::Train { data } => {
            let w = world(&cfg, data.as_deref())?;
            let trained = train(&w.backbone, &classes, &cfg.train, &w.train, &w.test)?;
            create_dir(&cli.out)?;
            write_metrics_csv(&cli.out.join("metrics.csv"), &trained.metrics)?;
            trained.model.checkpoint().save(&cli.out.join("model"))?;
            let c = census(&w.backbone, &trained.model);
            write_text(&cli.out.join("census.json"), &serde_json::to_string_pretty(&c).expect("census serializes"))?;
            write_text(&cli.out.join("config.toml"), &cfg.to_toml_string())?;
            write_text(&cli.out.join("classes.txt"), &(classes.join("\n") + "\n"))?;
            println!(
                "{}: test accuracy {:.4}; trainable {} of {} parameters ({:.3}%)",
                cfg.train.mode.name(),
                trained.test_acc,
                c.trainable,
                c.total,
                100.0 * c.ratio
            );
        }
        Command::Eval { checkpoint, data } => {
            let (cfg, w, model) = restore(checkpoint, &cli, data.as_deref())?;
            let prefixes = encode_prefixes(&w.backbone, &model, &w.test)?;
            let acc = evaluate(&w.backbone, &model, &prefixes, &w.test)?;
            println!("{}: test accuracy {acc:.4}", cfg.train.mode.name());
        }
        Command::Ablate { seeds } => {
            let report = run_ablation(&cfg, seeds, Some(&cli.out))?;
            let table = report.table();
            write_text(&cli.out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::InspectGates { checkpoint, data } => {
            let (_, w, model) = restore(checkpoint, &cli, data.as_deref())?;
            let maps = inspect_gates(&w.backbone, &model, &w.test)?;
            for p in write_heatmaps(&cli.out, &maps)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck => {
            let report = grad_check(&GradCheckConfig {
                seed: cfg.seed,
                ..GradCheckConfig::default()
            })?;
            for p in &report.params {
                println!("{:<28} {:>6} {:.3e}", p.name, p.numel, p.max_rel_err);
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!("{verdict}: max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err(), report.tolerance);
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Rebuilds the run in `dir` from its saved config, classes and weights.
fn restore(dir: &Path, cli: &Cli, data: Option<&Path>) -> Result<(ExperimentConfig, World, Model)> {
    let config_path = dir.join("config.toml");
    let text = std::fs::read_to_string(&config_path)
        .map_err(|e| Error::Usage(format!("cannot read checkpoint config {}: {e}", config_path.display())))?;
    let cfg = ExperimentConfig::from_toml_str(&text, &[])?;
    let class_path = dir.join("classes.txt");
    let classes = if class_path.exists() {
        read_class_list(&class_path)?
    } else {
        load_classes(cli, cfg.backbone.n_classes)?
    };
    let w = world(&cfg, data)?;
    let mut model = Model::init(&w.backbone, &classes, &cfg.train)?;
    model.load_checkpoint(&NamedTensors::load(&dir.join("model"))?)?;
    Ok((cfg, w, model))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
