//! `occlusion-attn`: data generation, training, evaluation, attention export,
//! gradient checks and ablations.
//!
//! Every command exits 0 on success. Failures print one JSON line
//! `{"error": ..., "kind": ...}` to stderr and exit 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use occlusion_attn::data::{self, Dataset};
use occlusion_attn::evaluation::{self, EvalConfig};
use occlusion_attn::experiment::{Ablation, EVAL_DIR, REPORT_FILE, TRAIN_DIR};
use occlusion_attn::gradcheck;
use occlusion_attn::model::ModelVariant;
use occlusion_attn::training::{self, TrainConfig, CHECKPOINT_FILE};

const THREADS_ENV: &str = "OCCLUSION_ATTN_THREADS";

#[derive(Parser)]
#[command(name = "occlusion-attn", version, about = "Occlusion-robust attention for masked face verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/ and eval/ image folders.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model; writes checkpoint, metrics log and resolved config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Image-folder root with train/ (and eval/) subdirectories.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Evaluate a trained run: clean and masked-probe TAR@FAR, localization.
    Eval {
        /// Run directory (or its checkpoint.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Comma-separated FAR values.
        #[arg(long, value_delimiter = ',')]
        far_grid: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write report.json (defaults to the run directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Export attention maps of evaluation images as PPM/PGM files.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Number of evaluation images; each is exported clean and masked.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Float64 finite-difference check of every op and assembled variant.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every (variant, seed) cell and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<ModelVariant>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        far_grid: Option<Vec<f64>>,
    },
}

/// A config file plus flag overrides; flags take precedence.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Mask augmentation probability.
    #[arg(long)]
    ma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(ma) = self.ma {
            cfg.ma_probability = ma;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.data.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.total_epochs = epochs;
            cfg.warmup_epochs = cfg.warmup_epochs.min(epochs.saturating_sub(1));
            cfg.margin_warmup_epochs = cfg.margin_warmup_epochs.min(epochs);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn eval_config(far_grid: Option<Vec<f64>>, seed: u64) -> Result<EvalConfig> {
    let mut cfg = EvalConfig { seed, ..EvalConfig::default() };
    if let Some(grid) = far_grid {
        if grid.is_empty() || grid.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("--far-grid values must lie in (0, 1], got {grid:?}");
        }
        cfg.far_grid = grid;
    }
    Ok(cfg)
}

fn run_dir(checkpoint: &Path) -> PathBuf {
    if checkpoint.file_name().is_some_and(|n| n == CHECKPOINT_FILE) {
        checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    } else {
        checkpoint.to_path_buf()
    }
}

fn eval_dataset(cfg: &TrainConfig, data_dir: Option<&Path>) -> Result<Dataset> {
    Ok(match data_dir {
        Some(dir) => data::load_image_folder(&dir.join(EVAL_DIR))?,
        None => data::synthetic_eval(&cfg.data)?,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out_dir } => {
            let cfg = config.resolve()?;
            let train = data::synthetic_train(&cfg.data)?;
            let eval = data::synthetic_eval(&cfg.data)?;
            data::write_image_folder(&train, &out_dir.join(TRAIN_DIR))?;
            data::write_image_folder(&eval, &out_dir.join(EVAL_DIR))?;
            println!(
                "wrote {} training and {} evaluation images of {} identities to {}",
                train.len(),
                eval.len(),
                train.num_identities(),
                out_dir.display()
            );
        }
        Command::Train { config, out_dir, data_dir } => {
            let cfg = config.resolve()?;
            println!("{}", cfg.to_json());
            let train_set = match &data_dir {
                Some(dir) => data::load_image_folder(&dir.join(TRAIN_DIR))?,
                None => data::synthetic_train(&cfg.data)?,
            };
            let trained = training::train(&cfg, &train_set, Some(&out_dir))?;
            if let Some(last) = trained.log.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Eval { checkpoint, data_dir, far_grid, seed, out_dir } => {
            let dir = run_dir(&checkpoint);
            let (cfg, model) = training::load_run(&dir)?;
            let seed = seed.unwrap_or(cfg.seed);
            let eval_cfg = eval_config(far_grid, seed)?;
            let dataset = eval_dataset(&cfg, data_dir.as_deref())?;
            let report = evaluation::evaluate(&model, &dataset, &eval_cfg, &cfg.augment(), cfg.ma_probability, seed)?;
            let text = serde_json::to_string_pretty(&report)?;
            let target = out_dir.unwrap_or(dir);
            fs::create_dir_all(&target).with_context(|| format!("creating {}", target.display()))?;
            write_text(&target.join(REPORT_FILE), &(text.clone() + "\n"))?;
            println!("{text}");
        }
        Command::Visualize { checkpoint, out_dir, data_dir, count, seed } => {
            let (cfg, model) = training::load_run(&run_dir(&checkpoint))?;
            let seed = seed.unwrap_or(cfg.seed);
            let dataset = eval_dataset(&cfg, data_dir.as_deref())?;
            let mask_cfg = cfg.augment();
            let samples: Vec<_> = dataset
                .samples
                .iter()
                .take(count)
                .enumerate()
                .flat_map(|(i, s)| [s.clone(), evaluation::masked_probe(s, &mask_cfg, seed, i)])
                .collect();
            let written = evaluation::export_attention(&model, &samples, &out_dir)?;
            println!("wrote {} files to {}", written.len(), out_dir.display());
        }
        Command::Gradcheck { seed } => {
            let results = gradcheck::full_suite(seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                bail!("{failed} gradient checks exceeded tolerance");
            }
        }
        Command::Ablate { config, variants, seeds, out_dir, data_dir, far_grid } => {
            let base = config.resolve()?;
            let ablation = Ablation {
                eval: eval_config(far_grid, base.seed)?,
                base,
                variants,
                seeds,
                data_dir,
                out_dir: Some(out_dir),
            };
            let (report, cells) = ablation.run()?;
            print!("{}", report.to_text());
            let failed = cells.iter().filter(|c| c.report.is_none()).count();
            if failed > 0 {
                bail!("{failed} of {} ablation cells failed", cells.len());
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .downcast_ref::<occlusion_attn::Error>()
        .map_or("error", occlusion_attn::Error::kind);
    // Core errors already embed their source in the message; skip repeats.
    let mut message = String::new();
    for cause in err.chain().map(ToString::to_string) {
        if !message.contains(&cause) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&cause);
        }
    }
    let message = message.replace('\n', " ");
    serde_json::json!({ "error": message, "kind": kind }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.kind().to_string();
            let detail = e.to_string();
            let detail = detail
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let detail = detail.trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": detail, "kind": "usage", "reason": message }));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
