//! `gausshead` command-line interface.
//!
//! Every failure prints one JSON line `{"status":"error",...}` to stderr and
//! exits nonzero. `GAUSSHEAD_THREADS` sets the worker count.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gausshead::data::{generate_synthetic, Dataset, SynthSceneSpec, Track};
use gausshead::fusion::HeadModel;
use gausshead::gradcheck::{check_module, oracle_equivalence, GradcheckConfig, Module};
use gausshead::trainer::{evaluate, Stage, TrainConfig, Trainer};
use serde_json::json;

const THREADS_ENV: &str = "GAUSSHEAD_THREADS";
const ORACLE_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "gausshead", version, about = "Deformable Gaussian head reconstruction and rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic talking-head dataset.
    Synth {
        /// JSON scene spec; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a head model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON training config; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a condition track with a trained model.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, value_enum, default_value_t = Precision::Double)]
        precision: Precision,
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// PSNR and SSIM of a trained model on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Tile renderer against the per-pixel compositor on random scenes.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    All,
    Static,
    Motion,
    Finetune,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    Single,
    Double,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Render { .. } => "render",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Eval { .. } => "eval",
            Command::OracleCheck { .. } => "oracle-check",
        }
    }
}

fn error_line(command: &str, message: &str) -> String {
    json!({ "status": "error", "command": command, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("parse", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(name, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out } => {
            let spec: SynthSceneSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SynthSceneSpec::default(),
            };
            let manifest = generate_synthetic(&spec, &out)?;
            println!("{}", json!({ "status": "ok", "frames": manifest.frame_count, "out": out }));
        }
        Command::Train { data, out, stage, seed, config } => train(&data, &out, stage, seed, config.as_deref())?,
        Command::Render { ckpt, track, out } => {
            let model = HeadModel::load(&ckpt)?;
            let track = Track::load(&track)?;
            let cameras = track.cameras()?;
            let frames = model.render_sequence(&cameras, &track.conditions(), None)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, (img, _)) in frames.iter().enumerate() {
                img.save_png(&out.join(format!("{i:05}.png")))?;
            }
            println!("{}", json!({ "status": "ok", "frames": frames.len(), "out": out }));
        }
        Command::Gradcheck { module, precision, configs } => {
            if precision == Precision::Single {
                bail!("only double precision is supported for gradient checks");
            }
            let modules = match module {
                Some(m) => vec![m.parse::<Module>()?],
                None => Module::ALL.to_vec(),
            };
            let cfg = GradcheckConfig { configurations: configs, ..GradcheckConfig::default() };
            let mut failed = Vec::new();
            for m in modules {
                for r in check_module(m, &cfg)? {
                    println!("{}", json!({ "passed": r.passed(), "report": r }));
                    if !r.passed() {
                        failed.push(format!("{}.{}", r.module, r.class));
                    }
                }
            }
            if !failed.is_empty() {
                bail!("gradient checks failed: {}", failed.join(", "));
            }
        }
        Command::Eval { ckpt, data, split } => {
            let model = HeadModel::load(&ckpt)?;
            let dataset = Dataset::load(&data)?;
            let report = evaluate(&model, &dataset, &split)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::OracleCheck { scenes, seed } => {
            let r = oracle_equivalence(scenes, seed)?;
            let passed = r.max_color_diff <= ORACLE_TOLERANCE && r.max_alpha_diff <= ORACLE_TOLERANCE;
            println!("{}", json!({ "passed": passed, "report": r }));
            if !passed {
                bail!("tile and per-pixel renders differ by more than {ORACLE_TOLERANCE}");
            }
        }
    }
    Ok(())
}

fn train(data: &Path, out: &Path, stage: StageArg, seed: Option<u64>, config: Option<&Path>) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let only = match stage {
        StageArg::All => None,
        StageArg::Static => Some(Stage::Static),
        StageArg::Motion => Some(Stage::Motion),
        StageArg::Finetune => Some(Stage::Finetune),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = match only {
        None | Some(Stage::Static) => Trainer::new(&dataset, cfg.clone())?,
        Some(_) => {
            let model = HeadModel::load(out).context("a later stage continues from the checkpoint in --out")?;
            Trainer::with_model(&dataset, cfg.clone(), model)?
        }
    };
    let log_name = match only {
        None => "train_log.jsonl".to_string(),
        Some(s) => format!("train_log_{}.jsonl", s.name()),
    };
    let log_path = out.join(log_name);
    let log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    trainer = trainer.with_log(BufWriter::new(log)).with_checkpoint_dir(out.join("checkpoints"));
    let summaries = trainer.run(only)?;
    for s in &summaries {
        log::info!(
            "{} {}: {} iterations, final loss {:?}, {} primitives",
            s.stage.name(),
            s.branch.map_or("both", |b| b.name()),
            s.iterations,
            s.final_loss,
            s.n_primitives
        );
    }
    trainer.into_model().save(out)?;
    println!("{}", json!({ "status": "ok", "stages": summaries, "out": out }));
    Ok(())
}
