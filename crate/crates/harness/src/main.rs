use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kpose::model::{Model, ModelConfig};
use kpose::synthdata::{make_dataset, Dataset, DatasetConfig, Split};
use kpose_harness::ablation::run_ablation_suite;
use kpose_harness::checkpoint::Checkpoint;
use kpose_harness::config::TrainConfig;
use kpose_harness::eval::{baseline_eval, evaluate, oracle_eval, BaselineKind, EvalReport};
use kpose_harness::macs::count_macs;
use kpose_harness::train::{load_split, train};
use kpose_harness::visualize::visualize;
use kpose_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "kpose", version, about = "Relative rotation from two views via keypoints and weighted Procrustes")]
struct Cli {
    /// Worker threads (1 gives bitwise-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic train/test dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_test: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, requires = "max_angle")]
        min_angle: Option<f64>,
        #[arg(long, requires = "min_angle")]
        max_angle: Option<f64>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Variant switch, e.g. `no_cross_attn`; repeatable.
        #[arg(long)]
        ablation: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON-lines log file (stdout when absent).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Solve from renderer ground-truth correspondences instead of the network.
        #[arg(long)]
        oracle: bool,
    },
    /// Score a model-free predictor.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and evaluate every ablation variant, writing a CSV table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget_epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic inference cost in giga-MACs.
    Macs {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump heatmaps, reconstructions and pose arrows for one test pair.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn base_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), |p| TrainConfig::from_file(p))
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.save(path)?;
    println!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, n_train, n_test, seed, min_angle, max_angle, size } => {
            let angle_range = min_angle.zip(max_angle).map(|(a, b)| [a, b]);
            let meta = make_dataset(&DatasetConfig { n_train, n_test, seed, angle_range, size }, &out)?;
            println!("wrote {} train and {} test pairs to {}", meta.counts.train, meta.counts.test, out.display());
        }
        Command::Train { data, out, epochs, batch, lr, seed, ablation, config, resume, log } => {
            let mut cfg = base_config(config.as_ref())?;
            cfg.data = data;
            cfg.checkpoint = out;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch.unwrap_or(cfg.batch_size);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.seed = seed.unwrap_or(cfg.seed);
            for name in &ablation {
                cfg.model.ablation.enable(name)?;
            }
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| HarnessError::Io { path: p.display().to_string(), source })?)),
                None => Box::new(std::io::stdout().lock()),
            };
            let ck = train(cfg, resume, &mut sink)?;
            sink.flush().map_err(|source| HarnessError::Io { path: "<log>".into(), source })?;
            eprintln!("trained {} epochs ({} steps); checkpoint at {}", ck.epoch, ck.step, ck.config.checkpoint.display());
        }
        Command::Eval { ckpt, data, report, split, oracle } => {
            let rep = if oracle {
                let cfg = match &ckpt {
                    Some(p) => Checkpoint::load(p)?.config.model,
                    None => ModelConfig { image_size: Dataset::open(&data, split.into())?.size(), ..ModelConfig::default() },
                };
                oracle_eval(&Model::new(cfg)?, &load_split(&data, split.into())?)?
            } else {
                let ckpt = ckpt.ok_or_else(|| HarnessError::Config("eval needs --ckpt unless --oracle is given".into()))?;
                evaluate(&Checkpoint::load(&ckpt)?, &data, split.into())?
            };
            write_report(&rep, &report)?;
        }
        Command::Baseline { kind, data, seed, report, split } => {
            write_report(&baseline_eval(kind, &load_split(&data, split.into())?, seed)?, &report)?;
        }
        Command::Ablate { data, out, budget_epochs, seed, config } => {
            let mut cfg = base_config(config.as_ref())?;
            cfg.data = data;
            cfg.seed = seed.unwrap_or(cfg.seed);
            for row in run_ablation_suite(&cfg, &out, budget_epochs)? {
                println!("{:<14} mAE={:>6.1}° Acc@30={:.3} Acc@15={:.3} GMACs={:.4}", row.variant, row.mae_deg, row.acc30, row.acc15, row.gmacs);
            }
        }
        Command::Macs { config } => {
            let cfg = base_config(config.as_ref())?;
            cfg.validate()?;
            println!("{:.6}", count_macs(&cfg.model)?);
        }
        Command::Inspect { ckpt, data, sample, out, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let pair = Dataset::open(&data, split.into())?.get(sample, false)?;
            let model = Model::new(ck.config.model.clone())?;
            for path in visualize(&model, &ck.params, &pair, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
