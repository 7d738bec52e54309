use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use polydistill::config::{Overrides, RunConfig};
use polydistill::pipeline::{cmd_synth, MultiMode, Workspace};
use polydistill::synth::SynthSpec;

/// Multi-teacher selective knowledge distillation for multilingual NMT.
#[derive(Parser)]
#[command(name = "pd", version)]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    check_every: Option<u64>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Distill,
    Always,
    Off,
}

impl From<Mode> for MultiMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Baseline => MultiMode::Baseline,
            Mode::Distill => MultiMode::Distill,
            Mode::Always => MultiMode::Always,
            Mode::Off => MultiMode::Off,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cipher pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML synthetic spec; the four-pair default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        train: usize,
        #[arg(long, default_value_t = 1_000)]
        dev: usize,
        #[arg(long, default_value_t = 1_000)]
        test: usize,
    },
    /// Learn the joint BPE model over every pair's training text.
    Prepare,
    /// Train individual models (every pair unless --pair is given).
    TrainTeacher {
        #[arg(long)]
        pair: Option<String>,
    },
    /// Export top-K teacher traces on the training data.
    ExportTopk {
        #[arg(long)]
        pair: Option<String>,
    },
    /// Train the multilingual student.
    TrainMulti {
        #[arg(long, value_enum, default_value = "distill")]
        mode: Mode,
        /// Run directory name below multi/; defaults to the mode.
        #[arg(long)]
        name: Option<String>,
    },
    /// Decode a split and score it with BLEU.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        name: Option<String>,
    },
    /// Distill the multilingual model back into an individual model.
    BackDistill {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pair: String,
        /// Start from the pair's teacher instead of a fresh model.
        #[arg(long)]
        from_teacher: bool,
    },
    /// Write teacher beam translations as a pseudo-parallel corpus.
    ExportSeqkd {
        #[arg(long)]
        pair: Option<String>,
    },
    /// Score perturbed copies of a model over a sigma grid.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// Replaces the configured grid; may be repeated.
        #[arg(long = "sigma")]
        sigmas: Vec<f64>,
    },
}

fn load_config(opts: &GlobalOpts) -> Result<RunConfig> {
    let mut config = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply(&Overrides {
        lambda: opts.lambda,
        tau: opts.tau,
        check_every: opts.check_every,
        topk: opts.topk,
        beam: opts.beam,
        alpha: opts.alpha,
        seed: opts.seed,
    })?;
    Ok(config)
}

/// Default report name for a model file: `<parent dir>-<file stem>`.
fn model_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let parent = path
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned());
    match (parent, stem) {
        (Some(p), Some(s)) => format!("{p}-{s}"),
        (None, Some(s)) => s,
        _ => "model".into(),
    }
}

fn selected(ws: &Workspace, pair: &Option<String>) -> Vec<String> {
    match pair {
        Some(p) => vec![p.clone()],
        None => ws.config.data.pairs.clone(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth {
        out,
        spec,
        train,
        dev,
        test,
    } = &cli.command
    {
        let seed = cli.opts.seed.unwrap_or(1);
        let spec = match spec {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SynthSpec::four_pairs(*train, *dev, *test, seed),
        };
        let manifest = cmd_synth(&spec, out).context("synth")?;
        println!("wrote {} files to {}", manifest.files.len(), out.display());
        return Ok(());
    }
    let ws = Workspace::new(load_config(&cli.opts)?)?;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Prepare => {
            let r = ws.prepare().context("prepare")?;
            println!("vocabulary {} ({} merges) -> {}", r.vocab_size, r.merges, r.bpe.display());
        }
        Command::TrainTeacher { pair } => {
            for code in selected(&ws, &pair) {
                let r = ws
                    .train_teacher(&code)
                    .with_context(|| format!("train-teacher {code}"))?;
                println!("{}: dev {:.2}, test {}", r.pair, r.dev_bleu, r.test.summary());
            }
        }
        Command::ExportTopk { pair } => {
            for code in selected(&ws, &pair) {
                let r = ws
                    .export_topk(&code)
                    .with_context(|| format!("export-topk {code}"))?;
                println!("{}: {} positions -> {}", r.pair, r.positions, r.path.display());
            }
        }
        Command::TrainMulti { mode, name } => {
            let r = ws
                .train_multi(mode.into(), name.as_deref())
                .context("train-multi")?;
            println!(
                "{}: best step {} dev BLEU {:?} -> {}",
                r.name,
                r.train.best_step,
                r.train.best_dev_bleu,
                r.best_checkpoint.display()
            );
        }
        Command::Evaluate {
            model,
            pair,
            split,
            name,
        } => {
            let name = name.unwrap_or_else(|| model_name(&model));
            for code in selected(&ws, &pair) {
                let r = ws
                    .evaluate(&model, &name, &code, &split)
                    .with_context(|| format!("evaluate {code} {split}"))?;
                println!("{} {}: {}", r.pair, r.split, r.bleu.summary());
            }
        }
        Command::BackDistill {
            model,
            pair,
            from_teacher,
        } => {
            let r = ws
                .back_distill(&model, &pair, from_teacher)
                .with_context(|| format!("back-distill {pair}"))?;
            println!(
                "{}: dev BLEU {:?} -> {:.2}",
                r.result.pair, r.result.before_dev_bleu, r.result.after_dev_bleu
            );
        }
        Command::ExportSeqkd { pair } => {
            for code in selected(&ws, &pair) {
                let r = ws
                    .export_seqkd(&code)
                    .with_context(|| format!("export-seqkd {code}"))?;
                println!("{}: {} sentences -> {}", r.pair, r.result.sentences, r.tgt.display());
            }
        }
        Command::Perturb {
            model,
            name,
            sigmas,
        } => {
            let name = name.unwrap_or_else(|| model_name(&model));
            let grid = (!sigmas.is_empty()).then_some(sigmas.as_slice());
            let r = ws.perturb(&model, &name, grid).context("perturb")?;
            for row in &r.rows {
                println!("sigma {}: dev loss {:.4}, dev BLEU {:.2}", row.sigma, row.dev_loss, row.dev_bleu);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PD_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
