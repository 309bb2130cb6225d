//! `bialign`: dataset generation, training, evaluation, ablation, gradient
//! checks and visual dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bialign::checkpoint::Checkpoint;
use bialign::config::parse_size;
use bialign::data::{generate_dataset, load_sample, load_split, SceneSpec};
use bialign::gradcheck::suite;
use bialign::train::{ablate, evaluate, train, RunConfig, TrainState, CSV_HEADER};
use bialign::visuals::dump_visuals;
use bialign::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bialign", version, about = "Two-path segmentation with bidirectional gated flow alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as `<out>/{train,val}/<index>_{img.ppm,lab.pgm}`.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long)]
        count: usize,
        /// Validation samples [default: count / 4, at least 1].
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Canvas size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Train on `<data>/train` and write a checkpoint plus a CSV metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` run config; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log [default: <out>.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train the six alignment / spatial-loss configurations and tabulate them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split the trained models are scored on.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Compare analytic and central-difference gradients.
    Gradcheck {
        /// Check a single operator group.
        #[arg(long)]
        op: Option<String>,
    },
    /// Write prediction, flow, gate and indicator images for one sample.
    DumpVisuals {
        #[arg(long)]
        ckpt: PathBuf,
        /// A `*_img.ppm` file; its `*_lab.pgm` must sit next to it.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} gradient check(s) above tolerance")]
    GradCheck(usize),
    #[error("{source}")]
    Core {
        #[from]
        source: Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::GradCheck(_) => 3,
            CliError::Core { source } => match source {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                Error::NonFinite(_) => 3,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, count, val_count, seed, classes, size } => {
            let (height, width) = parse_size(&size).map_err(|e| CliError::Usage(e.to_string()))?;
            let spec = SceneSpec { num_classes: classes, height, width, ..SceneSpec::default() };
            let val = val_count.unwrap_or((count / 4).max(1));
            generate_dataset(&out, &spec, [count, val], seed)?;
            println!("wrote {count} train and {val} val samples to {}", out.display());
            Ok(())
        }
        Command::Train { data, config, out, log } => {
            let run = load_config(config.as_deref())?;
            let log = log.unwrap_or_else(|| with_suffix(&out, ".csv"));
            run_train(&run, &data, &out, &log)
        }
        Command::Eval { ckpt, data, split } => {
            let mut state = Checkpoint::load(&ckpt)?.into_state()?;
            let samples = load_split(&data, &split)?;
            let report = evaluate(&mut state.model, &samples, bialign::IGNORE_INDEX)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Ablate { data, out, config, split } => {
            let run = load_config(config.as_deref())?;
            let train_set = load_split(&data, "train")?;
            let eval_set = load_split(&data, &split)?;
            let table = ablate(&run, &train_set, &eval_set, |label, row| {
                if row.iter % 50 == 0 || row.iter == run.train.total_iters {
                    eprintln!("{label}: iter {} loss {:.4}", row.iter, row.loss.total);
                }
            })?;
            let text = table.render();
            fs::write(&out, &text).map_err(Error::from)?;
            print!("{text}");
            Ok(())
        }
        Command::Gradcheck { op } => {
            let results = suite::run(op.as_deref())?;
            for r in &results {
                println!("{}", r.render());
            }
            match results.iter().filter(|r| !r.passed()).count() {
                0 => Ok(()),
                n => Err(CliError::GradCheck(n)),
            }
        }
        Command::DumpVisuals { ckpt, sample, out } => {
            let mut state = Checkpoint::load(&ckpt)?.into_state()?;
            let sample = load_sample(&sample)?;
            for path in dump_visuals(&mut state.model, &sample, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Train and write the final checkpoint. When a step fails the state still
/// holds the last good parameters, and those are written before exiting.
fn run_train(run: &RunConfig, data: &Path, out: &Path, log: &Path) -> Result<()> {
    let train_set = load_split(data, "train")?;
    let val_set = match load_split(data, "val") {
        Ok(v) => Some(v),
        Err(Error::Dataset { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let mut state = TrainState::new(run)?;
    let mut csv = BufWriter::new(File::create(log).map_err(Error::from)?);
    writeln!(csv, "{CSV_HEADER}").map_err(Error::from)?;

    let eval_every = run.train.eval_every;
    let result = train(&mut state, run, &train_set, val_set.as_deref(), |row| {
        writeln!(csv, "{}", row.to_csv())?;
        if let Some(m) = row.val_miou {
            eprintln!("iter {} loss {:.4} val mIoU {:.4}", row.iter, row.loss.total, m);
        }
        if eval_every > 0 && row.iter % eval_every == 0 {
            csv.flush()?;
        }
        Ok(())
    });
    csv.flush().map_err(Error::from)?;
    if let Err(e) = result {
        Checkpoint::from_state(&state)?.save(out)?;
        eprintln!("stopped at iteration {}; last good state written to {}", state.iteration, out.display());
        return Err(e.into());
    }
    Checkpoint::from_state(&state)?.save(out)?;
    println!("wrote {} after {} iterations (log {})", out.display(), state.iteration, log.display());
    Ok(())
}
