//! `niff` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use niff::bench;
use niff::config::RunConfig;
use niff::run::{self, CHECKPOINT_FILE};
use niff::NiffError;

#[derive(Parser)]
#[command(name = "niff", version, about = "Neural implicit frequency filters: train, evaluate, analyze, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoint.niff, metrics.csv and timing.csv into OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/checkpoint.niff.
        #[arg(long)]
        resume: bool,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (defaults to the one stored in the checkpoint).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Effective kernel sizes and PCA of every NIFF layer.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Microbenchmarks; writes rows to OUT and fitted summaries to OUT with a .fit.csv extension.
    Bench {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Spatial kernels of one NIFF layer as CSV and PGM.
    ExportKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer name (`layer3`) or index (`3`).
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Conv,
    Epoch,
}

fn exit_code(e: &NiffError) -> u8 {
    match e {
        NiffError::Config(_) | NiffError::InvalidArgument(_) => 1,
        NiffError::Io(_) | NiffError::Format { .. } | NiffError::Checkpoint(_) | NiffError::Shape(_) => 2,
        NiffError::Divergence { .. } | NiffError::NonFinite(_) => 3,
        NiffError::ShiftState(_) | NiffError::MissingState(_) => 3,
    }
}

fn set_threads() -> Result<(), NiffError> {
    let Ok(v) = std::env::var("NIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| NiffError::Config(format!("NIFF_THREADS = `{v}` is not a thread count")))?;
    // a second initialization in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), NiffError> {
    set_threads()?;
    match cli.cmd {
        Cmd::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = out.join(CHECKPOINT_FILE);
            if resume && !ckpt.exists() {
                return Err(NiffError::Checkpoint(format!(
                    "--resume given but {} does not exist",
                    ckpt.display()
                )));
            }
            let report = run::train_run(&cfg, &out, resume.then_some(ckpt.as_path()))?;
            for s in &report.history {
                println!(
                    "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  lr {:.5}",
                    s.epoch, s.train_loss, s.train_acc, s.test_acc, s.lr
                );
            }
            println!("params {}  checkpoint {}", report.param_count, report.checkpoint.display());
        }
        Cmd::Eval { checkpoint, data } => {
            let acc = run::eval_checkpoint(&checkpoint, data.as_deref())?;
            println!("test_acc {acc:.6}");
        }
        Cmd::Analyze { checkpoint, out, threshold } => {
            let rep = run::analyze_checkpoint(&checkpoint, &out, threshold)?;
            println!("layer,kind,side,mean_effective_size,frac_below_map");
            for l in &rep.layers {
                println!(
                    "{},{},{},{:.3},{:.3}",
                    l.name,
                    l.kind,
                    l.height.min(l.width),
                    l.mean_effective_size,
                    l.frac_below_map
                );
            }
            println!("all kernels below map side: {:.3}", rep.frac_below_map());
        }
        Cmd::Bench { suite, out, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.validate()?;
            match suite {
                Suite::Conv => {
                    let rep = bench::with_workers(cfg.bench.parallel, || bench::sweep_conv(&cfg.bench))??;
                    bench::write_report(&out, &rep)?;
                    print!("{}", rep.fit_csv());
                }
                Suite::Epoch => {
                    let rep = bench::epoch_suite(&cfg)?;
                    bench::write_epoch_report(&out, &rep)?;
                    print!("{}", rep.fit_csv());
                }
            }
        }
        Cmd::ExportKernels { checkpoint, layer, out } => {
            for p in run::export_kernels(&checkpoint, &layer, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
