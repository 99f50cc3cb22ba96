use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gebd_core::datamodel::{write_report, EvalReport, PipelineConfig, Preset};
use gebd_core::pipeline::{self, Workdir};
use gebd_core::synthgen::DatasetSpec;
use gebd_core::{evaluator, Error};

#[derive(Parser, Debug)]
#[command(name = "gebd", version, about = "Generic event boundary detection on synthetic videos")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; unset keys come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file of the subcommand (predictions or report).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    #[arg(long, global = true, default_value = "published")]
    preset: Preset,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test splits.
    Gen(GenArgs),
    TrainLocal,
    Featurize,
    TrainDecoder,
    /// Decode a split into a prediction file.
    Infer {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        /// Comma separated; defaults to the config's thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
    },
    /// gen, the four stages, then eval on the test split.
    RunAll(GenArgs),
}

#[derive(Args, Debug, Clone, Copy)]
struct GenArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 50)]
    test_count: usize,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

fn config(common: &Common) -> gebd_core::Result<PipelineConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = PipelineConfig::resolve(common.preset, common.config.as_deref(), &overrides)?;
    cfg.validate().map_err(Error::InvalidConfig)?;
    Ok(cfg)
}

fn print_table(report: &EvalReport) {
    println!(
        "{:>9} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}",
        "threshold", "tp", "fp", "fn", "precision", "recall", "f1"
    );
    for r in &report.rows {
        println!(
            "{:>9.3} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}",
            r.threshold, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
        );
    }
}

fn generate(work: &Workdir, cfg: &PipelineConfig, g: GenArgs) -> gebd_core::Result<()> {
    pipeline::generate_splits(work, g.count, g.test_count, &DatasetSpec::default(), cfg.seed)
}

fn run(cli: Cli) -> gebd_core::Result<()> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        // Only fails if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let work = Workdir::new(&common.workdir);
    let out_or = |default: PathBuf| common.out.clone().unwrap_or(default);
    match &cli.command {
        Command::Eval {
            pred,
            ann,
            thresholds,
        } => {
            let thresholds = if thresholds.is_empty() {
                config(common)?.rel_dis_thresholds
            } else {
                thresholds.clone()
            };
            if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::Invalid("thresholds must lie in [0, 1]".into()));
            }
            let report = evaluator::evaluate(pred, ann, &thresholds)?;
            print_table(&report);
            write_report(&report, &out_or(work.report()))
        }
        command => {
            let cfg = config(common)?;
            log::info!("config: {}", cfg.to_toml_string().replace('\n', "; "));
            match command {
                Command::Gen(g) => generate(&work, &cfg, *g),
                Command::TrainLocal => pipeline::run_train_local(&work, &cfg).map(drop),
                Command::Featurize => pipeline::run_featurize(&work, &cfg),
                Command::TrainDecoder => pipeline::run_train_decoder(&work, &cfg).map(drop),
                Command::Infer { split } => {
                    pipeline::run_infer(&work, &cfg, split, &out_or(work.predictions())).map(drop)
                }
                Command::RunAll(g) => {
                    generate(&work, &cfg, *g)?;
                    let report = pipeline::run_all(&work, &cfg)?;
                    print_table(&report);
                    if let Some(out) = &common.out {
                        copy_report(&work.report(), out)?;
                    }
                    Ok(())
                }
                Command::Eval { .. } => unreachable!(),
            }
        }
    }
}

fn copy_report(from: &Path, to: &Path) -> gebd_core::Result<()> {
    std::fs::copy(from, to)
        .map(drop)
        .map_err(|e| Error::io(to, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
