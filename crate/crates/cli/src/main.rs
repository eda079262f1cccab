//! `easyfirst` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/checkpoint/config error,
//! 3 numerical abort.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use easyfirst_core::datagen::{self, Sample, Split, SplitCounts};
use easyfirst_core::easyfirst::DecodeOptions;
use easyfirst_core::harness::{self, BenchConfig};
use easyfirst_core::training::{self, Precision, TrainOutputs};
use easyfirst_core::{checkpoint, Error, ExperimentConfig, Model, ParamStore};
use easyfirst_tensor::Element;

#[derive(Parser)]
#[command(
    name = "easyfirst",
    version,
    about = "Easy-first parallel text recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Use only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render train/val/test splits as graymaps plus index files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
        #[arg(long, default_value_t = 2_000)]
        test: usize,
    },
    /// Train; writes checkpoint.bin and metrics.tsv under --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Read samples from this directory instead of rendering them.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Easy-first (or teacher greedy) accuracy report.
    Eval {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        no_eos_postprocess: bool,
        /// Decode with the autoregressive teacher instead.
        #[arg(long)]
        greedy: bool,
    },
    /// Accuracy and latency per iteration count.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10,30")]
        iterations: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        latency_runs: usize,
    },
    /// Single-threaded latency of K=1, K=5 and teacher greedy decoding.
    Bench {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 200)]
        runs: usize,
    },
    /// Cosine similarity matrices of per-position FFN outputs.
    FfnSim {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Per-iteration decode trace as JSON lines.
    Trace {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        probabilities: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.train.data_seed = seed;
    }
    Ok(cfg)
}

fn load_source(
    source: &Source,
) -> Result<(ExperimentConfig, Model<f32>, ParamStore<f32>, Vec<Sample>), Error> {
    let (cfg, model, params) = checkpoint::load::<f32>(&source.checkpoint)?;
    let split = Split::ALL
        .into_iter()
        .find(|s| s.name() == source.split)
        .ok_or_else(|| Error::config(format!("unknown split {:?}", source.split)))?;
    let mut samples = datagen::load_split(&source.dataset, split)?;
    if let Some(n) = source.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::data("selected split is empty"));
    }
    Ok((cfg, model, params, samples))
}

fn write_out(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn pick(samples: &[Sample], index: usize) -> Result<&Sample, Error> {
    samples.get(index).ok_or_else(|| {
        Error::data(format!(
            "index {index} outside the split of {}",
            samples.len()
        ))
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            common,
            train,
            val,
            test,
        } => {
            let cfg = load_config(&common)?;
            let counts = SplitCounts { train, val, test };
            let m = &cfg.model;
            datagen::gen_dataset(
                &common.out,
                counts,
                cfg.train.data_seed,
                &cfg.render,
                m.image_height,
                m.image_width,
            )?;
            println!(
                "wrote {} samples to {}",
                counts.total(),
                common.out.display()
            );
        }
        Command::Train {
            common,
            dataset,
            iterations,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = iterations {
                cfg.train.iterations = k;
            }
            cfg.validate()?;
            let (train_set, val_set) = match dataset {
                Some(dir) => (
                    datagen::load_split(&dir, Split::Train)?,
                    datagen::load_split(&dir, Split::Val)?,
                ),
                None => {
                    let (m, t) = (&cfg.model, &cfg.train);
                    let gen = |split, n| {
                        datagen::generate(
                            t.data_seed,
                            split,
                            n,
                            &cfg.render,
                            m.image_height,
                            m.image_width,
                        )
                    };
                    (
                        gen(Split::Train, t.train_samples)?,
                        gen(Split::Val, t.val_samples)?,
                    )
                }
            };
            fs::create_dir_all(&common.out)?;
            match cfg.train.precision {
                Precision::F32 => train_with::<f32>(&cfg, &train_set, &val_set, &common.out)?,
                Precision::F64 => train_with::<f64>(&cfg, &train_set, &val_set, &common.out)?,
            }
        }
        Command::Eval {
            source,
            out,
            iterations,
            no_eos_postprocess,
            greedy,
        } => {
            let (cfg, model, params, samples) = load_source(&source)?;
            let report = if greedy {
                harness::evaluate_teacher(&model, &params, &samples)?
            } else {
                let mut options = DecodeOptions::new(
                    cfg.model.max_len,
                    iterations.unwrap_or(cfg.train.iterations),
                );
                options.eos_postprocess = !no_eos_postprocess;
                harness::evaluate(&model, &params, &samples, options, cfg.train.batch_size)?.0
            };
            write_out(&out, &report.to_tsv())?;
            println!(
                "word_accuracy {:.4} char_accuracy {:.4}",
                report.word_accuracy, report.char_accuracy
            );
        }
        Command::Sweep {
            source,
            out,
            iterations,
            latency_runs,
        } => {
            let (cfg, model, params, samples) = load_source(&source)?;
            let bench = BenchConfig {
                warmup: latency_runs.min(20),
                runs: latency_runs.max(1),
            };
            let rows = harness::iteration_sweep(
                &model,
                &params,
                &samples,
                &iterations,
                cfg.train.batch_size,
                bench,
            )?;
            let table = harness::sweep_tsv(&rows);
            write_out(&out, &table)?;
            print!("{table}");
        }
        Command::Bench {
            source,
            out,
            warmup,
            runs,
        } => {
            let (_, model, params, samples) = load_source(&source)?;
            let lengths: Vec<usize> = (1..=model.config.max_len).collect();
            let report = harness::bench_latency(
                &model,
                &params,
                &samples,
                &lengths,
                BenchConfig { warmup, runs },
            )?;
            write_out(&out, &report.to_tsv())?;
            print!("{}", report.to_tsv());
        }
        Command::FfnSim { source, out, index } => {
            let (_, model, params, samples) = load_source(&source)?;
            let sim = harness::export_ffn_similarity(&model, &params, pick(&samples, index)?)?;
            write_out(&out, &sim.to_tsv())?;
            println!(
                "mean off-diagonal: parallel {:.4} teacher {:.4}",
                harness::mean_off_diagonal(&sim.parallel),
                harness::mean_off_diagonal(&sim.teacher)
            );
        }
        Command::Trace {
            source,
            out,
            index,
            iterations,
            probabilities,
        } => {
            let (cfg, model, params, samples) = load_source(&source)?;
            let mut options = DecodeOptions::new(
                cfg.model.max_len,
                iterations.unwrap_or(cfg.train.iterations),
            );
            options.record_probabilities = probabilities;
            let decoded =
                harness::decode_with_trace(&model, &params, pick(&samples, index)?, options)?;
            write_out(&out, &decoded.trace.to_jsonl())?;
            println!("{}", decoded.text);
        }
    }
    Ok(())
}

fn train_with<T: Element>(
    cfg: &ExperimentConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out: &Path,
) -> Result<(), Error> {
    let (model, mut params) = Model::<T>::build(&cfg.model, cfg.train.seed)?;
    let mut metrics = io::BufWriter::new(fs::File::create(out.join("metrics.tsv"))?);
    let outputs = TrainOutputs {
        metrics: Some(&mut metrics),
        checkpoint: Some(out.join("checkpoint.bin")),
        dump: Some(out.join("nonfinite_batch.txt")),
    };
    let report = training::train(&model, &mut params, train_set, val_set, cfg, outputs)?;
    metrics.flush()?;
    println!(
        "steps {} final {} val_accuracy {}",
        report.steps,
        report
            .last
            .map_or_else(|| "-".to_string(), |l| l.to_string()),
        report
            .val_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
    );
    Ok(())
}
