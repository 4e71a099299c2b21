use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tspm::experiments::{run_ablation, sweep, ExperimentTable, Splits, SweepParam};
use tspm::features::{generate_synthetic, load_split, write_dataset, Dataset, Split, SynthConfig};
use tspm::inspect::{find_sample, heat_csv, heat_pgm, inspect_sample, merged_csv, spatial_maps, temporal_csv};
use tspm::prompt::Registry;
use tspm::train::{load_model, prediction_records, report, run_model, train, TrainConfig};

#[derive(Parser)]
#[command(name = "tspm", version, about = "Temporal-spatial perception model for audio-visual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal dataset.
    GenData {
        /// Generator config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Template registry (JSON); the built-in one when omitted.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Train a model. Writes CKPT, CKPT.best, their `.config.json` files and
    /// CKPT.history.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Record wall-clock seconds in the report.
        #[arg(long)]
        timing: bool,
        /// Per-sample predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train and test the full model and every single-component ablation.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Table as JSON; markdown always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a single parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump what a checkpoint attends to for one sample.
    Inspect {
        #[arg(value_enum)]
        what: View,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum View {
    Temporal,
    Spatial,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load(dir: &Path, split: Split) -> Result<Dataset> {
    load_split(dir, split).with_context(|| format!("loading {split} split from {}", dir.display()))
}

/// Train, optional non-empty val, and test splits.
fn load_all(dir: &Path) -> Result<(Dataset, Option<Dataset>, Dataset)> {
    let val = load(dir, Split::Val)?;
    Ok((
        load(dir, Split::Train)?,
        (!val.samples.is_empty()).then_some(val),
        load(dir, Split::Test)?,
    ))
}

fn emit_table(table: &ExperimentTable, out: Option<&Path>) -> Result<()> {
    print!("{}", table.to_markdown());
    if let Some(p) = out {
        write_json(p, table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            out,
            registry,
        } => {
            let cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            let registry = match registry {
                Some(p) => Registry::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => Registry::builtin(),
            };
            let data = generate_synthetic(&cfg, seed, &registry)?;
            write_dataset(&out, &data)?;
            for split in Split::ALL {
                eprintln!("{split}: {} samples", data.split(split).samples.len());
            }
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = train_config(config.as_deref(), seed)?;
            let (tr, val, _) = load_all(&data)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let outcome = train(&tr, val.as_ref(), &cfg, Some(&out))?;
            for h in &outcome.history {
                let val = h.val_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4}  val {val}", h.epoch, h.lr, h.train_loss);
            }
            eprintln!("best epoch {}", outcome.best_epoch);
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report: out,
            timing,
            predictions,
        } => {
            let split: Split = split.parse()?;
            let model = load_model(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = load(&data, split)?;
            let started = Instant::now();
            let results = run_model(&model, &ds)?;
            let mut rep = report(&model, &ds, &results)?;
            if timing {
                rep.seconds = Some(started.elapsed().as_secs_f64());
            }
            write_json(&out, &rep)?;
            if let Some(p) = predictions {
                let mut text = String::new();
                for r in prediction_records(&ds, &results) {
                    text.push_str(&serde_json::to_string(&r)?);
                    text.push('\n');
                }
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!("{split} accuracy {:.4} over {} samples", rep.overall.accuracy, rep.overall.count);
        }
        Command::Ablate {
            config,
            data,
            seed,
            out,
        } => {
            let cfg = train_config(config.as_deref(), seed)?;
            let (tr, val, te) = load_all(&data)?;
            let splits = Splits {
                train: &tr,
                val: val.as_ref(),
                test: &te,
            };
            emit_table(&run_ablation(&cfg, splits)?, out.as_deref())?;
        }
        Command::Sweep {
            param,
            values,
            config,
            data,
            seed,
            out,
        } => {
            let param: SweepParam = param.parse()?;
            let cfg = train_config(config.as_deref(), seed)?;
            let (tr, val, te) = load_all(&data)?;
            let splits = Splits {
                train: &tr,
                val: val.as_ref(),
                test: &te,
            };
            emit_table(&sweep(param, &values, &cfg, splits)?, out.as_deref())?;
        }
        Command::Inspect {
            what,
            ckpt,
            data,
            sample,
            out,
        } => {
            let model = load_model(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let splits = Split::ALL
                .iter()
                .map(|&s| load(&data, s))
                .collect::<Result<Vec<_>>>()?;
            let (ds, index) = find_sample(&splits, &sample)?;
            let result = inspect_sample(&model, ds, index)?;
            fs::create_dir_all(&out)?;
            match what {
                View::Temporal => {
                    fs::write(out.join(format!("{sample}.temporal.csv")), temporal_csv(&result))?;
                }
                View::Spatial => {
                    let maps = spatial_maps(&result, model.config.tokens)?;
                    fs::write(out.join(format!("{sample}.merged.csv")), merged_csv(&maps))?;
                    fs::write(out.join(format!("{sample}.heat.csv")), heat_csv(&maps))?;
                    fs::write(out.join(format!("{sample}.heat.pgm")), heat_pgm(&maps))?;
                }
            }
            eprintln!(
                "{sample}: predicted {} (answer {}), segments {:?}",
                result.prediction.answer, ds.samples[index].answer, result.omega
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
