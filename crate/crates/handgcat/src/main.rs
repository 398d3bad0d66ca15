use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use handgcat::ablate::{self, Table};
use handgcat::checkpoint;
use handgcat::config::{Profile, RunConfig};
use handgcat::dataset::{self, Dataset};
use handgcat::evaluate::{evaluate, write_report};
use handgcat::gradcheck::check_all;
use handgcat::train::train;
use handgcat_core::synth::{Split, SynthConfig};
use handgcat_core::DType;

#[derive(Parser)]
#[command(name = "handgcat", version, about = "Hand mesh reconstruction from an image and a 2D pose")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Configuration shared by every subcommand.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Override any config key, e.g. `--set kgc.depth=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::profile(Profile::parse(&self.profile)?),
        };
        let mut ov = Vec::new();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        if let Some(p) = &self.precision {
            ov.push(format!("precision={p}"));
        }
        for (k, v) in extra {
            if let Some(v) = v {
                ov.push(format!("{k}={v}"));
            }
        }
        ov.extend(self.overrides.iter().cloned());
        let cfg = base.with_overrides(&ov)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        occlusion_level: Option<f64>,
        #[arg(long)]
        data_seed: Option<u64>,
        /// Also write the first N test images as PPM files.
        #[arg(long, default_value_t = 0)]
        ppm: usize,
    },
    /// Train a model and write its log and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Overfit the first N training samples with a constant learning rate.
        #[arg(long)]
        overfit: Option<usize>,
        /// Number of optimizer steps, ignoring the epoch count.
        #[arg(long)]
        steps: Option<usize>,
        /// Write a checkpoint every K epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a grid of configurations into one CSV table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// gcn_depth, cat_blocks or prior. Repeatable; default both architecture tables.
        #[arg(long = "table")]
        tables: Vec<String>,
        /// Seeds to repeat every configuration with.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of the reduced-width pipeline in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Individually checked coordinates per seed, inputs and parameters each.
        #[arg(long, default_value_t = 80)]
        coords: usize,
    },
}

fn opt<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn stderr_log(msg: &str) {
    eprintln!("{msg}");
}

fn load_data(dir: &Path, cfg: &mut RunConfig) -> Result<Dataset> {
    let ds = dataset::load(dir).with_context(|| format!("dataset {}", dir.display()))?;
    cfg.data.seed = ds.generator.seed;
    cfg.data.occlusion_level = ds.generator.occlusion_level;
    cfg.data.train = ds.train.len();
    cfg.data.test = ds.test.len();
    Ok(ds)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData { cfg, out, train, test, occlusion_level, data_seed, ppm } => {
            let c = cfg.load(&[
                ("data.train", opt(train)),
                ("data.test", opt(test)),
                ("data.occlusion_level", opt(occlusion_level)),
                ("data.seed", opt(data_seed)),
            ])?;
            let synth = SynthConfig { seed: c.data.seed, occlusion_level: c.data.occlusion_level, ..SynthConfig::default() };
            let ds = dataset::generate(&synth, c.data.train, c.data.test)?;
            dataset::save(&ds, &out)?;
            for (i, s) in ds.test.iter().take(ppm).enumerate() {
                dataset::export_ppm(s, &out.join(format!("test_{i:04}.ppm")))?;
            }
            let occ = ds.test.iter().map(|s| s.occlusion_ratio).sum::<f64>() / ds.test.len().max(1) as f64;
            eprintln!(
                "wrote {} train and {} test samples to {} (mean test occlusion {occ:.3})",
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
        }
        Cmd::Train { cfg, data, out, epochs, lr, batch, overfit, steps, checkpoint_every } => {
            let mut extra = vec![
                ("optimizer.epochs", opt(epochs)),
                ("optimizer.lr", opt(lr)),
                ("optimizer.batch", opt(batch)),
                ("train.max_steps", opt(steps)),
                ("train.checkpoint_every", opt(checkpoint_every)),
            ];
            if let Some(n) = overfit {
                extra.push(("train.subset", Some(n.to_string())));
                extra.push(("optimizer.decay_every", Some("0".into())));
                if batch.is_none() {
                    extra.push(("optimizer.batch", Some(n.to_string())));
                }
            }
            let mut c = cfg.load(&extra)?;
            let ds = load_data(&data, &mut c)?;
            let r = match c.precision {
                DType::F32 => train::<f32>(&c, &ds.train, Some(&out), &mut |m| stderr_log(m))?.report,
                DType::F64 => train::<f64>(&c, &ds.train, Some(&out), &mut |m| stderr_log(m))?.report,
            };
            println!("initial_loss {}\nfinal_loss {}\nsteps {}", r.initial_loss, r.final_loss, r.steps);
            if overfit.is_some() {
                let ratio = r.final_loss / r.initial_loss;
                println!("loss_ratio {ratio}");
                if !(ratio < 0.1) {
                    bail!("overfit run ended at {:.1}% of the initial loss", 100.0 * ratio);
                }
            }
        }
        Cmd::Evaluate { checkpoint: ckpt, data, split, out } => {
            let m = checkpoint::load_manifest(&ckpt)?;
            let split = Split::parse(&split)?;
            macro_rules! go {
                ($s:ty) => {{
                    let mut ck = checkpoint::load::<$s>(&ckpt)?;
                    let ds = load_data(&data, &mut ck.config)?;
                    let samples = ds.split(split);
                    if samples.is_empty() {
                        bail!("split {} of {} is empty", split.name(), data.display());
                    }
                    evaluate(&ck.config, &ck.model, &ck.params, samples)?
                }};
            }
            let report = match m.dtype {
                handgcat::blob::Dtype::F64 => go!(f64),
                _ => go!(f32),
            };
            write_report(&report, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Ablate { cfg, data, out, tables, seeds } => {
            let mut c = cfg.load(&[])?;
            let ds = load_data(&data, &mut c)?;
            let tables: Vec<Table> = if tables.is_empty() {
                vec![Table::Depth, Table::Blocks]
            } else {
                tables.iter().map(|t| Table::parse(t)).collect::<Result<_>>()?
            };
            let rows = ablate::run(&tables, &c, &seeds, &ds, &mut |m| stderr_log(m))?;
            if let Some(bad) = rows.iter().find(|r| !r.is_populated()) {
                bail!("ablation row {} seed {} has missing or non-finite values", bad.label, bad.seed);
            }
            ablate::write_csv(&rows, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
        Cmd::Gradcheck { seeds, coords } => {
            let checks = check_all(seeds, coords)?;
            let mut failed = 0;
            for c in &checks {
                let ok = c.passed();
                failed += usize::from(!ok);
                println!(
                    "{} {} seed {:>2}: inputs worst {:.2e}, params worst {:.2e}",
                    if ok { "ok  " } else { "FAIL" },
                    c.label,
                    c.seed,
                    c.inputs.worst_ratio,
                    c.params.worst_ratio
                );
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
