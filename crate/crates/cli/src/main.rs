mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use pvvlm::dataio::{
    build_samples, resample_2min, split_chronological, DatasetLayout, DatasetSplit, SampleOptions, SampleRecord,
};
use pvvlm::evaluation::{evaluate, run_ablation, transfer_eval, ForecastReport, HorizonData};
use pvvlm::fusion::{ModelConfig, ModelParams, Variant};
use pvvlm::synthgen::write_dataset;
use pvvlm::training::{history_csv, load_checkpoint, param_hash, save_checkpoint, train};

use config::{RunConfig, Usage};

const CHECKPOINT_FILE: &str = "checkpoint.pvvlm";

/// Multimodal intra-hour PV power forecaster.
///
/// Settings are `key = value` pairs read from `--config FILE` and
/// overridden by `--key value` arguments.
#[derive(Parser)]
#[command(name = "pvvlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sky-camera and power dataset into --out.
    Synth(Args),
    /// Train on --data and write checkpoint.pvvlm and history.csv to --out.
    Train(Args),
    /// Evaluate --checkpoint on the test split of --data.
    Eval(Args),
    /// Train and test all six variants at every horizon in --horizons.
    Ablate(Args),
    /// Evaluate --checkpoint on the test split of --target without fine-tuning.
    Transfer(Args),
    /// Forecast one sample (--index, default the last) of --data.
    Forecast(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "--KEY VALUE")]
    settings: Vec<String>,
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = cfg.path("out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn sample_options(cfg: &ModelConfig, tolerance: i64, night: f32) -> SampleOptions {
    SampleOptions {
        time_tolerance_s: tolerance,
        night_fraction: night,
        images_per_sample: cfg.frames,
        frame_stride: cfg.frame_stride,
        ..SampleOptions::new(cfg.horizon)
    }
}

struct Loaded {
    power: pvvlm::dataio::PowerSeries,
    images: Vec<pvvlm::dataio::SkyImage>,
}

impl Loaded {
    fn read(dir: &Path) -> anyhow::Result<Self> {
        let (power, images) = DatasetLayout::new(dir)
            .load()
            .with_context(|| format!("loading dataset {}", dir.display()))?;
        info!("loaded {} power rows and {} images from {}", power.len(), images.len(), dir.display());
        Ok(Self {
            power: resample_2min(&power),
            images,
        })
    }

    fn camera_size(&self) -> anyhow::Result<usize> {
        match self.images.first() {
            Some(img) if img.width == img.height => Ok(img.width),
            Some(img) => bail!("camera frames must be square, found {}x{}", img.width, img.height),
            None => bail!("dataset has no images"),
        }
    }

    fn samples(&self, model: &ModelConfig, cfg: &RunConfig) -> anyhow::Result<Vec<SampleRecord>> {
        let opts = sample_options(model, cfg.get("time_tolerance_s")?, cfg.get("night_fraction")?);
        let (samples, stats) = build_samples(&self.power, &self.images, &opts)?;
        info!("{} samples ({stats:?})", samples.len());
        Ok(samples)
    }

    fn split(&self, model: &ModelConfig, cfg: &RunConfig) -> anyhow::Result<DatasetSplit> {
        let split = split_chronological(self.samples(model, cfg)?)?;
        let (a, b, c) = split.sizes();
        info!("split train {a} / val {b} / test {c}");
        Ok(split)
    }
}

fn report_line(r: &ForecastReport) -> String {
    let r2 = r.r2.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    format!(
        "horizon_min={} n={} rmse_kw={:.4} mae_kw={:.4} r2={r2}",
        r.horizon_minutes, r.n_samples, r.rmse, r.mae
    )
}

fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = out_dir(cfg)?;
    let scene = cfg.scene()?;
    let days = cfg.get("days")?;
    let manifest = write_dataset(days, &scene, &out)?;
    cfg.write_resolved(&out)?;
    print!("{}", manifest.to_text());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = cfg.existing_path("data")?;
    let out = out_dir(cfg)?;
    let loaded = Loaded::read(&data)?;
    let model_cfg = cfg.model(cfg.get("horizon")?, loaded.camera_size()?)?;
    let train_cfg = cfg.train()?;
    let split = loaded.split(&model_cfg, cfg)?;
    let model = ModelParams::init(model_cfg, train_cfg.seed)?;
    let outcome = train(&split, model, &train_cfg)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    cfg.write_resolved(&out)?;
    println!(
        "best epoch {} val {:.6} params {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val,
        param_hash(&outcome.checkpoint.model.store)
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&cfg.existing_path("checkpoint")?)?;
    let data = cfg.existing_path("data")?;
    let out = out_dir(cfg)?;
    let split = Loaded::read(&data)?.split(&ckpt.model.config, cfg)?;
    let report = evaluate(&ckpt.model, &split.test)?;
    fs::write(out.join("per_sample.csv"), report.per_sample_csv())?;
    cfg.write_resolved(&out)?;
    println!("{}", report_line(&report));
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = cfg.existing_path("data")?;
    let out = out_dir(cfg)?;
    let loaded = Loaded::read(&data)?;
    let base = cfg.model(cfg.get("horizon")?, loaded.camera_size()?)?;
    let train_cfg = cfg.train()?;
    let mut horizons = Vec::new();
    for h in cfg.horizons()? {
        let c = pvvlm::evaluation::config_for_horizon(&base, h, Variant::Proposed);
        horizons.push(HorizonData {
            horizon_steps: h,
            split: loaded.split(&c, cfg)?,
        });
    }
    let report = run_ablation(&horizons, &base, &train_cfg, &Variant::ALL)?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    cfg.write_resolved(&out)?;
    print!("{}", report.to_csv());
    let failed = report.cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        bail!("{failed} ablation cells failed");
    }
    Ok(())
}

fn cmd_transfer(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.raw("no_finetune") != Some("true") {
        return Err(Usage("transfer never fine-tunes; --no-finetune cannot be disabled".into()).into());
    }
    let ckpt = load_checkpoint(&cfg.existing_path("checkpoint")?)?;
    let target = cfg.existing_path("target")?;
    let out = out_dir(cfg)?;
    let split = Loaded::read(&target)?.split(&ckpt.model.config, cfg)?;
    let t = transfer_eval(&ckpt, &split.test)?;
    fs::write(out.join("per_sample.csv"), t.report.per_sample_csv())?;
    cfg.write_resolved(&out)?;
    println!("{}", report_line(&t.report));
    println!("params {} (unchanged)", t.hash_after);
    Ok(())
}

fn cmd_forecast(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&cfg.existing_path("checkpoint")?)?;
    let data = cfg.existing_path("data")?;
    let out = out_dir(cfg)?;
    let samples = Loaded::read(&data)?.samples(&ckpt.model.config, cfg)?;
    let index = cfg.opt::<usize>("index")?.unwrap_or(samples.len() - 1);
    let Some(sample) = samples.get(index) else {
        return Err(Usage(format!("--index {index} out of range for {} samples", samples.len())).into());
    };
    let report = evaluate(&ckpt.model, std::slice::from_ref(sample))?;
    fs::write(out.join("per_sample.csv"), report.per_sample_csv())?;
    cfg.write_resolved(&out)?;
    for row in &report.predictions {
        println!("{:.4}", row.yhat_kw);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (args, f): (_, fn(&RunConfig) -> anyhow::Result<()>) = match cli.command {
        Command::Synth(a) => (a, cmd_synth),
        Command::Train(a) => (a, cmd_train),
        Command::Eval(a) => (a, cmd_eval),
        Command::Ablate(a) => (a, cmd_ablate),
        Command::Transfer(a) => (a, cmd_transfer),
        Command::Forecast(a) => (a, cmd_forecast),
    };
    let cfg = RunConfig::resolve(&args.settings)?;
    f(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PVVLM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
