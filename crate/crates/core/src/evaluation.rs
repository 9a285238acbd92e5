//! Error metrics, test-set evaluation, the ablation runner and transfer
//! evaluation.

use std::fmt::Write as _;

use crate::dataio::{format_timestamp, DatasetSplit, SampleRecord};
use crate::error::{Error, Result};
use crate::fusion::{ForwardTrace, ModelConfig, ModelParams, SampleFeatures, Variant};
use crate::training::{param_hash, precompute, train_features, Checkpoint, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the targets are constant and R² is undefined.
    pub r2: Option<f64>,
}

pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::shape(
            "metrics",
            format!("{} targets vs {} forecasts", y.len(), yhat.len()),
        ));
    }
    let n = y.len() as f64;
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        ss_res += (a - b) * (a - b);
        abs += (a - b).abs();
    }
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(Metrics {
        rmse: (ss_res / n).sqrt(),
        mae: abs / n,
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
    })
}

/// Repeats the last observed value over the horizon.
pub fn persistence_baseline(sample: &SampleRecord) -> Vec<f64> {
    let last = sample.input_window.last().copied().unwrap_or(0.0) as f64;
    vec![last; sample.horizon()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub anchor_time: i64,
    pub step: usize,
    pub y_kw: f64,
    pub yhat_kw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub horizon_minutes: usize,
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
    pub n_samples: usize,
    pub predictions: Vec<PredictionRow>,
}

impl ForecastReport {
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("anchor_time,step,y_kw,yhat_kw\n");
        for r in &self.predictions {
            let _ = writeln!(out, "{},{},{},{}", format_timestamp(r.anchor_time), r.step, r.y_kw, r.yhat_kw);
        }
        out
    }
}

fn horizon_minutes(samples: &[SampleRecord]) -> usize {
    samples
        .first()
        .map_or(0, |s| s.horizon() * s.cadence_s as usize / 60)
}

/// Pools every `(sample, step)` pair of `forecaster` output into one report.
pub fn evaluate_with<F>(samples: &[SampleRecord], mut forecaster: F) -> Result<ForecastReport>
where
    F: FnMut(usize, &SampleRecord) -> Result<Vec<f64>>,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let yhat = forecaster(i, s)?;
        if yhat.len() != s.target.len() {
            return Err(Error::shape(
                "evaluate",
                format!("forecast of {} steps for a {}-step target", yhat.len(), s.target.len()),
            ));
        }
        for (step, (&y, &p)) in s.target.iter().zip(&yhat).enumerate() {
            rows.push(PredictionRow {
                anchor_time: s.anchor_time,
                step: step + 1,
                y_kw: y as f64,
                yhat_kw: p,
            });
        }
    }
    let y: Vec<f64> = rows.iter().map(|r| r.y_kw).collect();
    let yhat: Vec<f64> = rows.iter().map(|r| r.yhat_kw).collect();
    let m = metrics(&y, &yhat)?;
    assert!(m.rmse >= m.mae - 1e-12, "rmse {} < mae {}", m.rmse, m.mae);
    Ok(ForecastReport {
        horizon_minutes: horizon_minutes(samples),
        rmse: m.rmse,
        mae: m.mae,
        r2: m.r2,
        n_samples: samples.len(),
        predictions: rows,
    })
}

/// Forecasts every sample with `model` and reports kW-space metrics.
pub fn evaluate(model: &ModelParams, samples: &[SampleRecord]) -> Result<ForecastReport> {
    evaluate_with(samples, |_, s| model.forward(s))
}

/// [`evaluate`] reusing precomputed features aligned with `samples`.
pub fn evaluate_features(model: &ModelParams, samples: &[SampleRecord], feats: &[SampleFeatures]) -> Result<ForecastReport> {
    if feats.len() != samples.len() {
        return Err(Error::InvalidArgument("features and samples differ in length".into()));
    }
    evaluate_with(samples, |i, _| model.predict(&feats[i], &mut ForwardTrace::default()))
}

pub fn persistence_report(samples: &[SampleRecord]) -> Result<ForecastReport> {
    evaluate_with(samples, |_, s| Ok(persistence_baseline(s)))
}

/// One horizon's data for the ablation runner.
#[derive(Clone, Debug)]
pub struct HorizonData {
    pub horizon_steps: usize,
    pub split: DatasetSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub horizon_minutes: usize,
    pub outcome: std::result::Result<ForecastReport, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant, horizon_minutes: usize) -> Option<&ForecastReport> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.horizon_minutes == horizon_minutes)
            .and_then(|c| c.outcome.as_ref().ok())
    }

    /// `variant,horizon_min,rmse_kw,mae_kw,r2`; failed cells carry `FAILED`
    /// in the metric columns, undefined R² is written `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,horizon_min,rmse_kw,mae_kw,r2\n");
        for c in &self.cells {
            match &c.outcome {
                Ok(r) => {
                    let r2 = r.r2.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
                    let _ = writeln!(out, "{},{},{:.6},{:.6},{r2}", c.variant, c.horizon_minutes, r.rmse, r.mae);
                }
                Err(_) => {
                    let _ = writeln!(out, "{},{},FAILED,FAILED,FAILED", c.variant, c.horizon_minutes);
                }
            }
        }
        out
    }
}

/// Model configuration for `horizon` steps derived from `base`: the input
/// length is twice the horizon.
pub fn config_for_horizon(base: &ModelConfig, horizon: usize, variant: Variant) -> ModelConfig {
    let mut c = base.clone();
    c.horizon = horizon;
    c.patch.input_len = 2 * horizon;
    c.ablation = variant.config();
    c
}

/// Trains and tests every variant at every horizon with the same seeds.
/// Parameter-independent features are computed once per horizon and shared.
pub fn run_ablation(
    data: &[HorizonData],
    base: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for hd in data {
        let full = ModelParams::init(config_for_horizon(base, hd.horizon_steps, Variant::Proposed), cfg.seed)?;
        let train = precompute(&full, &hd.split.train)?;
        let val = precompute(&full, &hd.split.val)?;
        let test = precompute(&full, &hd.split.test)?;
        let minutes = hd.horizon_steps * crate::dataio::RESAMPLED_CADENCE_S as usize / 60;
        for &variant in variants {
            let outcome = (|| {
                let model = ModelParams::init(config_for_horizon(base, hd.horizon_steps, variant), cfg.seed)?;
                let trained = train_features(&train, &val, model, cfg)?;
                evaluate_features(&trained.checkpoint.model, &hd.split.test, &test)
            })();
            match &outcome {
                Ok(r) => log::info!("{variant} @ {minutes} min: rmse {:.4} mae {:.4}", r.rmse, r.mae),
                Err(e) => log::error!("{variant} @ {minutes} min failed: {e}"),
            }
            report.cells.push(AblationCell {
                variant,
                horizon_minutes: minutes,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub report: ForecastReport,
    pub hash_before: String,
    pub hash_after: String,
}

/// Pure inference of a trained checkpoint on another site's samples.
pub fn transfer_eval(checkpoint: &Checkpoint, target: &[SampleRecord]) -> Result<TransferReport> {
    let model = &checkpoint.model;
    let cfg = &model.config;
    for s in target {
        let checks = [
            ("input_len", cfg.input_len(), s.input_len()),
            ("horizon", cfg.horizon, s.horizon()),
        ];
        for (field, want, got) in checks {
            if want != got {
                return Err(Error::ManifestMismatch {
                    field: field.into(),
                    expected: want.to_string(),
                    found: got.to_string(),
                });
            }
        }
        if cfg.ablation.use_vam {
            let img = s.image();
            if img.width != cfg.camera_size || img.height != cfg.camera_size {
                return Err(Error::ManifestMismatch {
                    field: "camera_size".into(),
                    expected: cfg.camera_size.to_string(),
                    found: format!("{}x{}", img.width, img.height),
                });
            }
        }
    }
    let hash_before = param_hash(&model.store);
    let report = evaluate(model, target)?;
    let hash_after = param_hash(&model.store);
    if hash_before != hash_after {
        return Err(Error::InvalidArgument("parameters changed during transfer evaluation".into()));
    }
    Ok(TransferReport {
        report,
        hash_before,
        hash_after,
    })
}
