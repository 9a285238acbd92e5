//! Temporal branch: per-window z-scoring, overlapping patch segmentation and
//! a trainable patch transformer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{encoder_stack, linear, stack_params, Named};
use crate::numerics::{Binder, Graph, Tensor, Var};

pub const STD_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub input_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
}

impl PatchConfig {
    pub fn new(input_len: usize) -> Self {
        Self {
            input_len,
            patch_len: 8,
            stride: 4,
            d_model: 64,
            layers: 2,
            heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.input_len {
            return Err(Error::InvalidArgument(format!(
                "patch length {} must lie in [1, {}]",
                self.patch_len, self.input_len
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// `floor((L - L_p) / S) + 1`.
    pub fn n_patches(&self) -> usize {
        (self.input_len - self.patch_len) / self.stride + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowNorm {
    pub mean: f64,
    pub std: f64,
}

impl WindowNorm {
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.std + self.mean).collect()
    }

    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (v - self.mean) / self.std).collect()
    }
}

/// Z-scores a window with its own mean and population std (floored).
pub fn normalize_window(window: &[f32]) -> Result<(Vec<f64>, WindowNorm)> {
    if window.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty window".into()));
    }
    let x: Vec<f64> = window.iter().map(|&v| v as f64).collect();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let norm = WindowNorm {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    };
    Ok((norm.normalize(&x), norm))
}

/// Overlapping patches `[j*S, j*S + L_p)`; trailing values past the last
/// full patch are dropped.
pub fn patchify(series: &[f64], cfg: &PatchConfig) -> Result<Tensor> {
    if cfg.patch_len == 0 || cfg.patch_len > series.len() || cfg.stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot cut patches of {} with stride {} from {} values",
            cfg.patch_len,
            cfg.stride,
            series.len()
        )));
    }
    let n = (series.len() - cfg.patch_len) / cfg.stride + 1;
    let mut data = Vec::with_capacity(n * cfg.patch_len);
    for j in 0..n {
        let s = j * cfg.stride;
        data.extend(series[s..s + cfg.patch_len].iter().map(|&v| v as f32));
    }
    Tensor::new(vec![n, cfg.patch_len], data)
}

pub const TEMPORAL_PREFIX: &str = "tam";

pub fn temporal_params<R: Rng + ?Sized>(cfg: &PatchConfig, rng: &mut R) -> Result<Named> {
    cfg.validate()?;
    let mut out = Named::new();
    linear(&mut out, "tam.proj", cfg.patch_len, cfg.d_model, rng);
    out.push((
        "tam.pos".to_string(),
        Tensor::uniform(&[cfg.n_patches(), cfg.d_model], 0.1, rng),
    ));
    stack_params(&mut out, "tam.enc", cfg.d_model, cfg.layers, rng);
    Ok(out)
}

/// Projects patches to `d_model`, adds the learned position table and runs
/// the encoder. Returns `E_temporal` and the self-attention weights.
pub fn encode_temporal(g: &mut Graph, b: &mut Binder, patches: Var, cfg: &PatchConfig) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(patches).to_vec();
    if shape != [cfg.n_patches(), cfg.patch_len] {
        return Err(Error::shape(
            "encode_temporal",
            format!("patches {shape:?} vs configured ({}, {})", cfg.n_patches(), cfg.patch_len),
        ));
    }
    let w = b.var(g, "tam.proj.w")?;
    let bias = b.var(g, "tam.proj.b")?;
    let x = g.affine(patches, w, bias)?;
    let pos = b.var(g, "tam.pos")?;
    let x = g.add(x, pos)?;
    encoder_stack(g, b, "tam.enc", x, cfg.layers, cfg.heads)
}
