//! Image preprocessing and the trainable vision projection that maps frozen
//! encoder tokens into the language model's embedding space.

use rand::Rng;

use crate::dataio::SkyImage;
use crate::error::{Error, Result};
use crate::layers::{apply_linear, linear, Named};
use crate::numerics::{sinusoidal_table, Binder, Graph, Tensor, Var};

/// Row-major `H x W x 3` float image with values on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_sky(img: &SkyImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            data: img.pixels.iter().map(|&p| p as f32).collect(),
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageNormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ImageNormStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

fn source_coord(dst: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 || n_in == 1 {
        0.0
    } else {
        dst as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Align-corners bilinear resampling to `(height, width)`.
pub fn bilinear_resize(img: &FloatImage, target: (usize, usize)) -> Result<FloatImage> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("resize target {th}x{tw} has a zero extent")));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidArgument("cannot resize an empty image".into()));
    }
    let mut data = Vec::with_capacity(th * tw * 3);
    for y in 0..th {
        let sy = source_coord(y, img.height, th);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..tw {
            let sx = source_coord(x, img.width, tw);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let top = img.at(y0, x0, c) as f64 * (1.0 - fx) + img.at(y0, x1, c) as f64 * fx;
                let bottom = img.at(y1, x0, c) as f64 * (1.0 - fx) + img.at(y1, x1, c) as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(FloatImage {
        height: th,
        width: tw,
        data,
    })
}

/// Scales to `[0, 1]` and standardizes per channel. Output layout is `3 x H x W`.
pub fn normalize_standardize(img: &FloatImage, stats: &ImageNormStats) -> Result<Tensor> {
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("channel std must be positive, got {:?}", stats.std)));
    }
    let plane = img.height * img.width;
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let v = img.data[i * 3 + c] as f64 / 255.0;
            out[c * plane + i] = ((v - stats.mean[c] as f64) / stats.std[c] as f64) as f32;
        }
    }
    Tensor::new(vec![3, img.height, img.width], out)
}

/// Inverse of [`normalize_standardize`], back to the 0..255 scale.
pub fn unstandardize(x: &Tensor, stats: &ImageNormStats) -> Result<FloatImage> {
    let (h, w) = match x.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("unstandardize", format!("expected 3xHxW, got {s:?}"))),
    };
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let v = x.data()[c * plane + i] as f64 * stats.std[c] as f64 + stats.mean[c] as f64;
            data[i * 3 + c] = (v * 255.0) as f32;
        }
    }
    Ok(FloatImage { height: h, width: w, data })
}

/// Resize to `size x size` and standardize.
pub fn preprocess(img: &SkyImage, size: usize, stats: &ImageNormStats) -> Result<Tensor> {
    let f = FloatImage::from_sky(img);
    let f = if f.height == size && f.width == size {
        f
    } else {
        bilinear_resize(&f, (size, size))?
    };
    normalize_standardize(&f, stats)
}

pub fn sinusoidal_posenc(positions: usize, dim: usize) -> Result<Tensor> {
    let table = sinusoidal_table(positions, dim)?;
    Tensor::new(vec![positions, dim], table.iter().map(|&v| v as f32).collect())
}

/// Trainable head `MLP(Conv1D(F + PE))`: a kernel-3 same-padded convolution
/// along the token axis, then `d_vis -> 2 d_vis -> d_llm` with GELU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisionProjection {
    pub d_vis: usize,
    pub d_llm: usize,
}

impl VisionProjection {
    pub const PREFIX: &'static str = "vam";

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Named {
        let d = self.d_vis;
        let mut out = vec![
            (
                "vam.conv.w".to_string(),
                Tensor::fan_in_uniform(&[3, d, d], 3 * d, rng),
            ),
            ("vam.conv.b".to_string(), Tensor::zeros(&[d])),
        ];
        linear(&mut out, "vam.mlp1", d, 2 * d, rng);
        linear(&mut out, "vam.mlp2", 2 * d, self.d_llm, rng);
        out
    }

    /// Maps `(N_v, d_vis)` encoder tokens to `(N_v, d_llm)`.
    pub fn project(&self, g: &mut Graph, b: &mut Binder, f_vlm: Var) -> Result<Var> {
        let shape = g.shape(f_vlm).to_vec();
        if shape.len() != 2 || shape[1] != self.d_vis {
            return Err(Error::shape(
                "vision_project",
                format!("expected (N, {}), got {shape:?}", self.d_vis),
            ));
        }
        let x = crate::layers::add_sinusoidal(g, f_vlm)?;
        let w = b.var(g, "vam.conv.w")?;
        let bias = b.var(g, "vam.conv.b")?;
        let x = g.conv1d(x, w, bias)?;
        let x = apply_linear(g, b, "vam.mlp1", x)?;
        let x = g.gelu(x);
        apply_linear(g, b, "vam.mlp2", x)
    }
}

/// Convenience wrapper evaluating the projection outside of training.
pub fn vision_project(f_vlm: &Tensor, proj: &VisionProjection, params: &crate::numerics::ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let x = g.constant(f_vlm);
    let y = proj.project(&mut g, &mut b, x)?;
    Ok(g.to_tensor(y))
}
