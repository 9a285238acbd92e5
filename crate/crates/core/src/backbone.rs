//! Frozen encoders: a patch transformer over standardized images and a small
//! language-model stack over `[soft prompt; text; image]` embeddings.
//!
//! Weights are generated from a seed and never updated, standing in for
//! pretrained checkpoints behind the same interface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{add_sinusoidal, encoder_stack, linear, stack_params, Named};
use crate::numerics::{Binder, Graph, ParamStore, Tensor, Var};
use crate::prompt::{init_text_table, TEXT_TABLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrozenEncoderConfig {
    pub seed: u64,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Image patch side; unused by the language stack.
    pub patch: usize,
}

impl Default for FrozenEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            depth: 2,
            dim: 64,
            heads: 4,
            patch: 8,
        }
    }
}

impl FrozenEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder dim {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("encoder dim {} must be even", self.dim)));
        }
        if self.patch == 0 {
            return Err(Error::InvalidArgument("patch side must be positive".into()));
        }
        Ok(())
    }
}

pub const VISION_PREFIX: &str = "vis";
pub const LLM_PREFIX: &str = "llm";

/// Frozen image encoder weights.
pub fn vision_encoder_params(cfg: &FrozenEncoderConfig) -> Result<Named> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Named::new();
    linear(&mut out, "vis.embed", 3 * cfg.patch * cfg.patch, cfg.dim, &mut rng);
    stack_params(&mut out, "vis.enc", cfg.dim, cfg.depth, &mut rng);
    Ok(out)
}

/// Frozen language stack weights, including the byte embedding table.
pub fn llm_params(cfg: &FrozenEncoderConfig) -> Result<Named> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![(TEXT_TABLE.to_string(), init_text_table(cfg.dim, &mut rng))];
    stack_params(&mut out, "llm.enc", cfg.dim, cfg.depth, &mut rng);
    Ok(out)
}

/// Flattens non-overlapping `patch x patch` tiles of a `3 x H x W` tensor in
/// row-major tile order; each row is laid out channel, row, column.
pub fn image_patches(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_image", format!("expected 3xHxW, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "encode_image",
            format!("{h}x{w} image not divisible into {patch}-pixel patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = 3 * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * row);
    let data = img.data();
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..3 {
                for dy in 0..patch {
                    let start = c * h * w + (py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&data[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, row], out)
}

/// Runs the frozen image encoder with weights from `params`.
pub fn encode_image_with(params: &ParamStore, img: &Tensor, cfg: &FrozenEncoderConfig) -> Result<Tensor> {
    let patches = image_patches(img, cfg.patch)?;
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let x = g.constant(&patches);
    let w = b.var(&mut g, "vis.embed.w")?;
    let bias = b.var(&mut g, "vis.embed.b")?;
    let x = g.affine(x, w, bias)?;
    let x = add_sinusoidal(&mut g, x)?;
    let (y, _) = encoder_stack(&mut g, &mut b, "vis.enc", x, cfg.depth, cfg.heads)?;
    Ok(g.to_tensor(y))
}

/// Encodes one standardized image into `(H/patch)*(W/patch)` tokens.
pub fn encode_image(img: &Tensor, cfg: &FrozenEncoderConfig) -> Result<Tensor> {
    let mut store = ParamStore::new();
    store.extend_frozen(vision_encoder_params(cfg)?);
    encode_image_with(&store, img, cfg)
}

/// Concatenates the present parts in `[soft; text; image]` order, adds the
/// sinusoidal table and runs the frozen stack.
pub fn llm_forward(
    g: &mut Graph,
    b: &mut Binder,
    soft: Option<Var>,
    text: Option<Var>,
    image: Option<Var>,
    cfg: &FrozenEncoderConfig,
) -> Result<Var> {
    let parts: Vec<Var> = [soft, text, image].into_iter().flatten().collect();
    if parts.is_empty() {
        return Err(Error::NoModality);
    }
    for &p in &parts {
        let s = g.shape(p);
        if s.len() != 2 || s[1] != cfg.dim {
            return Err(Error::shape("llm_forward", format!("part {s:?} vs model dim {}", cfg.dim)));
        }
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    let x = add_sinusoidal(g, x)?;
    let (y, _) = encoder_stack(g, b, "llm.enc", x, cfg.depth, cfg.heads)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::Rng;

    fn cfg(dim: usize) -> FrozenEncoderConfig {
        FrozenEncoderConfig {
            seed: 3,
            depth: 1,
            dim,
            heads: 2,
            patch: 8,
        }
    }

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[3, size, size], 1.0, &mut rng)
    }

    #[test]
    fn patch_layout() {
        let data: Vec<f32> = (0..3 * 4 * 4).map(|v| v as f32).collect();
        let img = Tensor::new(vec![3, 4, 4], data).unwrap();
        let p = image_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        assert_eq!(&p.row(1)[..4], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.row(2)[4..8], &[24.0, 25.0, 28.0, 29.0]);
        assert!(image_patches(&img, 3).is_err());
    }

    #[test]
    fn encode_counts_and_determinism() {
        let c = cfg(16);
        let img = random_image(64, 0);
        let a = encode_image(&img, &c).unwrap();
        assert_eq!(a.shape(), &[64, 16]);
        assert_eq!(a, encode_image(&img, &c).unwrap());

        let mut other = img.clone();
        other.data_mut()[0] += 0.5;
        assert_ne!(a, encode_image(&other, &c).unwrap());
        assert!(encode_image(&random_image(12, 0), &c).is_err());
    }

    fn llm_store(c: &FrozenEncoderConfig) -> ParamStore {
        let mut s = ParamStore::new();
        s.extend_frozen(llm_params(c).unwrap());
        s
    }

    #[test]
    fn llm_token_counts() {
        let c = cfg(8);
        let store = llm_store(&c);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let soft = g.constant(&Tensor::full(&[8, 8], 0.1));
        let text = g.constant(&Tensor::full(&[40, 8], 0.2));
        let img = g.constant(&Tensor::full(&[64, 8], 0.3));
        let y = llm_forward(&mut g, &mut b, Some(soft), Some(text), Some(img), &c).unwrap();
        assert_eq!(g.shape(y), &[112, 8]);
        let y = llm_forward(&mut g, &mut b, Some(soft), None, Some(img), &c).unwrap();
        assert_eq!(g.shape(y), &[72, 8]);
        assert!(matches!(
            llm_forward(&mut g, &mut b, None, None, None, &c),
            Err(Error::NoModality)
        ));
        let bad = g.constant(&Tensor::zeros(&[2, 6]));
        assert!(llm_forward(&mut g, &mut b, Some(bad), None, None, &c).is_err());
    }

    #[test]
    fn token_order_matters() {
        let c = cfg(8);
        let store = llm_store(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[4, 8], 1.0, &mut rng);
        let mut swapped = x.clone();
        let (r0, r1) = (x.row(0).to_vec(), x.row(1).to_vec());
        swapped.data_mut()[..8].copy_from_slice(&r1);
        swapped.data_mut()[8..16].copy_from_slice(&r0);
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let mut b = Binder::new(&store);
            let v = g.constant(t);
            let y = llm_forward(&mut g, &mut b, Some(v), None, None, &c).unwrap();
            g.value(y).to_vec()
        };
        let (a, s) = (run(&x), run(&swapped));
        // rows 2.. see the same multiset of tokens; only positions differ
        assert!(a[16..].iter().zip(&s[16..]).any(|(p, q)| (p - q).abs() > 1e-6));
    }

    #[test]
    fn soft_prompt_gradient_through_frozen_stack() {
        let c = cfg(8);
        let store = llm_store(&c);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let soft = Tensor::uniform(&[2, 8], 0.5, &mut rng);
            let text = Tensor::uniform(&[3, 8], 1.0, &mut rng);
            let w: Vec<f64> = (0..5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let report = grad_check("llm_forward.soft", &soft, 1e-5, |g, v| {
                let mut b = Binder::new(&store);
                let t = g.constant(&text);
                let y = llm_forward(g, &mut b, Some(v), Some(t), None, &c)?;
                let wv = g.leaf_f64(&[5, 8], w.clone(), false)?;
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.passed, "{report}");
        }
    }

    #[test]
    fn backbone_weights_receive_no_gradient() {
        let c = cfg(8);
        let store = llm_store(&c);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let soft = g.leaf(&Tensor::full(&[2, 8], 0.1).with_requires_grad(true));
        let y = llm_forward(&mut g, &mut b, Some(soft), None, None, &c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(b.collect_grads(&grads).is_empty());
        assert!(grads.wrt(soft).is_some());
    }
}
