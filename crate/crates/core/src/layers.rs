//! Transformer building blocks shared by the temporal encoder, the frozen
//! encoders and the fusion head. Parameters are looked up by name through a
//! [`Binder`], so the same code serves trainable and frozen stacks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Binder, Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) type Named = Vec<(String, Tensor)>;

pub(crate) fn linear<R: Rng + ?Sized>(out: &mut Named, name: &str, din: usize, dout: usize, rng: &mut R) {
    out.push((format!("{name}.w"), Tensor::fan_in_uniform(&[din, dout], din, rng)));
    out.push((format!("{name}.b"), Tensor::zeros(&[dout])));
}

pub(crate) fn norm(out: &mut Named, name: &str, dim: usize) {
    out.push((format!("{name}.g"), Tensor::full(&[dim], 1.0)));
    out.push((format!("{name}.b"), Tensor::zeros(&[dim])));
}

pub(crate) fn apply_linear(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{name}.w"))?;
    let bias = b.var(g, &format!("{name}.b"))?;
    g.affine(x, w, bias)
}

pub(crate) fn apply_norm(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let gain = b.var(g, &format!("{name}.g"))?;
    let bias = b.var(g, &format!("{name}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Q/K/V/O projections for multi-head attention over `dim` channels.
pub(crate) fn attention_params<R: Rng + ?Sized>(out: &mut Named, name: &str, dim: usize, rng: &mut R) {
    for p in ["q", "k", "v", "o"] {
        linear(out, &format!("{name}.{p}"), dim, dim, rng);
    }
}

/// Multi-head scaled dot-product attention. Returns the output and the
/// per-head weight matrices (`N_q x N_kv`, rows summing to one).
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    b: &mut Binder,
    name: &str,
    query: Var,
    kv: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let dim = g.shape(query)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!("{dim} channels not divisible into {heads} heads")));
    }
    if g.shape(kv)[0] == 0 {
        return Err(Error::InvalidArgument(format!("{name}: empty key/value side")));
    }
    let dk = dim / heads;
    let q = apply_linear(g, b, &format!("{name}.q"), query)?;
    let k = apply_linear(g, b, &format!("{name}.k"), kv)?;
    let v = apply_linear(g, b, &format!("{name}.v"), kv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dk, dk)?;
        let kh = g.slice(k, 1, h * dk, dk)?;
        let vh = g.slice(v, 1, h * dk, dk)?;
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let w = g.softmax_last(logits)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let out = apply_linear(g, b, &format!("{name}.o"), cat)?;
    Ok((out, weights))
}

pub(crate) fn block_params<R: Rng + ?Sized>(out: &mut Named, name: &str, dim: usize, rng: &mut R) {
    norm(out, &format!("{name}.ln1"), dim);
    attention_params(out, &format!("{name}.attn"), dim, rng);
    norm(out, &format!("{name}.ln2"), dim);
    linear(out, &format!("{name}.ff1"), dim, 4 * dim, rng);
    linear(out, &format!("{name}.ff2"), 4 * dim, dim, rng);
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `h + FFN(LN(h))`.
pub(crate) fn encoder_block(
    g: &mut Graph,
    b: &mut Binder,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let n1 = apply_norm(g, b, &format!("{name}.ln1"), x)?;
    let (a, weights) = multi_head_attention(g, b, &format!("{name}.attn"), n1, n1, heads)?;
    let h = g.add(x, a)?;
    let n2 = apply_norm(g, b, &format!("{name}.ln2"), h)?;
    let f = apply_linear(g, b, &format!("{name}.ff1"), n2)?;
    let f = g.gelu(f);
    let f = apply_linear(g, b, &format!("{name}.ff2"), f)?;
    Ok((g.add(h, f)?, weights))
}

pub(crate) fn stack_params<R: Rng + ?Sized>(out: &mut Named, name: &str, dim: usize, depth: usize, rng: &mut R) {
    for i in 0..depth {
        block_params(out, &format!("{name}.{i}"), dim, rng);
    }
    norm(out, &format!("{name}.ln_f"), dim);
}

/// `depth` encoder blocks followed by a final layer norm. The attention
/// weights of every block are returned in block order.
pub(crate) fn encoder_stack(
    g: &mut Graph,
    b: &mut Binder,
    name: &str,
    mut x: Var,
    depth: usize,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut all = Vec::new();
    for i in 0..depth {
        let (y, w) = encoder_block(g, b, &format!("{name}.{i}"), x, heads)?;
        x = y;
        all.extend(w);
    }
    Ok((apply_norm(g, b, &format!("{name}.ln_f"), x)?, all))
}

/// Adds a fixed sinusoidal table to the rows of `x`.
pub(crate) fn add_sinusoidal(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let table = crate::numerics::sinusoidal_table(n, d)?;
    let pe = g.leaf_f64(&[n, d], table, false)?;
    g.add(x, pe)
}
