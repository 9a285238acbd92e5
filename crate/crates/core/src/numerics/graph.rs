use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        inner: usize,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        extent: usize,
        start: usize,
        len: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SumAxis {
        x: Var,
        inner: usize,
        len: usize,
    },
    VarLast(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `a (m x k) · bᵀ` where `b` is `(n x k)`.
fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ (k x m)ᵀ · b` where `a` is `(m x k)` and `b` is `(m x n)`; result `(k x n)`.
fn matmul_at_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bj) in orow.iter_mut().zip(brow) {
                *o += aip * bj;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected rank 2, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_f64(&n.shape, &n.value)
    }

    /// Leaf whose gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let value = tensor.data().iter().map(|&v| v as f64).collect();
        self.push(tensor.shape().to_vec(), value, Op::Leaf, tensor.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let value = tensor.data().iter().map(|&v| v as f64).collect();
        self.push(tensor.shape().to_vec(), value, Op::Leaf, false)
    }

    pub fn leaf_f64(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} does not hold {} values", value.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: ({m}x{k}) · ({k2}x{n})"),
            ));
        }
        let value = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a (m x k)` and `b (n x k)`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_bt", self.shape(a))?;
        let (n, k2) = dims2("matmul_bt", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("inner extents differ: ({m}x{k}) · ({n}x{k2})ᵀ"),
            ));
        }
        let value = matmul_bt_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let src = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], value, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    /// Adds a vector of the last-axis extent to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias).iter().product::<usize>() != cols {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} vs rows of {:?}", self.shape(bias), self.shape(a)),
            ));
        }
        let b = self.value(bias);
        let value = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), value, Op::AddRow(a, bias), rg))
    }

    /// `x · w + b` for `x (n x d_in)`, `w (d_in x d_out)`, `b (d_out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a), rg)
    }

    fn axis_layout(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_layout(x, axis)?;
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    value[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    value[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, inner, len }, rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    /// Layer normalization over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain).iter().product::<usize>() != cols
            || self.shape(bias).iter().product::<usize>() != cols
        {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs last axis {cols}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                value[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Same-padded 1-D convolution along the token axis.
    /// `x (n x c_in)`, `w (kernel x c_in x c_out)`, `b (c_out)`; kernel must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin) = dims2("conv1d", self.shape(x))?;
        let (kernel, wcin, cout) = match self.shape(w) {
            [k, ci, co] => (*k, *ci, *co),
            s => return Err(Error::shape("conv1d", format!("weight must be rank 3, got {s:?}"))),
        };
        if wcin != cin || kernel % 2 == 0 || self.shape(b).iter().product::<usize>() != cout {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let pad = kernel / 2;
        let xs = self.value(x);
        let ws = self.value(w);
        let bs = self.value(b);
        let mut value = Vec::with_capacity(n * cout);
        for _ in 0..n {
            value.extend_from_slice(bs);
        }
        for t in 0..n {
            let out = &mut value[t * cout..(t + 1) * cout];
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &xs[src as usize * cin..(src as usize + 1) * cin];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &ws[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                    for (o, &wv) in out.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![n, cout], value, Op::Conv1d { x, w, b, kernel }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Flattens to a single row `(1 x numel)` in row-major order.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[1, n])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p);
                value.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        Ok(self.push(shape, value, Op::Concat { parts, outer, inner }, rg))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, extent, inner) = self.axis_layout(x, axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} outside extent {extent}", start + len),
            ));
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * extent + start) * inner;
            value.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            value,
            Op::Slice {
                x,
                outer,
                inner,
                extent,
                start,
                len,
            },
            rg,
        ))
    }

    /// Row lookup into a `(vocab x dim)` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = dims2("gather_rows", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange(bad as u32, vocab));
        }
        let src = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            value.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), dim],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_layout(x, axis)?;
        let src = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    value[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::SumAxis { x, inner, len }, rg))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.axis_layout(x, axis)?.1;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Population variance over the last axis; last extent becomes 1.
    pub fn var_last(&mut self, x: Var) -> Result<Var> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("var_last", "rank-0 input"))?;
        let src = self.value(x);
        let value: Vec<f64> = src
            .chunks(cols)
            .map(|row| {
                let mean = row.iter().sum::<f64>() / cols as f64;
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64
            })
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::VarLast(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.value(x).iter().sum()];
        let rg = self.rg(x);
        self.push(vec![1], value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::shape(
                "mse",
                format!("prediction of {} values vs target of {}", p.len(), target.len()),
            ));
        }
        let value = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarOutput(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let da = matmul_bt_kernel(gy, self.value(*b), m, n, k);
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_kernel(self.value(*a), gy, m, k, n, &mut db);
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    // dA = dC · B
                    let da = matmul_kernel(gy, self.value(*b), m, n, k);
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    let av = self.value(*a);
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let g = gy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (d, &x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += g * x;
                            }
                        }
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gy[j * m + i];
                    }
                }
                accumulate_owned(&mut grads[a.0], da);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    accumulate_owned(&mut grads[b.0], neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gy.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if self.rg(*b) {
                    let d = gy.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.rg(*bias) {
                    let cols = self.value(*bias).len();
                    let mut db = vec![0.0; cols];
                    for row in gy.chunks(cols) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate_owned(&mut grads[bias.0], db);
                }
            }
            Op::Scale(a, s) => {
                let d = gy.iter().map(|g| g * s).collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Gelu(a) => {
                let d = gy
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Softmax { x, inner, len } => {
                let y = &node.value;
                let (inner, len) = (*inner, *len);
                let outer = y.len() / (inner * len);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = self.value(*gain);
                let cols = g.len();
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = gy[base + c] * g[c];
                            sum_d += d;
                            sum_dh += d * xhat[base + c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let d = gy[base + c] * g[c];
                            dx[base + c] = rs / n * (n * d - sum_d - xhat[base + c] * sum_dh);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (row_g, row_h) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += row_g[c] * row_h[c];
                        }
                    }
                    accumulate_owned(&mut grads[gain.0], dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; cols];
                    for row in gy.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate_owned(&mut grads[bias.0], db);
                }
            }
            Op::Conv1d { x, w, b, kernel } => {
                let (n, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cout = self.shape(*w)[2];
                let pad = kernel / 2;
                let xs = self.value(*x);
                let ws = self.value(*w);
                let mut dx = self.rg(*x).then(|| vec![0.0; n * cin]);
                let mut dw = self.rg(*w).then(|| vec![0.0; ws.len()]);
                for t in 0..n {
                    let gout = &gy[t * cout..(t + 1) * cout];
                    for j in 0..*kernel {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..cin {
                            let widx = (j * cin + c) * cout;
                            if let Some(dx) = dx.as_mut() {
                                let wrow = &ws[widx..widx + cout];
                                dx[src * cin + c] += gout.iter().zip(wrow).map(|(g, w)| g * w).sum::<f64>();
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xv = xs[src * cin + c];
                                for (d, g) in dw[widx..widx + cout].iter_mut().zip(gout) {
                                    *d += xv * g;
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; cout];
                    for row in gy.chunks(cout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], gy),
            Op::Concat { parts, outer, inner } => {
                let extent: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let b = (o * extent + offset) * inner;
                            d.extend_from_slice(&gy[b..b + len * inner]);
                        }
                        accumulate_owned(&mut grads[p.0], d);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                extent,
                start,
                len,
            } => {
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; outer * extent * inner]);
                for o in 0..*outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    for (d, g) in slot[dst..dst + len * inner].iter_mut().zip(&gy[src..src + len * inner]) {
                        *d += g;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dim = self.shape(*table)[1];
                let slot = grads[table.0].get_or_insert_with(|| vec![0.0; self.value(*table).len()]);
                for (r, &i) in ids.iter().enumerate() {
                    for (d, g) in slot[i * dim..(i + 1) * dim].iter_mut().zip(&gy[r * dim..(r + 1) * dim]) {
                        *d += g;
                    }
                }
            }
            Op::SumAxis { x, inner, len } => {
                let total = self.value(*x).len();
                let outer = total / (inner * len);
                let mut dx = vec![0.0; total];
                for o in 0..outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            dx[(o * len + j) * inner + i] = gy[o * inner + i];
                        }
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::VarLast(x) => {
                let src = self.value(*x);
                let cols = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; src.len()];
                for (r, row) in src.chunks(cols).enumerate() {
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = gy[r] * 2.0 * (row[c] - mean) / cols as f64;
                    }
                }
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::Sum(x) => {
                let d = vec![gy[0]; self.value(*x).len()];
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(a, b)| gy[0] * 2.0 * (a - b) / n)
                    .collect();
                accumulate_owned(&mut grads[pred.0], d);
            }
        }
    }
}
