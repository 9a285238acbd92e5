use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-3;

/// Denominator floor for the relative error, so that components whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel error {:.3e} (tol {:.0e}) {}",
            self.op_name,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the reverse-mode gradient of a scalar-valued `op` with central
/// finite differences at every component of `input`.
pub fn grad_check<F>(op_name: &str, input: &Tensor, eps: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with_tolerance(op_name, input, eps, DEFAULT_GRAD_TOLERANCE, op)
}

pub fn grad_check_with_tolerance<F>(
    op_name: &str,
    input: &Tensor,
    eps: f64,
    tolerance: f64,
    op: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    let shape = input.shape().to_vec();
    let base: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();

    let eval = |x: Vec<f64>, track: bool| -> Result<(Graph, Var, Var)> {
        let mut g = Graph::new();
        let v = g.leaf_f64(&shape, x, track)?;
        let out = op(&mut g, v)?;
        if g.value(out).len() != 1 {
            return Err(Error::NonScalarOutput(g.shape(out).to_vec()));
        }
        Ok((g, v, out))
    };

    let (g, v, out) = eval(base.clone(), true)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; base.len()]);

    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let (gp, _, op_) = eval(plus, false)?;
        let (gm, _, om) = eval(minus, false)?;
        let numeric = (gp.value(op_)[0] - gm.value(om)[0]) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel.is_nan() {
            max_rel = f64::INFINITY;
        } else {
            max_rel = max_rel.max(rel);
        }
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}
