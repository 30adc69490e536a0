use super::{Graph, Tensor, Var};
use crate::error::{precondition, Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error
/// `|autodiff − fd| / (|fd| + 1e-8)` over all coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(precondition(format!("finite_diff_check: eps {eps} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let xv = g.variable(x);
    let out = f(&mut g, xv)?;
    let base = g.item(out);
    if !base.is_finite() {
        return Err(Error::Domain {
            op: "finite_diff_check",
            detail: format!("f(x) = {base}"),
        });
    }
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.variable(t);
        let o = f(&mut g, v)?;
        Ok(g.item(o))
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
