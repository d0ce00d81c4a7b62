use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error over all parameter
/// elements. The denominator is `max(|analytic|, |numeric|, floor)` with
/// `floor = max(1e-8, 1e-6 · max|analytic|)`: entries that small relative to
/// the largest gradient (structural zeros such as key biases under softmax
/// shift invariance) are dominated by roundoff in the differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params`.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    if !(eps > S::zero() && eps <= S::of(1e-2)) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let eval = |ps: &[Tensor<S>]| -> Result<S> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let largest = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(S::zero(), |m, &x| m.max(x.abs()));
    let floor = S::of(1e-8).max(S::of(1e-6) * largest);
    let two = S::of(2.0);
    let mut work = params.to_vec();
    let mut worst = S::zero();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (two * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
