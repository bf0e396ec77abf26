use crate::error::{AdError, Result};
use crate::{Graph, Tensor, Var};

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.item(out);
    if !v.is_finite() {
        return Err(AdError::NonFinite { node: out.id() });
    }
    Ok(v)
}

/// Reverse-mode gradients of `f` at `params`.
pub fn analytic_grads<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences, `|a - c| / max(1e-8, |c|)` over every parameter entry.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(AdError::Contract(format!("eps must be positive, got {eps}")));
    }
    let analytic = analytic_grads(&f, params)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&f, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            let central = (up - down) / (2.0 * eps);
            let err = (grad.data()[j] - central).abs() / central.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
