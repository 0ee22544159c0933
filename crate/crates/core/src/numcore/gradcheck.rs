use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `point`.
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)` over all
/// coordinates of all inputs.
pub fn grad_check<F>(mut f: F, point: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for ci in 0..t.len() {
            let x0 = t.data()[ci];
            probe[ti].data_mut()[ci] = x0 + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ci] = x0 - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ci] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
