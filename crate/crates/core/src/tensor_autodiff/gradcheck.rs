use crate::error::{LgError, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &ids)?;
    let v = g
        .value(root)
        .item()
        .ok_or_else(|| LgError::shape("check_gradients", "objective must be scalar"))?;
    if !v.is_finite() {
        return Err(LgError::NonFinite {
            op: "check_gradients",
        });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar objective `f` against central
/// differences for every entry of every parameter. Returns the worst relative
/// error, using `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(LgError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let ids = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &ids)?;
    if g.value(root).len() != 1 {
        return Err(LgError::shape("check_gradients", "objective must be scalar"));
    }
    let grads = g.backward(root);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, id) in ids.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*id) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; params[p].len()];
                &zeros
            }
        };
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
