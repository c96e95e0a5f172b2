use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Evaluates `f` at `x` on a fresh graph and returns the scalar output.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// `∇_x f(x)` for a closure that builds a scalar from the input node.
pub fn grad_wrt_input<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    let mut grads = g.backward(out)?;
    Ok(grads.take(xi).expect("input leaf always has a gradient"))
}

/// Max over coordinates of `|autodiff - central difference| / (|central difference| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let ad = grad_wrt_input(&f, point)?;
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        if !fd.is_finite() {
            return Err(Error::NonFinite {
                op: "finite difference".into(),
            });
        }
        let rel = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
