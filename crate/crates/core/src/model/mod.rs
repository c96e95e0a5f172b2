//! Autoencoder architectures, the reconstruction-error energy, latent
//! geometries and the linear analytic case.

pub mod analytic;
mod autoencoder;
mod layers;
mod linear;

pub use autoencoder::{AutoencoderModel, BoundModel, LatentSpace, ModelSpec, ModelState, OnManifold};
pub use layers::{Activation, ArchitectureSpec, Dense, Layer, LayerSpec, Network};
pub use linear::{linear_ml_covariance, LinearModel};

use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Rows evaluated per graph when scoring large point sets.
const CHUNK: usize = 4096;

/// A batched energy function `E: [B, D] -> [B]` with a Gibbs temperature.
pub trait Energy {
    fn input_dim(&self) -> usize;

    fn temperature(&self) -> f64;

    /// Builds per-row energies for `x: [B, D]`. Parameters enter as constants.
    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;

    /// Hash of everything the energy depends on (parameters and T).
    fn fingerprint(&self) -> u64;

    fn energies(&self, xs: &Tensor) -> Result<Vec<f64>> {
        let xs = as_batch(xs, self.input_dim())?;
        let mut out = Vec::with_capacity(xs.rows());
        for chunk in row_chunks(&xs) {
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let e = self.energy_node(&mut g, x)?;
            out.extend_from_slice(g.value(e).data());
        }
        Ok(out)
    }

    /// Per-row energies and `∇_x E` for every row. Rows never interact, so
    /// the gradient of the summed energy is the stack of per-row gradients.
    fn energy_and_grad(&self, xs: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let xs = as_batch(xs, self.input_dim())?;
        let mut energies = Vec::with_capacity(xs.rows());
        let mut grad = Vec::with_capacity(xs.len());
        for chunk in row_chunks(&xs) {
            let mut g = Graph::new();
            let x = g.input(chunk);
            let e = self.energy_node(&mut g, x)?;
            let s = g.sum(e)?;
            energies.extend_from_slice(g.value(e).data());
            let mut grads = g.backward(s)?;
            grad.extend(grads.take(x).expect("input leaf").into_data());
        }
        Ok((energies, Tensor::new(xs.shape().to_vec(), grad)?))
    }
}

impl<E: Energy + ?Sized> Energy for &E {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        (**self).energy_node(g, x)
    }
    fn fingerprint(&self) -> u64 {
        (**self).fingerprint()
    }
}

fn row_chunks(xs: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let d = xs.last_dim();
    xs.data()
        .chunks(CHUNK * d.max(1))
        .map(move |c| Tensor::new(vec![c.len() / d.max(1), d], c.to_vec()).expect("chunk"))
}

/// Views a `[D]` vector as a one-row batch and checks the row width.
pub fn as_batch(x: &Tensor, dim: usize) -> Result<Tensor> {
    let t = match x.rank() {
        1 => x.clone().reshape(vec![1, x.len()])?,
        2 => x.clone(),
        _ => {
            return Err(Error::Shape {
                op: "batch",
                lhs: x.shape().to_vec(),
                rhs: vec![dim],
            })
        }
    };
    if t.last_dim() != dim {
        return Err(Error::Shape {
            op: "batch",
            lhs: x.shape().to_vec(),
            rhs: vec![dim],
        });
    }
    Ok(t)
}

pub(crate) fn hash_f64s<'a>(h: &mut impl std::hash::Hasher, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        h.write_u64(v.to_bits());
    }
}
