//! Closed-form energies used as sampler and density oracles.

use std::hash::{DefaultHasher, Hasher};

use super::{hash_f64s, Energy};
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::Result;

/// `E(x) = scale * ||x||²`. With `scale = 1/2` and `T = 1` this is the
/// standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub dim: usize,
    pub scale: f64,
    pub temperature: f64,
}

impl Quadratic {
    pub fn standard_normal(dim: usize) -> Self {
        Self {
            dim,
            scale: 0.5,
            temperature: 1.0,
        }
    }
}

impl Energy for Quadratic {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let sq = g.square(x)?;
        let s = g.row_sum(sq)?;
        g.scale(s, self.scale)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_f64s(&mut h, [&self.scale, &self.temperature]);
        h.write_usize(self.dim);
        h.finish()
    }
}

/// One-dimensional `E(x) = barrier * (x² - 1)²` with minima at ±1.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleWell {
    pub barrier: f64,
    pub temperature: f64,
}

impl Energy for DoubleWell {
    fn input_dim(&self) -> usize {
        1
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let sq = g.square(x)?;
        let ones = g.constant(Tensor::full(g.shape(sq), 1.0));
        let d = g.sub(sq, ones)?;
        let d2 = g.square(d)?;
        let s = g.row_sum(d2)?;
        g.scale(s, self.barrier)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_f64s(&mut h, [&self.barrier, &self.temperature]);
        h.finish()
    }
}

/// `E ≡ value`, i.e. the uniform density on any bounded domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Constant {
    pub dim: usize,
    pub value: f64,
    pub temperature: f64,
}

impl Energy for Constant {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        // 0·x keeps the input connected so gradients come back as zeros.
        let z = g.scale(x, 0.0)?;
        let s = g.row_sum(z)?;
        let c = g.constant(Tensor::full(g.shape(s), self.value));
        g.add(s, c)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_f64s(&mut h, [&self.value, &self.temperature]);
        h.write_usize(self.dim);
        h.finish()
    }
}
