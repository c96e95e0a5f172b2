use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, LeafKind, NodeId, Tensor, LEAKY_SLOPE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// One entry of an explicit layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Fc {
        #[serde(rename = "in")]
        input: usize,
        #[serde(rename = "out")]
        output: usize,
    },
    /// `y = x + F2(ReLU(F1(ReLU(x))))`; requires `in == out`.
    FcRes {
        #[serde(rename = "in")]
        input: usize,
        hidden: usize,
        #[serde(rename = "out")]
        output: usize,
    },
    Relu,
    LeakyRelu,
    Sigmoid,
}

/// Encoder/decoder layout, either a named preset or explicit layer lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ArchitectureSpec {
    /// The 2D architecture: FC(D_x,256), 5 x FCRes(256,1024), ReLU, FC(256,D_z), mirrored.
    Fcres2,
    /// Same topology as `Fcres2` with free width, hidden size and block count.
    Fcres {
        width: usize,
        hidden: usize,
        blocks: usize,
    },
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    Custom {
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
    },
}

fn fcres_stack(d_in: usize, d_out: usize, width: usize, hidden: usize, blocks: usize) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec::Fc {
        input: d_in,
        output: width,
    }];
    for _ in 0..blocks {
        v.push(LayerSpec::FcRes {
            input: width,
            hidden,
            output: width,
        });
    }
    v.push(LayerSpec::Relu);
    v.push(LayerSpec::Fc {
        input: width,
        output: d_out,
    });
    v
}

fn mlp_stack(d_in: usize, d_out: usize, hidden: &[usize], act: Activation) -> Vec<LayerSpec> {
    let mut v = Vec::new();
    let mut prev = d_in;
    for &h in hidden {
        v.push(LayerSpec::Fc {
            input: prev,
            output: h,
        });
        v.push(match act {
            Activation::Relu => LayerSpec::Relu,
            Activation::LeakyRelu => LayerSpec::LeakyRelu,
            Activation::Sigmoid => LayerSpec::Sigmoid,
        });
        prev = h;
    }
    v.push(LayerSpec::Fc {
        input: prev,
        output: d_out,
    });
    v
}

impl ArchitectureSpec {
    /// Expands to `(encoder, decoder)` layer lists for the given dimensions.
    pub fn expand(&self, d_x: usize, d_z: usize) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        match self {
            ArchitectureSpec::Fcres2 => (
                fcres_stack(d_x, d_z, 256, 1024, 5),
                fcres_stack(d_z, d_x, 256, 1024, 5),
            ),
            ArchitectureSpec::Fcres {
                width,
                hidden,
                blocks,
            } => (
                fcres_stack(d_x, d_z, *width, *hidden, *blocks),
                fcres_stack(d_z, d_x, *width, *hidden, *blocks),
            ),
            ArchitectureSpec::Mlp { hidden, activation } => {
                let rev: Vec<usize> = hidden.iter().rev().copied().collect();
                (
                    mlp_stack(d_x, d_z, hidden, *activation),
                    mlp_stack(d_z, d_x, &rev, *activation),
                )
            }
            ArchitectureSpec::Custom { encoder, decoder } => (encoder.clone(), decoder.clone()),
        }
    }
}

/// Fully-connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Dense {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(input * output);
        let b = draw(output);
        Self {
            weight: Arc::new(Tensor::new(vec![input, output], w).expect("sized")),
            bias: Arc::new(Tensor::vector(b)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Arc::new(Tensor::zeros(&[input, output])),
            bias: Arc::new(Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Residual { fc1: Dense, fc2: Dense },
    Activation(Activation),
}

/// A sequential stack of layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds and initializes a stack, checking that consecutive dimensions agree.
    pub fn from_specs<R: Rng + ?Sized>(
        specs: &[LayerSpec],
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut cur = d_in;
        for (i, s) in specs.iter().enumerate() {
            let mismatch = |expected: usize| {
                Error::invalid(format!(
                    "layer {i} ({s:?}) expects input {expected}, but the previous layer produces {cur}"
                ))
            };
            match *s {
                LayerSpec::Fc { input, output } => {
                    if input != cur {
                        return Err(mismatch(input));
                    }
                    layers.push(Layer::Dense(Dense::init(input, output, rng)));
                    cur = output;
                }
                LayerSpec::FcRes {
                    input,
                    hidden,
                    output,
                } => {
                    if input != cur {
                        return Err(mismatch(input));
                    }
                    if input != output {
                        return Err(Error::invalid(format!(
                            "layer {i}: residual block needs in == out, got {input} and {output}"
                        )));
                    }
                    let fc1 = Dense::init(input, hidden, rng);
                    let fc2 = Dense::init(hidden, output, rng);
                    layers.push(Layer::Residual { fc1, fc2 });
                }
                LayerSpec::Relu => layers.push(Layer::Activation(Activation::Relu)),
                LayerSpec::LeakyRelu => layers.push(Layer::Activation(Activation::LeakyRelu)),
                LayerSpec::Sigmoid => layers.push(Layer::Activation(Activation::Sigmoid)),
            }
        }
        if cur != d_out {
            return Err(Error::invalid(format!(
                "layer stack produces dimension {cur}, expected {d_out}"
            )));
        }
        Ok(Self { layers })
    }

    fn denses(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().flat_map(|l| -> Vec<&Dense> {
            match l {
                Layer::Dense(d) => vec![d],
                Layer::Residual { fc1, fc2 } => vec![fc1, fc2],
                Layer::Activation(_) => vec![],
            }
        })
    }

    fn denses_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers.iter_mut().flat_map(|l| -> Vec<&mut Dense> {
            match l {
                Layer::Dense(d) => vec![d],
                Layer::Residual { fc1, fc2 } => vec![fc1, fc2],
                Layer::Activation(_) => vec![],
            }
        })
    }

    /// Parameters in canonical order: (weight, bias) per dense layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.denses().flat_map(|d| [&*d.weight, &*d.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.denses_mut()
            .flat_map(|d| [Arc::make_mut(&mut d.weight), Arc::make_mut(&mut d.bias)])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Replaces parameters from a canonical-order list, checking shapes.
    pub fn load_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: slot.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            **slot = v.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a leaf of `g`, in canonical order.
    pub fn bind(&self, g: &mut Graph, kind: LeafKind) -> Vec<NodeId> {
        self.denses()
            .flat_map(|d| [d.weight.clone(), d.bias.clone()])
            .map(|t| g.leaf_shared(t, kind))
            .collect()
    }

    /// Forward pass of `x: [B, in]` using leaves from [`Network::bind`].
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut ids = ids.iter().copied();
        let mut dense = |g: &mut Graph, h: NodeId| -> Result<NodeId> {
            let (w, b) = (ids.next().expect("bound"), ids.next().expect("bound"));
            let y = g.matmul(h, w)?;
            g.bias_add(y, b)
        };
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(_) => dense(g, h)?,
                Layer::Residual { .. } => {
                    let a = g.relu(h)?;
                    let a = dense(g, a)?;
                    let a = g.relu(a)?;
                    let a = dense(g, a)?;
                    g.add(h, a)?
                }
                Layer::Activation(act) => act.apply(g, h)?,
            };
        }
        Ok(h)
    }
}
