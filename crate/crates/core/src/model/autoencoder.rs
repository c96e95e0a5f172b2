use std::hash::{DefaultHasher, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, ArchitectureSpec, Dense, Layer, Network};
use super::{as_batch, hash_f64s, Energy};
use crate::diff::{Graph, LeafKind, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentSpace {
    Euclidean { dim: usize },
    /// Latent codes are projected onto the unit sphere `S^{dim-1}`.
    Hypersphere { dim: usize },
}

impl LatentSpace {
    pub fn dim(&self) -> usize {
        match *self {
            LatentSpace::Euclidean { dim } | LatentSpace::Hypersphere { dim } => dim,
        }
    }

    pub fn is_sphere(&self) -> bool {
        matches!(self, LatentSpace::Hypersphere { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LatentSpace::Euclidean { dim } if dim < 1 => Err(Error::invalid("latent dim must be >= 1")),
            LatentSpace::Hypersphere { dim } if dim < 2 => {
                Err(Error::invalid("hypersphere latent dim must be >= 2"))
            }
            _ => Ok(()),
        }
    }
}

/// Everything needed to rebuild a model apart from its parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub architecture: ArchitectureSpec,
    pub latent: LatentSpace,
    /// Appended to the decoder; `sigmoid` for images in [0, 1].
    #[serde(default)]
    pub output_activation: Option<Activation>,
    /// Initial temperature; the live value is the model's `log_temperature`.
    pub temperature: f64,
    #[serde(default)]
    pub temperature_trainable: bool,
    pub recon_scale: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.recon_scale > 0.0 && self.recon_scale.is_finite()) {
            return Err(Error::invalid(format!("recon_scale must be > 0, got {}", self.recon_scale)));
        }
        Ok(())
    }
}

/// Serializable snapshot: spec plus flat parameter arrays with shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub log_temperature: f64,
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
}

/// Parameter leaves of one model registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Vec<NodeId>,
    pub decoder: Vec<NodeId>,
}

impl BoundModel {
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.encoder.iter().chain(&self.decoder).copied()
    }
}

/// Autoencoder whose reconstruction error is the energy of a Gibbs density.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    spec: ModelSpec,
    encoder: Network,
    decoder: Network,
    /// `T = exp(log_temperature)` keeps T positive under gradient updates.
    log_temperature: f64,
}

impl AutoencoderModel {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (enc, mut dec) = spec.architecture.expand(spec.input_dim, spec.latent.dim());
        if let Some(act) = spec.output_activation {
            dec.push(match act {
                Activation::Relu => super::LayerSpec::Relu,
                Activation::LeakyRelu => super::LayerSpec::LeakyRelu,
                Activation::Sigmoid => super::LayerSpec::Sigmoid,
            });
        }
        let encoder = Network::from_specs(&enc, spec.input_dim, spec.latent.dim(), rng)?;
        let decoder = Network::from_specs(&dec, spec.latent.dim(), spec.input_dim, rng)?;
        let log_temperature = spec.temperature.ln();
        Ok(Self {
            spec,
            encoder,
            decoder,
            log_temperature,
        })
    }

    /// Assembles a model from explicit networks (used for hand-built fixtures).
    pub fn from_networks(spec: ModelSpec, encoder: Network, decoder: Network) -> Result<Self> {
        spec.validate()?;
        let log_temperature = spec.temperature.ln();
        let m = Self {
            spec,
            encoder,
            decoder,
            log_temperature,
        };
        m.check_dims()?;
        Ok(m)
    }

    /// Identity encoder and decoder on `R^dim` (Euclidean latent, scale 1, T = 1).
    pub fn identity(dim: usize) -> Self {
        let eye = || {
            Network {
                layers: vec![Layer::Dense(Dense {
                    weight: Arc::new(Tensor::eye(dim)),
                    bias: Arc::new(Tensor::zeros(&[dim])),
                })],
            }
        };
        let spec = ModelSpec {
            input_dim: dim,
            architecture: ArchitectureSpec::Custom {
                encoder: vec![super::LayerSpec::Fc { input: dim, output: dim }],
                decoder: vec![super::LayerSpec::Fc { input: dim, output: dim }],
            },
            latent: LatentSpace::Euclidean { dim },
            output_activation: None,
            temperature: 1.0,
            temperature_trainable: false,
            recon_scale: 1.0,
        };
        Self::from_networks(spec, eye(), eye()).expect("identity model is well formed")
    }

    fn check_dims(&self) -> Result<()> {
        let probe = |net: &Network, d_in: usize, d_out: usize, what: &str| -> Result<()> {
            let mut g = Graph::new();
            let ids = net.bind(&mut g, LeafKind::Constant);
            let x = g.constant(Tensor::zeros(&[1, d_in]));
            let y = net.forward(&mut g, &ids, x)?;
            if g.shape(y) != [1, d_out] {
                return Err(Error::invalid(format!(
                    "{what} maps {d_in} -> {:?}, expected {d_out}",
                    g.shape(y)
                )));
            }
            Ok(())
        };
        probe(&self.encoder, self.input_dim(), self.latent_dim(), "encoder")?;
        probe(&self.decoder, self.latent_dim(), self.input_dim(), "decoder")
    }

    pub fn from_state(state: ModelState) -> Result<Self> {
        // Initial values are overwritten below; the generator only fixes shapes.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(state.spec, &mut rng)?;
        m.encoder.load_params(&state.encoder)?;
        m.decoder.load_params(&state.decoder)?;
        m.set_log_temperature(state.log_temperature)?;
        Ok(m)
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            spec: self.spec.clone(),
            log_temperature: self.log_temperature,
            encoder: self.encoder.params().into_iter().cloned().collect(),
            decoder: self.decoder.params().into_iter().cloned().collect(),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn latent(&self) -> LatentSpace {
        self.spec.latent
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent.dim()
    }

    pub fn recon_scale(&self) -> f64 {
        self.spec.recon_scale
    }

    pub fn temperature_trainable(&self) -> bool {
        self.spec.temperature_trainable
    }

    pub fn log_temperature(&self) -> f64 {
        self.log_temperature
    }

    pub fn set_log_temperature(&mut self, u: f64) -> Result<()> {
        let t = u.exp();
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::NonFinite {
                op: "temperature update".into(),
            });
        }
        self.log_temperature = u;
        Ok(())
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Network {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Network {
        &mut self.decoder
    }

    /// All parameters, encoder first, in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn bind(&self, g: &mut Graph, kind: LeafKind) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g, kind),
            decoder: self.decoder.bind(g, kind),
        }
    }

    /// Latent code of `x: [B, D_x]`, projected to the sphere when required.
    pub fn encode_node(&self, g: &mut Graph, b: &BoundModel, x: NodeId) -> Result<NodeId> {
        let z = self.encoder.forward(g, &b.encoder, x)?;
        if self.spec.latent.is_sphere() {
            g.row_normalize(z)
        } else {
            Ok(z)
        }
    }

    pub fn decode_node(&self, g: &mut Graph, b: &BoundModel, z: NodeId) -> Result<NodeId> {
        self.decoder.forward(g, &b.decoder, z)
    }

    /// Per-row `recon_scale * ||x - f_d(f_e(x))||^2` and the latent code.
    pub fn energy_nodes(&self, g: &mut Graph, b: &BoundModel, x: NodeId) -> Result<(NodeId, NodeId)> {
        let z = self.encode_node(g, b, x)?;
        let xh = self.decode_node(g, b, z)?;
        let d = g.sub(x, xh)?;
        let sq = g.square(d)?;
        let rs = g.row_sum(sq)?;
        let e = g.scale(rs, self.spec.recon_scale)?;
        Ok((e, z))
    }

    fn run(&self, x: &Tensor, dim: usize, f: impl FnOnce(&mut Graph, &BoundModel, NodeId) -> Result<NodeId>) -> Result<Tensor> {
        let xs = as_batch(x, dim)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, LeafKind::Constant);
        let xi = g.constant(xs);
        let y = f(&mut g, &b, xi)?;
        Ok(g.value(y).clone())
    }

    /// `f_e(x)` for `x: [D_x]` or `[B, D_x]`; returns `[B, D_z]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, self.input_dim(), |g, b, x| self.encode_node(g, b, x))
    }

    /// `f_d(z)` for `z: [D_z]` or `[B, D_z]`; returns `[B, D_x]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.run(z, self.latent_dim(), |g, b, z| self.decode_node(g, b, z))
    }

    pub fn recon_errors(&self, xs: &Tensor) -> Result<Vec<f64>> {
        self.energies(xs)
    }

    /// Reconstruction error of a single point.
    pub fn recon_error(&self, x: &Tensor) -> Result<f64> {
        let e = self.recon_errors(x)?;
        if e.len() != 1 {
            return Err(Error::invalid(format!("expected one point, got {}", e.len())));
        }
        Ok(e[0])
    }

    /// Alias of [`AutoencoderModel::recon_error`]: the model's energy.
    pub fn energy(&self, x: &Tensor) -> Result<f64> {
        self.recon_error(x)
    }

    /// On-manifold energies `H(z) = E(f_d(z))` per row.
    pub fn latent_energy(&self, z: &Tensor) -> Result<Vec<f64>> {
        OnManifold(self).energies(z)
    }
}

impl Energy for AutoencoderModel {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    fn energy_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let b = self.bind(g, LeafKind::Constant);
        Ok(self.energy_nodes(g, &b, x)?.0)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            hash_f64s(&mut h, p.data());
        }
        hash_f64s(&mut h, [&self.log_temperature, &self.spec.recon_scale]);
        h.finish()
    }
}

/// The on-manifold energy `H(z) = E(f_d(z))` seen as an energy over latents,
/// at the model's temperature.
#[derive(Clone, Copy, Debug)]
pub struct OnManifold<'a>(pub &'a AutoencoderModel);

impl Energy for OnManifold<'_> {
    fn input_dim(&self) -> usize {
        self.0.latent_dim()
    }

    fn temperature(&self) -> f64 {
        self.0.temperature()
    }

    fn energy_node(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let b = self.0.bind(g, LeafKind::Constant);
        let x = self.0.decode_node(g, &b, z)?;
        Ok(self.0.energy_nodes(g, &b, x)?.0)
    }

    fn fingerprint(&self) -> u64 {
        self.0.fingerprint() ^ 0x9e37_79b9_7f4a_7c15
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_check;

    fn small_spec(latent: LatentSpace) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            architecture: ArchitectureSpec::Fcres {
                width: 8,
                hidden: 16,
                blocks: 2,
            },
            latent,
            output_activation: None,
            temperature: 1.0,
            temperature_trainable: false,
            recon_scale: 0.5,
        }
    }

    fn zero_net(net: &mut Network) {
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn hypersphere_projection_divides_by_norm() {
        let spec = ModelSpec {
            input_dim: 2,
            architecture: ArchitectureSpec::Custom {
                encoder: vec![super::super::LayerSpec::Fc { input: 2, output: 2 }],
                decoder: vec![super::super::LayerSpec::Fc { input: 2, output: 2 }],
            },
            latent: LatentSpace::Hypersphere { dim: 2 },
            ..small_spec(LatentSpace::Euclidean { dim: 2 })
        };
        let id = AutoencoderModel::identity(2);
        let m = AutoencoderModel::from_networks(spec, id.encoder.clone(), id.decoder.clone()).unwrap();
        let z = m.encode(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(z.data(), &[0.6, 0.8]);
        assert!(matches!(
            m.encode(&Tensor::vector(vec![0.0, 0.0])),
            Err(Error::DegenerateProjection { .. })
        ));
    }

    #[test]
    fn zero_weight_fcres2_encoder_maps_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ModelSpec {
            architecture: ArchitectureSpec::Fcres2,
            ..small_spec(LatentSpace::Euclidean { dim: 3 })
        };
        let mut m = AutoencoderModel::new(spec, &mut rng).unwrap();
        zero_net(m.encoder_mut());
        let z = m.encode(&Tensor::vector(vec![1.5, -0.3])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_model_has_zero_energy() {
        let m = AutoencoderModel::identity(3);
        let x = Tensor::vector(vec![0.3, -2.0, 7.0]);
        assert_eq!(m.recon_error(&x).unwrap(), 0.0);
        assert_eq!(m.decode(&x).unwrap().data(), x.data());
        assert_eq!(m.latent_energy(&x).unwrap(), vec![0.0]);
    }

    #[test]
    fn recon_error_applies_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = AutoencoderModel::new(small_spec(LatentSpace::Euclidean { dim: 2 }), &mut rng).unwrap();
        zero_net(m.decoder_mut());
        let x = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(m.recon_error(&x).unwrap(), 0.5);
        let mut spec = m.spec().clone();
        spec.recon_scale = 1.0;
        let m1 = AutoencoderModel::from_networks(spec, m.encoder.clone(), m.decoder.clone()).unwrap();
        assert_eq!(m1.recon_error(&x).unwrap(), 1.0);
    }

    #[test]
    fn latent_energy_is_energy_of_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = AutoencoderModel::new(small_spec(LatentSpace::Euclidean { dim: 2 }), &mut rng).unwrap();
        let z = Tensor::from_rows(&[[0.1, 0.9], [-1.0, 0.4], [2.0, 2.0]]).unwrap();
        let h = m.latent_energy(&z).unwrap();
        let e = m.recon_errors(&m.decode(&z).unwrap()).unwrap();
        assert_eq!(h, e);
    }

    #[test]
    fn latent_energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut spec = small_spec(LatentSpace::Euclidean { dim: 2 });
        spec.architecture = ArchitectureSpec::Mlp {
            hidden: vec![6, 6],
            activation: Activation::Sigmoid,
        };
        let m = AutoencoderModel::new(spec, &mut rng).unwrap();
        let om = OnManifold(&m);
        let err = finite_difference_check(
            |g, z| {
                let e = om.energy_node(g, z)?;
                g.sum(e)
            },
            &Tensor::from_rows(&[[0.4, -0.2]]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn hypersphere_codes_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = AutoencoderModel::new(small_spec(LatentSpace::Hypersphere { dim: 3 }), &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2], [3.0, -4.0], [-0.5, 0.5]]).unwrap();
        let z = m.encode(&x).unwrap();
        for r in z.iter_rows() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn state_round_trip_preserves_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = AutoencoderModel::new(small_spec(LatentSpace::Euclidean { dim: 2 }), &mut rng).unwrap();
        m.set_log_temperature(0.3).unwrap();
        let s = serde_json::to_string(&m.state()).unwrap();
        let back = AutoencoderModel::from_state(serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(back.temperature(), m.temperature());
    }

    #[test]
    fn fingerprint_tracks_parameters_and_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = AutoencoderModel::new(small_spec(LatentSpace::Euclidean { dim: 2 }), &mut rng).unwrap();
        let f0 = m.fingerprint();
        m.set_log_temperature(0.1).unwrap();
        let f1 = m.fingerprint();
        assert_ne!(f0, f1);
        m.params_mut()[0].data_mut()[0] += 1e-12;
        assert_ne!(f1, m.fingerprint());
    }

    #[test]
    fn invalid_latent_dims_rejected() {
        assert!(LatentSpace::Hypersphere { dim: 1 }.validate().is_err());
        assert!(LatentSpace::Euclidean { dim: 0 }.validate().is_err());
        assert!(LatentSpace::Euclidean { dim: 1 }.validate().is_ok());
    }
}
