//! MLP embedding network and its checkpoint format.
//!
//! Checkpoints are laid out as
//!
//! ```text
//! b"VIPENC1\n"                      8-byte magic
//! u64 LE                            header length in bytes
//! JSON header                       {"config": EncoderConfig, "layer_shapes": [[out, in], [out], ...]}
//! f64 LE blob                       W1, b1, W2, b2, ... each row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gradcore::{affine_forward, GradError, Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIPENC1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(EncoderError::InvalidConfig(format!(
                "all dimensions must be >= 1: input {}, hidden {:?}, output {}",
                self.input_dim, self.hidden_widths, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(out, in)` for each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((w, fan_in));
            fan_in = w;
        }
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("observation has {got} values, encoder expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad magic: not an encoder checkpoint")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// One affine layer: `weight` is `[out, in]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The embedding map from observation vectors to `output_dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: EncoderConfig,
    layer_shapes: Vec<Vec<usize>>,
}

impl Encoder {
    /// Kaiming-normal weights for relu, Xavier-normal for tanh, zero biases.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(out, fan_in)| {
                let std = match config.activation {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    Activation::Tanh => (2.0 / (fan_in + out) as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let w = (0..out * fan_in).map(|_| normal.sample(&mut rng)).collect();
                Layer {
                    weight: Tensor::matrix(out, fan_in, w),
                    bias: Tensor::zeros(&[out]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: EncoderConfig, layers: Vec<Layer>) -> Result<Self, EncoderError> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(EncoderError::SizeMismatch(format!(
                "config has {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, ((out, fan_in), l)) in dims.iter().zip(&layers).enumerate() {
            if l.weight.shape() != [*out, *fan_in] || l.bias.shape() != [*out] {
                return Err(EncoderError::SizeMismatch(format!(
                    "layer {i}: expected [{out}, {fan_in}] + [{out}], got {:?} + {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    /// Single linear layer with identity weights: `φ(o) = o`.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        let config = EncoderConfig {
            input_dim: dim,
            hidden_widths: vec![],
            output_dim: dim,
            activation: Activation::Relu,
            init_seed: 0,
        };
        let layers = vec![Layer {
            weight: Tensor::matrix(dim, dim, w),
            bias: Tensor::zeros(&[dim]),
        }];
        Self { config, layers }
    }

    /// Maps every observation to the zero vector.
    pub fn constant(input_dim: usize, output_dim: usize) -> Self {
        let config = EncoderConfig {
            input_dim,
            hidden_widths: vec![],
            output_dim,
            activation: Activation::Relu,
            init_seed: 0,
        };
        let layers = vec![Layer {
            weight: Tensor::zeros(&[output_dim, input_dim]),
            bias: Tensor::zeros(&[output_dim]),
        }];
        Self { config, layers }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Parameters in checkpoint order: W1, b1, W2, b2, ...
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), &mut l.weight),
                    (format!("layer{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }

    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>, EncoderError> {
        if obs.len() != self.config.input_dim {
            return Err(EncoderError::DimMismatch {
                expected: self.config.input_dim,
                got: obs.len(),
            });
        }
        Ok(self.forward(obs, 1))
    }

    /// Embeds each row of a `[B, input_dim]` matrix into a `[B, K]` matrix.
    pub fn embed_batch(&self, obs: &Tensor) -> Result<Tensor, EncoderError> {
        if obs.cols() != self.config.input_dim || obs.shape().len() != 2 {
            return Err(EncoderError::DimMismatch {
                expected: self.config.input_dim,
                got: obs.cols(),
            });
        }
        let rows = obs.rows();
        Ok(Tensor::matrix(rows, self.config.output_dim, self.forward(obs.data(), rows)))
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let (out, fan_in) = (l.weight.shape()[0], l.weight.shape()[1]);
            h = affine_forward(&h, rows, fan_in, l.weight.data(), Some(l.bias.data()), out);
            if i != last {
                let act = self.config.activation;
                h.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        h
    }

    /// Records the parameters as graph leaves, in [`Encoder::parameters`] order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters().into_iter().map(|p| g.leaf(p.clone())).collect()
    }

    /// Differentiable forward pass of `x` (`[B, input_dim]`) using parameter
    /// leaves previously created by [`Encoder::leaves`].
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, GradError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = g.linear(h, params[2 * i], params[2 * i + 1])?;
            if i != last {
                h = match self.config.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            layer_shapes: self.parameters().iter().map(|p| p.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.config.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in self.parameters() {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(EncoderError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(EncoderError::Truncated("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(EncoderError::Truncated(format!(
                "header needs {hlen} bytes, {} available",
                body.len()
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        header.config.validate()?;
        let blob = &body[hlen..];

        let dims = header.config.layer_dims();
        let expected_shapes: Vec<Vec<usize>> = dims
            .iter()
            .flat_map(|&(o, i)| [vec![o, i], vec![o]])
            .collect();
        if header.layer_shapes != expected_shapes {
            return Err(EncoderError::SizeMismatch(format!(
                "layer shapes {:?} disagree with config {:?}",
                header.layer_shapes, expected_shapes
            )));
        }
        let n = header.config.num_params();
        if blob.len() != 8 * n {
            return Err(EncoderError::SizeMismatch(format!(
                "header implies {n} weights ({} bytes), blob has {} bytes",
                8 * n,
                blob.len()
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let layers = dims
            .iter()
            .map(|&(o, i)| Layer {
                weight: Tensor::matrix(o, i, values.by_ref().take(o * i).collect()),
                bias: Tensor::vector(values.by_ref().take(o).collect()),
            })
            .collect();
        Encoder::from_layers(header.config, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(hidden: Vec<usize>, act: Activation) -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            hidden_widths: hidden,
            output_dim: 3,
            activation: act,
            init_seed: 42,
        }
    }

    fn random_obs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Encoder::init(cfg(vec![8, 8], Activation::Relu)).unwrap();
        let b = Encoder::init(cfg(vec![8, 8], Activation::Relu)).unwrap();
        assert_eq!(a, b);
        let mut c2 = cfg(vec![8, 8], Activation::Relu);
        c2.init_seed = 43;
        assert_ne!(a, Encoder::init(c2).unwrap());
    }

    #[test]
    fn degenerate_config_is_single_linear_layer() {
        let e = Encoder::init(EncoderConfig {
            input_dim: 2,
            hidden_widths: vec![],
            output_dim: 2,
            activation: Activation::Tanh,
            init_seed: 1,
        })
        .unwrap();
        assert_eq!(e.layers().len(), 1);
        assert_eq!(e.layers()[0].weight.shape(), &[2, 2]);
        assert_eq!(e.layers()[0].bias.shape(), &[2]);
    }

    #[test]
    fn zero_dims_are_rejected() {
        assert!(Encoder::init(cfg(vec![4, 0], Activation::Relu)).is_err());
        let mut c = cfg(vec![], Activation::Relu);
        c.output_dim = 0;
        assert!(Encoder::init(c).is_err());
    }

    #[test]
    fn init_scale_follows_fan_in() {
        let mut c = cfg(vec![400], Activation::Relu);
        c.input_dim = 200;
        let e = Encoder::init(c).unwrap();
        let w = e.layers()[0].weight.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 200.0).abs() < 0.1 * 2.0 / 200.0, "{var}");
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let e = Encoder::constant(5, 3);
        assert_eq!(e.embed(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn embed_rejects_wrong_dims() {
        let e = Encoder::init(cfg(vec![4], Activation::Relu)).unwrap();
        assert!(matches!(
            e.embed(&[1.0; 4]),
            Err(EncoderError::DimMismatch { expected: 5, got: 4 })
        ));
        assert!(e.embed_batch(&Tensor::zeros(&[3, 6])).is_err());
    }

    #[test]
    fn batch_rows_equal_single_embeds() {
        for act in [Activation::Relu, Activation::Tanh] {
            let e = Encoder::init(cfg(vec![16, 7], act)).unwrap();
            let obs = random_obs(20, 5, 9);
            let batch = e.embed_batch(&Tensor::from_rows(&obs)).unwrap();
            for (i, o) in obs.iter().enumerate() {
                assert_eq!(batch.row(i), e.embed(o).unwrap().as_slice());
            }
            let one = e.embed_batch(&Tensor::from_rows(&obs[..1])).unwrap();
            assert_eq!(one.row(0), e.embed(&obs[0]).unwrap().as_slice());
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let e = Encoder::init(cfg(vec![6, 4], Activation::Tanh)).unwrap();
        let obs = random_obs(4, 5, 3);
        let x = Tensor::from_rows(&obs);
        let mut g = Graph::new();
        let ps = e.leaves(&mut g);
        let xv = g.leaf(x.clone());
        let out = e.forward_graph(&mut g, &ps, xv).unwrap();
        assert_eq!(g.value(out), &e.embed_batch(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let e = Encoder::init(cfg(vec![12, 6], Activation::Relu)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.venc");
        e.save(&path).unwrap();
        let back = Encoder::load(&path).unwrap();
        assert_eq!(e, back);
        for o in random_obs(100, 5, 17) {
            let (a, b) = (e.embed(&o).unwrap(), back.embed(&o).unwrap());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let e = Encoder::init(cfg(vec![4], Activation::Relu)).unwrap();
        let bytes = e.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Encoder::from_bytes(&bad), Err(EncoderError::BadMagic)));

        assert!(matches!(
            Encoder::from_bytes(&bytes[..12]),
            Err(EncoderError::Truncated(_))
        ));
        assert!(matches!(
            Encoder::from_bytes(&bytes[..bytes.len() - 8]),
            Err(EncoderError::SizeMismatch(_))
        ));

        // rewrite the header so K disagrees with the blob length
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header["config"]["output_dim"] = 4.into();
        header["layer_shapes"] = serde_json::json!([[4, 5], [4], [4, 4], [4]]);
        header["config"]["hidden_widths"] = serde_json::json!([4]);
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = CHECKPOINT_MAGIC.to_vec();
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[16 + hlen..]);
        let err = Encoder::from_bytes(&forged).unwrap_err();
        assert!(matches!(err, EncoderError::SizeMismatch(_)), "{err}");
        assert!(err.to_string().starts_with("size mismatch"));
    }

    #[test]
    fn config_serializes_round_trip() {
        let c = cfg(vec![1024, 3], Activation::Tanh);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<EncoderConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<EncoderConfig>(
            r#"{"input_dim":1,"hidden_widths":[],"output_dim":1,"activation":"relu","init_seed":0,"extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn frozen_encoder_is_shareable_across_threads() {
        let e = Encoder::init(cfg(vec![8], Activation::Relu)).unwrap();
        let obs = random_obs(8, 5, 1);
        let expected: Vec<_> = obs.iter().map(|o| e.embed(o).unwrap()).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = obs
                .iter()
                .map(|o| s.spawn(|| e.embed(o).unwrap()))
                .collect();
            for (h, want) in handles.into_iter().zip(&expected) {
                assert_eq!(&h.join().unwrap(), want);
            }
        });
    }
}
