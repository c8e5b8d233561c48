//! The implicit distance field: a fixed-architecture Softplus MLP over an
//! off-axis sinusoidal embedding of the query point.
//!
//! Everything the trainer needs is hand-derived for this architecture: the
//! forward pass, the exact input gradient (forward-mode tangents along the
//! three coordinate axes), and reverse-mode parameter gradients of any loss
//! that depends on both the output and its input gradient.

mod adam;
mod checkpoint;
mod real;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Dtype};
pub use real::Real;
pub use tape::{
    forward_batch, forward_with_gradient, loss_gradients, LossGradients, PointLoss, PointLossEval,
};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Off-axis positional embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Projection directions; normalized before use.
    pub directions: Vec<[f64; 3]>,
    /// Number of octaves per direction.
    pub frequencies: usize,
    /// Lowest angular frequency (rad/m); each octave doubles it.
    pub base_frequency: f64,
    pub include_input: bool,
}

/// The 13 distinct line directions through a 3x3x3 lattice: 3 axes, 6 face
/// diagonals, 4 body diagonals.
pub fn lattice_directions() -> Vec<[f64; 3]> {
    vec![
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, -1.0, 0.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.0, -1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, -1.0],
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [1.0, -1.0, -1.0],
    ]
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            directions: lattice_directions(),
            frequencies: 6,
            base_frequency: 1.0,
            include_input: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.directions.is_empty()
            || self
                .directions
                .iter()
                .any(|d| !(Vector3::from(*d).norm() > 1e-12) || d.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config(format!("{prefix}.directions"), "need non-zero finite directions"));
        }
        if self.frequencies == 0 {
            return Err(Error::config(format!("{prefix}.frequencies"), "must be >= 1"));
        }
        if !(self.base_frequency > 0.0 && self.base_frequency.is_finite()) {
            return Err(Error::config(format!("{prefix}.base_frequency"), "must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        3 * self.include_input as usize + 2 * self.directions.len() * self.frequencies
    }

    fn unit_directions(&self) -> Vec<Vector3<f64>> {
        self.directions.iter().map(|d| Vector3::from(*d).normalize()).collect()
    }

    fn frequency(&self, k: usize) -> f64 {
        self.base_frequency * (1u64 << k) as f64
    }

    /// Writes the embedding of `q` into `out` and, if given, the three
    /// columns of its Jacobian into `jac[j]` (derivative along axis `j`).
    ///
    /// Layout: raw `q` (optional), then for each direction `u` and octave `k`
    /// the pair `sin(f_k ⟨q,u⟩), cos(f_k ⟨q,u⟩)`.
    pub(crate) fn embed_into(&self, q: &[f64; 3], out: &mut [f64], mut jac: Option<[&mut [f64]; 3]>) {
        let mut c = 0;
        if self.include_input {
            out[..3].copy_from_slice(q);
            if let Some(j) = jac.as_mut() {
                for (axis, col) in j.iter_mut().enumerate() {
                    col[..3].fill(0.0);
                    col[axis] = 1.0;
                }
            }
            c = 3;
        }
        let qv = Vector3::from(*q);
        for u in self.unit_directions() {
            let proj = qv.dot(&u);
            for k in 0..self.frequencies {
                let f = self.frequency(k);
                let (s, co) = sin_cos(f * proj);
                out[c] = s;
                out[c + 1] = co;
                if let Some(j) = jac.as_mut() {
                    for (axis, col) in j.iter_mut().enumerate() {
                        col[c] = f * co * u[axis];
                        col[c + 1] = -f * s * u[axis];
                    }
                }
                c += 2;
            }
        }
    }

    pub fn embed(&self, q: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.embed_into(q, &mut out, None);
        out
    }
}

/// Layer sizes of the MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub width: usize,
    /// Zero-based hidden layer whose input is the previous activation
    /// concatenated with the embedding.
    pub skip_layer: Option<usize>,
    /// Multiplier on the initial output-layer weights. Small values start the
    /// field near zero, where the exponential free-space penalty is tame.
    pub output_init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 6,
            width: 256,
            skip_layer: Some(2),
            output_init_scale: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.hidden_layers == 0 {
            return Err(Error::config(format!("{prefix}.hidden_layers"), "must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::config(format!("{prefix}.width"), "must be >= 1"));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.hidden_layers {
                return Err(Error::config(
                    format!("{prefix}.skip_layer"),
                    "must name a hidden layer after the first",
                ));
            }
        }
        if !(self.output_init_scale >= 0.0 && self.output_init_scale.is_finite()) {
            return Err(Error::config(format!("{prefix}.output_init_scale"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Placement of one dense layer inside the flat parameter vector. Weights are
/// row-major `out x inp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inp: usize,
    pub out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

pub fn layer_shapes(embed_dim: usize, net: &NetworkConfig) -> Vec<LayerShape> {
    let mut shapes = Vec::with_capacity(net.hidden_layers + 1);
    let mut offset = 0;
    for l in 0..=net.hidden_layers {
        let inp = match l {
            0 => embed_dim,
            l if Some(l) == net.skip_layer => net.width + embed_dim,
            _ => net.width,
        };
        let out = if l == net.hidden_layers { 1 } else { net.width };
        shapes.push(LayerShape {
            inp,
            out,
            weight_offset: offset,
            bias_offset: offset + inp * out,
        });
        offset += inp * out + out;
    }
    shapes
}

/// All network parameters in one flat vector, with the configuration needed
/// to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    embedding: EmbeddingConfig,
    network: NetworkConfig,
    shapes: Vec<LayerShape>,
    data: Vec<T>,
}

impl<T: Real> FieldParams<T> {
    /// All-zero parameters.
    pub fn zeros(embedding: EmbeddingConfig, network: NetworkConfig) -> Self {
        let shapes = layer_shapes(embedding.dim(), &network);
        let len = shapes.last().map(|s| s.bias_offset + s.out).unwrap_or(0);
        Self {
            embedding,
            network,
            shapes,
            data: vec![T::zero(); len],
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero; the
    /// output layer is further scaled by `output_init_scale`.
    pub fn init<R: Rng + ?Sized>(embedding: EmbeddingConfig, network: NetworkConfig, rng: &mut R) -> Self {
        let out_scale = network.output_init_scale;
        let mut p = Self::zeros(embedding, network);
        let last = p.shapes.len() - 1;
        for (l, s) in p.shapes.clone().into_iter().enumerate() {
            let mut bound = (6.0 / (s.inp + s.out) as f64).sqrt();
            if l == last {
                bound *= out_scale;
            }
            for w in &mut p.data[s.weight_offset..s.bias_offset] {
                *w = T::from_f64(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 });
            }
        }
        p
    }

    pub fn from_parts(embedding: EmbeddingConfig, network: NetworkConfig, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(embedding, network);
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn embedding(&self) -> &EmbeddingConfig {
        &self.embedding
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.network
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// True for entries that are weights (as opposed to biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for s in &self.shapes {
            mask[s.weight_offset..s.bias_offset].fill(true);
        }
        mask
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let s = &self.shapes[layer];
        &self.data[s.weight_offset..s.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let s = &self.shapes[layer];
        &self.data[s.bias_offset..s.bias_offset + s.out]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteParams)
        }
    }

    /// Predicted signed distance at one point.
    pub fn forward(&self, q: [T; 3]) -> Result<T> {
        Ok(forward_batch(self, &[q])?[0])
    }

    /// Exact gradient of the prediction with respect to the query point.
    pub fn input_gradient(&self, q: [T; 3]) -> Result<[T; 3]> {
        Ok(forward_with_gradient(self, &[q])?.1[0])
    }

    /// Converts to another float type (e.g. for evaluating an `f32` map in `f64`).
    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            embedding: self.embedding.clone(),
            network: self.network.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|v| U::from_f64(Real::to_f64(*v))).collect(),
        }
    }
}

/// One out-of-line instance so every caller gets bit-identical values,
/// whether or not the optimizer would merge `sin` and `cos` at the call site.
#[inline(never)]
fn sin_cos(x: f64) -> (f64, f64) {
    x.sin_cos()
}

/// Free-function form of [`EmbeddingConfig::embed`].
pub fn embed(q: &[f64; 3], cfg: &EmbeddingConfig) -> Vec<f64> {
    cfg.embed(q)
}

/// Parameters of `cfg` drawn with the default initialization scheme.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    embedding: &EmbeddingConfig,
    network: &NetworkConfig,
    rng: &mut R,
) -> FieldParams<T> {
    FieldParams::init(embedding.clone(), network.clone(), rng)
}
