//! The shared encoder and the concept prediction head.
//!
//! The encoder is a plain MLP over flattened pixels: ReLU on every hidden
//! layer, linear on the final feature layer. The concept head is a single
//! affine layer with a sigmoid per concept. Parameters live in a named map so
//! the same tensors can be bound to a training tape, updated by SGD, and
//! serialized without any positional bookkeeping.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::math;
use crate::tape::{affine_forward, NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Scale applied on top of the fan-in rule for the concept head, keeping its
/// initial logits close to zero so early predictions stay near 0.5.
const HEAD_INIT_SCALE: f64 = 0.01;

/// Architecture of the encoder and head.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Input image dimensions as `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    /// Widths of the ReLU hidden layers (may be empty).
    pub hidden_sizes: Vec<usize>,
    /// Width of the linear output feature layer.
    pub feature_dim: usize,
    /// Number of binary concepts predicted by the head.
    pub n_concepts: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!(
                "input shape must be positive, got {h}x{w}x{c}"
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.n_concepts == 0 {
            return Err(Error::InvalidArgument(
                "n_concepts must be positive".into(),
            ));
        }
        if let Some(&z) = self.hidden_sizes.iter().find(|&&s| s == 0) {
            let _ = z;
            return Err(Error::InvalidArgument(
                "hidden layer sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }

    /// `(fan_in, fan_out)` of each encoder layer, ending at `feature_dim`.
    pub fn encoder_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden_sizes {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.feature_dim));
        dims
    }

    /// Names and shapes of every parameter tensor, in layer order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (fan_in, fan_out)) in self.encoder_dims().into_iter().enumerate() {
            out.push((format!("enc{i}.w"), alloc::vec![fan_in, fan_out]));
            out.push((format!("enc{i}.b"), alloc::vec![fan_out]));
        }
        out.push((
            "head.w".into(),
            alloc::vec![self.feature_dim, self.n_concepts],
        ));
        out.push(("head.b".into(), alloc::vec![self.n_concepts]));
        out
    }

    /// Appends the encoder to a tape, declaring its parameters as named
    /// inputs, and returns the feature node (one row per input row).
    pub fn encoder_graph(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let dims = self.encoder_dims();
        let n_layers = dims.len();
        let mut h = x;
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w = tape.input(&format!("enc{i}.w"), &[fan_in, fan_out])?;
            let b = tape.input(&format!("enc{i}.b"), &[fan_out])?;
            h = tape.affine(h, w, b)?;
            if i + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Appends the concept head to a tape and returns the per-concept
    /// probability node.
    pub fn head_graph(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let w = tape.input("head.w", &[self.feature_dim, self.n_concepts])?;
        let b = tape.input("head.b", &[self.n_concepts])?;
        let logits = tape.affine(features, w, b)?;
        Ok(tape.sigmoid(logits))
    }
}

/// A concrete set of parameter tensors for a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Random initialization: weights are uniform in `±1/sqrt(fan_in)` (the
    /// head additionally scaled by [`HEAD_INIT_SCALE`]), biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init_from_rng(config, &mut rng)
    }

    /// Like [`ModelParams::init`] but drawing from a caller-owned stream.
    pub fn init_from_rng<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let tensor = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[0];
                let mut scale = 1.0 / math::sqrt(fan_in as f64);
                if name.starts_with("head.") {
                    scale *= HEAD_INIT_SCALE;
                }
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                    .collect();
                Tensor::from_vec(shape, data)?
            };
            tensors.insert(name, tensor);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Reassembles parameters from named tensors, insisting on exactly the
    /// keys and shapes the config prescribes.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "missing parameter tensor {name:?}"
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// Runs the encoder on one image and returns its feature vector.
    pub fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w, c) = self.config.input_shape;
        if (image.height(), image.width(), image.channels()) != (h, w, c) {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}x{}, model expects {h}x{w}x{c}",
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        let dims = self.config.encoder_dims();
        let n_layers = dims.len();
        let mut act = image.pixels().to_vec();
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w = &self.tensors[&format!("enc{i}.w")];
            let b = &self.tensors[&format!("enc{i}.b")];
            act = affine_forward(&act, 1, fan_in, w.data(), fan_out, b.data());
            if i + 1 < n_layers {
                for v in &mut act {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(act)
    }

    /// Concept probabilities for an already-encoded feature vector.
    pub fn predict_concepts(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.config.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "feature has length {}, model expects {}",
                feature.len(),
                self.config.feature_dim
            )));
        }
        let w = &self.tensors["head.w"];
        let b = &self.tensors["head.b"];
        let mut out = affine_forward(
            feature,
            1,
            self.config.feature_dim,
            w.data(),
            self.config.n_concepts,
            b.data(),
        );
        for v in &mut out {
            *v = math::sigmoid(*v);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}
