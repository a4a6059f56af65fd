//! Minimal dense neural kernel shared by the quantizer, the collaborative
//! pretraining, and the CTR tower.
//!
//! The pieces are deliberately small: named parameter matrices with gradient
//! accumulators ([`ParamSet`]), a per-model recording tape for reverse-mode
//! differentiation ([`tape::Tape`]), affine/activation stacks ([`Mlp`]), an
//! adaptive-moment optimizer ([`adam::Adam`]), a central finite-difference
//! gradient verifier ([`gradcheck::finite_diff_check`]), and a versioned
//! checkpoint format ([`checkpoint`]).
//!
//! Everything is 64-bit: the gradient verification tolerances in the test
//! suite assume f64 throughout. A model instance (parameters + tape +
//! optimizer state) is single-owner mutable; distinct instances can train
//! concurrently without shared state.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod tape;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use tape::{Bound, NodeId, Tape};

/// Dense 64-bit matrix; scalars are 1x1, row vectors 1xN.
pub type Mat = Array2<f64>;

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named parameter matrix with a same-shape gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    /// Non-trainable parameters keep their values and moments untouched by
    /// the optimizer. Used for codebook freezing and adaptation phases.
    pub trainable: bool,
}

/// An ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let grad = Mat::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Mat) {
        assert_eq!(
            self.params[id.0].value.raw_dim(),
            value.raw_dim(),
            "set_value must preserve shape"
        );
        self.params[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.params[id.0].grad
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Mat) {
        self.params[id.0].grad += g;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Activation applied between affine layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

/// Affine-stack description: `layers[i]` is the output width of the i-th
/// affine layer; the activation is applied after every layer except the last.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layers: Vec<usize>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MlpSpec needs at least one layer".into()));
        }
        if layers.iter().any(|&w| w == 0) {
            return Err(Error::Config("MlpSpec layer widths must be positive".into()));
        }
        Ok(Self { layers, activation })
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().unwrap()
    }
}

/// Seeded uniform init in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// A multi-layer perceptron bound to parameters inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub input_dim: usize,
    /// (weight, bias) per layer.
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Creates the layer parameters (glorot-uniform weights, zero biases)
    /// under `prefix` and returns the wired model.
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        spec: MlpSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut prev = input_dim;
        for (i, &w) in spec.layers.iter().enumerate() {
            let wid = params.add(format!("{prefix}.w{i}"), glorot_uniform(prev, w, rng));
            let bid = params.add(format!("{prefix}.b{i}"), Mat::zeros((1, w)));
            layers.push((wid, bid));
            prev = w;
        }
        Self {
            spec,
            input_dim,
            layers,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Number of scalar parameters in the stack.
    pub fn param_count(&self) -> usize {
        let mut prev = self.input_dim;
        let mut total = 0;
        for &w in &self.spec.layers {
            total += prev * w + w;
            prev = w;
        }
        total
    }

    fn check_input(&self, layer: usize, expected: usize, found: usize) -> Result<()> {
        if expected != found {
            return Err(Error::Shape {
                context: format!("mlp layer {layer}"),
                expected: format!("input width {expected}"),
                found: format!("{found}"),
            });
        }
        Ok(())
    }

    /// Recorded forward pass for training.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        params: &ParamSet,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        let mut prev = self.input_dim;
        let last = self.layers.len() - 1;
        for (i, &(wid, bid)) in self.layers.iter().enumerate() {
            self.check_input(i, prev, tape.value(h).ncols())?;
            let w = bound.bind(tape, params, wid);
            let b = bound.bind(tape, params, bid);
            let affine = tape.matmul(h, w);
            h = tape.add_row(affine, b);
            if i != last {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Sigmoid => tape.sigmoid(h),
                    Activation::Identity => h,
                };
            }
            prev = self.spec.layers[i];
        }
        Ok(h)
    }

    /// Plain forward pass for inference; no recording, no gradients.
    pub fn forward_plain(&self, params: &ParamSet, x: &Mat) -> Result<Mat> {
        let mut h = x.clone();
        let mut prev = self.input_dim;
        let last = self.layers.len() - 1;
        for (i, &(wid, bid)) in self.layers.iter().enumerate() {
            self.check_input(i, prev, h.ncols())?;
            let mut out = h.dot(params.value(wid));
            out += params.value(bid);
            if i != last {
                match self.spec.activation {
                    Activation::Relu => out.mapv_inplace(|v| v.max(0.0)),
                    Activation::Sigmoid => out.mapv_inplace(sigmoid),
                    Activation::Identity => {}
                }
            }
            h = out;
            prev = self.spec.layers[i];
        }
        Ok(h)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
