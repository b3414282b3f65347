//! Fully connected network with tanh hidden units and explicit backprop.
//!
//! Batches are row-major `(batch, features)` matrices. Each dense layer keeps
//! its weights as an `(in, out)` matrix so the forward pass is `X W + b`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Affine,
    /// Logistic sigmoid, range `(0, 1)`.
    UnitIntervalSquash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

impl LossKind {
    /// Mean loss over every element.
    pub fn loss(self, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        let n = pred.len() as f64;
        let sum: f64 = match self {
            LossKind::L1 => pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum(),
            LossKind::L2 => pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum(),
        };
        sum / n
    }

    /// Derivative of the mean loss with respect to each prediction.
    /// L1 uses `sign(0) = 0`.
    fn d_pred(self, pred: &Array2<f64>, target: ArrayView2<f64>) -> Array2<f64> {
        let scale = 1.0 / pred.len() as f64;
        let mut out = pred - &target;
        match self {
            LossKind::L1 => out.mapv_inplace(|r| sign(r) * scale),
            LossKind::L2 => out.mapv_inplace(|r| 2.0 * r * scale),
        }
        out
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    output_activation: OutputActivation,
    seed: u64,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

impl Mlp {
    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases.
    pub fn new(layer_sizes: &[usize], output_activation: OutputActivation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!("layer sizes must be positive, got {layer_sizes:?}")));
        }
        let mut rng = rng::seeded(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    bound * (2.0 * rng.random::<f64>() - 1.0)
                });
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            output_activation,
            seed,
        })
    }

    /// Builds a network from explicit layers. Consecutive dimensions must agree.
    pub fn from_layers(layers: Vec<Dense>, output_activation: OutputActivation, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Dimension {
                    expected: l.out_dim(),
                    got: l.bias.len(),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        let mlp = Self {
            layers,
            output_activation,
            seed,
        };
        if mlp.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("parameters must be finite".into()));
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::Dimension {
                expected: self.num_parameters(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols == self.input_dim() {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.input_dim(),
                got: cols,
            })
        }
    }

    fn finish(&self, z: &mut Array2<f64>) {
        if self.output_activation == OutputActivation::UnitIntervalSquash {
            z.mapv_inplace(sigmoid);
        }
    }

    /// Forward pass keeping every layer's post-activation output.
    fn forward_trace(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut current = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = current.dot(&l.weights) + &l.bias;
            if i == last {
                self.finish(&mut z);
            } else {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(std::mem::replace(&mut current, z));
        }
        acts.push(current);
        acts
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_trace(x).pop().expect("trace holds the output"))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Mean loss over the batch and its exact gradient.
    pub fn grad(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        loss_kind: LossKind,
    ) -> Result<(f64, Gradients)> {
        self.check_input(inputs.ncols())?;
        if inputs.nrows() == 0 {
            return Err(Error::Config("gradient of an empty batch".into()));
        }
        if targets.dim() != (inputs.nrows(), self.output_dim()) {
            return Err(Error::Dimension {
                expected: inputs.nrows() * self.output_dim(),
                got: targets.len(),
            });
        }
        let acts = self.forward_trace(inputs);
        let output = &acts[acts.len() - 1];
        let loss = loss_kind.loss(output.view(), targets);

        let mut delta = loss_kind.d_pred(output, targets);
        if self.output_activation == OutputActivation::UnitIntervalSquash {
            delta.zip_mut_with(output, |d, &y| *d *= y * (1.0 - y));
        }

        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let input = &acts[i];
            weights.push(input.t().dot(&delta));
            biases.push(delta.sum_axis(Axis(0)));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights.t());
                back.zip_mut_with(input, |d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        weights.reverse();
        biases.reverse();
        Ok((loss, Gradients { weights, biases }))
    }

    /// In-place `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        for ((l, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            l.weights.scaled_add(-learning_rate, gw);
            l.bias.scaled_add(-learning_rate, gb);
        }
    }
}

// Model files:
//   8-byte magic, u32 LE version, u64 LE header length, JSON header,
//   parameters as f32 LE, per layer weights (row-major, in x out) then bias.

pub const MODEL_MAGIC: &[u8; 8] = b"FRMODEL\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
    /// Seeds that produced the model, outermost first.
    pub seed_lineage: Vec<u64>,
    pub role: String,
    pub parameter_count: usize,
}

pub fn encode_model(mlp: &Mlp, role: &str, seed_lineage: &[u64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ModelHeader {
        layer_sizes: mlp.layer_sizes(),
        output_activation: mlp.output_activation,
        seed_lineage: seed_lineage.to_vec(),
        role: role.to_string(),
        parameter_count: mlp.num_parameters(),
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * mlp.num_parameters());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in mlp.parameters() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a model file; parameters come back rounded to `f32`.
pub fn decode_model(bytes: &[u8]) -> Result<(ModelHeader, Mlp)> {
    if bytes.len() < 20 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated model header".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[20..end])
        .map_err(|e| Error::Format(format!("malformed model header: {e}")))?;
    let mut mlp = Mlp::new(&header.layer_sizes, header.output_activation, 0)?;
    if mlp.num_parameters() != header.parameter_count
        || bytes.len() - end != 4 * header.parameter_count
    {
        return Err(Error::Format("parameter block length does not match header".into()));
    }
    let params: Vec<f64> = bytes[end..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    mlp.set_parameters(&params)?;
    mlp.seed = header.seed_lineage.first().copied().unwrap_or(0);
    Ok((header, mlp))
}

pub fn save_model(mlp: &Mlp, role: &str, seed_lineage: &[u64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(mlp, role, seed_lineage)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelHeader, Mlp)> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
