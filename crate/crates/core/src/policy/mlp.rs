//! Fully connected ReLU network with a linear output layer.
//!
//! Parameters are stored flat, layer by layer: the weight matrix (row-major,
//! `out × in`) followed by the bias vector. Batched evaluation goes through
//! `matrixmultiply`; activations are kept so the batch can be differentiated.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;

/// Layer widths of the cart-pole controller.
pub const CARTPOLE_LAYERS: [usize; 5] = [4, 64, 64, 64, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Sidecar written next to a binary parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSidecar {
    pub layer_sizes: Vec<usize>,
    pub parameter_count: usize,
    pub encoding: String,
}

const BLOB_ENCODING: &str = "f64-le";

pub fn parameter_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self, PolicyError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(PolicyError::Topology(sizes.to_vec()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            data: vec![0.0; parameter_count(sizes)],
        })
    }

    pub fn from_flat(sizes: &[usize], data: Vec<f64>) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(sizes)?;
        if data.len() != p.data.len() {
            return Err(PolicyError::ParameterCount {
                expected: p.data.len(),
                got: data.len(),
            });
        }
        p.data = data;
        Ok(p)
    }

    /// He-style uniform initialization: weights in `±√(6/fan_in)`, zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(sizes)?;
        let layers: Vec<Layer> = p.layers().collect();
        for layer in layers {
            let limit = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut p.data[layer.weights..layer.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let layer = Layer {
                weights: offset,
                bias: offset + w[0] * w[1],
                fan_in: w[0],
                fan_out: w[1],
            };
            offset = layer.bias + w[1];
            layer
        })
    }

    /// Single-sample evaluation.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), PolicyError> {
        if x.len() != self.input_dim() || out.len() != self.output_dim() {
            return Err(PolicyError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut acts = Activations::default();
        self.forward_batch(x, 1, &mut acts);
        out.copy_from_slice(acts.output());
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, PolicyError> {
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(x, &mut out)?;
        Ok(out[0])
    }

    /// Evaluates `batch` inputs stored row-major in `inputs`, keeping every
    /// layer's post-activation values in `acts`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize, acts: &mut Activations) {
        debug_assert_eq!(inputs.len(), batch * self.input_dim());
        let n_layers = self.sizes.len() - 1;
        acts.resize(&self.sizes, batch);
        acts.values[0].copy_from_slice(inputs);
        for (l, layer) in self.layers().enumerate() {
            let (done, rest) = acts.values.split_at_mut(l + 1);
            let input = &done[l];
            let output = &mut rest[0];
            let w = &self.data[layer.weights..layer.bias];
            let b = &self.data[layer.bias..layer.bias + layer.fan_out];
            // output (batch × out) = input (batch × in) · Wᵀ
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    layer.fan_in,
                    layer.fan_out,
                    1.0,
                    input.as_ptr(),
                    layer.fan_in as isize,
                    1,
                    w.as_ptr(),
                    1,
                    layer.fan_in as isize,
                    0.0,
                    output.as_mut_ptr(),
                    layer.fan_out as isize,
                    1,
                );
            }
            let hidden = l + 1 < n_layers;
            for row in output.chunks_exact_mut(layer.fan_out) {
                for (o, bias) in row.iter_mut().zip(b) {
                    *o += bias;
                    if hidden && *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
        }
    }

    /// Back-propagates `grad_out` (batch × out) through a stored forward
    /// pass. Parameter gradients are accumulated into `grad_params`; the
    /// gradient with respect to the inputs overwrites `grad_input`.
    pub fn backward_batch(
        &self,
        acts: &Activations,
        grad_out: &[f64],
        grad_params: &mut [f64],
        grad_input: &mut [f64],
        scratch: &mut BackwardScratch,
    ) {
        let batch = acts.batch;
        debug_assert_eq!(grad_out.len(), batch * self.output_dim());
        debug_assert_eq!(grad_params.len(), self.data.len());
        debug_assert_eq!(grad_input.len(), batch * self.input_dim());
        let layers: Vec<Layer> = self.layers().collect();
        let n_layers = layers.len();
        scratch.delta.clear();
        scratch.delta.extend_from_slice(grad_out);
        for l in (0..n_layers).rev() {
            let layer = layers[l];
            let input = &acts.values[l];
            if l + 1 < n_layers {
                for (d, &a) in scratch.delta.iter_mut().zip(&acts.values[l + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (gw, gb) =
                grad_params[layer.weights..layer.bias + layer.fan_out].split_at_mut(layer.fan_in * layer.fan_out);
            // gW (out × in) += δᵀ · input
            unsafe {
                matrixmultiply::dgemm(
                    layer.fan_out,
                    batch,
                    layer.fan_in,
                    1.0,
                    scratch.delta.as_ptr(),
                    1,
                    layer.fan_out as isize,
                    input.as_ptr(),
                    layer.fan_in as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    layer.fan_in as isize,
                    1,
                );
            }
            for row in scratch.delta.chunks_exact(layer.fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // δ_prev (batch × in) = δ · W
            let target: &mut Vec<f64> = &mut scratch.next;
            target.clear();
            target.resize(batch * layer.fan_in, 0.0);
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    layer.fan_out,
                    layer.fan_in,
                    1.0,
                    scratch.delta.as_ptr(),
                    layer.fan_out as isize,
                    1,
                    self.data[layer.weights..].as_ptr(),
                    layer.fan_in as isize,
                    1,
                    0.0,
                    target.as_mut_ptr(),
                    layer.fan_in as isize,
                    1,
                );
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.next);
        }
        grad_input.copy_from_slice(&scratch.delta);
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(sizes: &[usize], bytes: &[u8]) -> Result<Self, PolicyError> {
        if bytes.len() % 8 != 0 {
            return Err(PolicyError::Blob(format!(
                "length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_flat(sizes, data)
    }

    pub fn sidecar(&self) -> MlpSidecar {
        MlpSidecar {
            layer_sizes: self.sizes.clone(),
            parameter_count: self.data.len(),
            encoding: BLOB_ENCODING.to_owned(),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<(), PolicyError> {
        fs::write(stem.with_extension("bin"), self.to_le_bytes())?;
        let json = serde_json::to_string_pretty(&self.sidecar()).map_err(|e| PolicyError::Blob(e.to_string()))?;
        fs::write(stem.with_extension("json"), json + "\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, PolicyError> {
        let sidecar: MlpSidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)
            .map_err(|e| PolicyError::Blob(e.to_string()))?;
        if sidecar.encoding != BLOB_ENCODING {
            return Err(PolicyError::Blob(format!(
                "unsupported encoding {:?}",
                sidecar.encoding
            )));
        }
        let params = Self::from_le_bytes(&sidecar.layer_sizes, &fs::read(stem.with_extension("bin"))?)?;
        if params.len() != sidecar.parameter_count {
            return Err(PolicyError::ParameterCount {
                expected: sidecar.parameter_count,
                got: params.len(),
            });
        }
        Ok(params)
    }
}

/// Per-layer activations of one batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    batch: usize,
    values: Vec<Vec<f64>>,
}

impl Activations {
    fn resize(&mut self, sizes: &[usize], batch: usize) {
        self.batch = batch;
        self.values.resize_with(sizes.len(), Vec::new);
        for (v, &width) in self.values.iter_mut().zip(sizes) {
            v.resize(batch * width, 0.0);
        }
    }

    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackwardScratch {
    delta: Vec<f64>,
    next: Vec<f64>,
}
