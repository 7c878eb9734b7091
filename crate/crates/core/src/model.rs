//! Task-specific MLP evaluated from a flat parameter vector, and the per-layer
//! block partition of that vector.
//!
//! Layer `l` owns a contiguous block holding an `out x (in + 1)` matrix in
//! row-major order: row `o` is the incoming weights of unit `o` followed by
//! its bias.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, VarRef};
use crate::tasks::{Split, TaskKind};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("model expects inputs with {expected} columns, got shape {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Linear output scored by mean squared error.
    Regression,
    /// Linear logits scored by softmax cross-entropy.
    Classification,
}

impl From<TaskKind> for Head {
    fn from(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Regression => Head::Regression,
            TaskKind::Classification => Head::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, head: Head) -> Result<Self, ModelError> {
        let spec = Self { layer_sizes, head };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::InvalidSpec(
                "need at least input and output sizes".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "layer sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(out, in + 1)` for layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l] + 1)
    }

    pub fn layer_len(&self, l: usize) -> usize {
        let (r, c) = self.layer_shape(l);
        r * c
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_len(l)).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }
}

/// All weights and biases of a model, concatenated in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams(pub Tensor);

impl FlatParams {
    pub fn len(&self) -> usize {
        self.0.numel()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Weights uniform in `±1 / sqrt(fan_in)`, biases zero.
pub fn init_params<R: Rng>(spec: &MlpSpec, rng: &mut R) -> FlatParams {
    let mut values = Vec::with_capacity(spec.param_count());
    for l in 0..spec.num_layers() {
        let (out, cols) = spec.layer_shape(l);
        let fan_in = cols - 1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..out {
            for _ in 0..fan_in {
                values.push(rng.random_range(-bound..bound));
            }
            values.push(0.0);
        }
    }
    FlatParams(Tensor::vector(values))
}

/// One block of a partition: flat indices plus the tensor shape they form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub indices: Arc<[usize]>,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ordered disjoint blocks covering `0..dim`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    blocks: Vec<Block>,
    dim: usize,
}

impl Partition {
    pub fn new(blocks: Vec<Block>) -> Result<Self, ModelError> {
        if blocks.is_empty() {
            return Err(ModelError::InvalidPartition("no blocks".into()));
        }
        let dim: usize = blocks.iter().map(Block::len).sum();
        let mut seen = vec![false; dim];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(ModelError::InvalidPartition(format!("block {b} is empty")));
            }
            if block.shape.iter().product::<usize>() != block.len() || block.shape.contains(&0) {
                return Err(ModelError::InvalidPartition(format!(
                    "block {b} shape {:?} does not hold {} entries",
                    block.shape,
                    block.len()
                )));
            }
            for &i in block.indices.iter() {
                if i >= dim || seen[i] {
                    return Err(ModelError::InvalidPartition(format!(
                        "index {i} in block {b} is out of range or repeated"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(Self { blocks, dim })
    }

    /// Consecutive blocks with the given tensor shapes.
    pub fn contiguous(shapes: &[Vec<usize>]) -> Result<Self, ModelError> {
        let mut offset = 0;
        let blocks = shapes
            .iter()
            .map(|shape| {
                let len: usize = shape.iter().product();
                let block = Block {
                    indices: (offset..offset + len).collect(),
                    shape: shape.clone(),
                };
                offset += len;
                block
            })
            .collect();
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::len).collect()
    }
}

/// One block per layer, shallow to deep, each shaped `out x (in + 1)`.
pub fn partition_by_layer(spec: &MlpSpec) -> Partition {
    let shapes: Vec<Vec<usize>> = (0..spec.num_layers())
        .map(|l| {
            let (r, c) = spec.layer_shape(l);
            vec![r, c]
        })
        .collect();
    Partition::contiguous(&shapes).expect("layer blocks form a partition")
}

/// Predictions (`n x output_dim`) for `inputs` under the parameter node `params`.
pub fn forward(
    spec: &MlpSpec,
    params: VarRef,
    inputs: &Tensor,
    graph: &mut Graph,
) -> Result<VarRef, ModelError> {
    let expected = spec.param_count();
    let got = graph.value(params).numel();
    if graph.shape(params).len() != 1 || got != expected {
        return Err(ModelError::ParamCount { expected, got });
    }
    let n = match inputs.shape() {
        [n, c] if *c == spec.input_dim() => *n,
        other => {
            return Err(ModelError::InputShape {
                expected: spec.input_dim(),
                got: other.to_vec(),
            })
        }
    };
    let ones = graph.leaf(Tensor::ones(&[n, 1]));
    let mut h = graph.leaf(inputs.clone());
    let mut offset = 0;
    for l in 0..spec.num_layers() {
        let (out, cols) = spec.layer_shape(l);
        let block = graph.slice_axis(params, 0, offset, out * cols)?;
        let weights = graph.reshape(block, &[out, cols])?;
        offset += out * cols;
        let augmented = graph.concat(&[h, ones], 1)?;
        h = graph.mode_product(augmented, weights, 1)?;
        if l + 1 < spec.num_layers() {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}

/// Mean loss of the model on `data`: squared error or softmax cross-entropy.
pub fn loss(
    spec: &MlpSpec,
    params: VarRef,
    data: &Split,
    graph: &mut Graph,
) -> Result<VarRef, ModelError> {
    let pred = forward(spec, params, &data.inputs, graph)?;
    let value = match spec.head {
        Head::Regression => {
            let target = data.labels.reshaped(graph.shape(pred))?;
            let target = graph.leaf(target);
            graph.squared_error(pred, target)?
        }
        Head::Classification => graph.softmax_cross_entropy(pred, data.class_labels().into())?,
    };
    Ok(value)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let cols = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}
