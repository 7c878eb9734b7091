//! Inverse mirror maps `z -> phi`.
//!
//! [`MapKind::BlockIaf`] is the learned map: for block `i` of the partition,
//!
//! ```text
//! (alpha_i, mu_i) = d_i(e_1(z_1), .., e_{i-1}(z_{i-1}))
//! phi_i           = z_i * logistic(alpha_i) + mu_i
//! ```
//!
//! so the Jacobian is block lower triangular with diagonal `logistic(alpha_i)`,
//! and the map inverts exactly block by block. Encoders and decoders are small
//! ReLU networks whose linear layers act on each tensor mode separately
//! (a Kronecker-factored weight matrix). The other kinds are the linear
//! reference maps used to check that mirror descent reduces to (P)GD.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, VarRef};
use crate::model::{Block, Partition};

/// Length of the learnable constant fed to the first decoder.
pub const SEED_LEN: usize = 8;

/// Encoder depth; decoders mirror it after an input layer.
pub const DEPTH: usize = 3;

#[derive(Debug, Error)]
pub enum MirrorError {
    #[error("map expects a vector of length {expected}, got shape {got:?}")]
    Length { expected: usize, got: Vec<usize> },
    #[error("map parameters do not match the partition: {0}")]
    PartitionMismatch(String),
    #[error("diagonal map entries must be strictly positive (entry {index} is {value})")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("block IAF scale underflows to zero at coordinate {index} (alpha = {alpha}), so phi does not determine z")]
    Singular { index: usize, alpha: f64 },
    #[error("operation requires a block IAF map")]
    NotBlockIaf,
    #[error("monotonicity witness needs two distinct points")]
    IdenticalPoints,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Symmetric positive definite matrix with its cached factorization.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    matrix: Tensor,
    cholesky: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    pub fn new(matrix: Tensor) -> Result<Self, MirrorError> {
        let d = match matrix.shape() {
            [r, c] if r == c => *r,
            _ => return Err(MirrorError::NotSpd),
        };
        let m = DMatrix::from_row_slice(d, d, matrix.data());
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(MirrorError::NotSpd);
        }
        let cholesky = Cholesky::new(m).ok_or(MirrorError::NotSpd)?;
        Ok(Self { matrix, cholesky })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.cholesky
            .solve(&DVector::from_column_slice(rhs))
            .as_slice()
            .to_vec()
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

/// Linear layer acting on each tensor mode: `y = x x_0 F_0 x_1 F_1 .. + b`.
///
/// A decoder's input layer has a single factor applied to a flat vector, and
/// its output is reshaped to the bias shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeLayer<T> {
    pub factors: Vec<T>,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockNet<T> {
    /// Empty for the last block, whose encoding nobody consumes.
    pub encoder: Vec<ModeLayer<T>>,
    pub decoder: Vec<ModeLayer<T>>,
}

/// Parameters of the block IAF map (`T = Tensor`) or their graph handles
/// (`T = VarRef`).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockIaf<T> {
    pub seed: T,
    pub blocks: Vec<BlockNet<T>>,
    shapes: Vec<Vec<usize>>,
}

pub type BlockIafParams = BlockIaf<Tensor>;

/// `floor(shape / 2^level)` per mode, never below 1.
pub fn halved(shape: &[usize], level: u32) -> Vec<usize> {
    shape.iter().map(|&s| (s >> level).max(1)).collect()
}

/// Output shapes of the encoder layers for a block of `shape`.
pub fn encoder_shapes(shape: &[usize]) -> Vec<Vec<usize>> {
    (1..=DEPTH as u32).map(|l| halved(shape, l)).collect()
}

/// Output shapes of the decoder layers: the input layer's, then the three
/// upsampling layers', the last doubled along mode 0 to carry `(alpha, mu)`.
pub fn decoder_shapes(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..=DEPTH as u32).rev().map(|l| halved(shape, l)).collect();
    out.last_mut().expect("depth > 0")[0] *= 2;
    out
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Trainable start: random hidden layers, zero output layer.
    Trainable,
    /// Every weight random, biases random too.
    Random,
    /// Every decoder weight and the seed zero; encoders random.
    ZeroDecoders,
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let data = (0..numel(shape))
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// `(out, in)` per factor. Factors map `input` to `output` mode by mode; a
/// rank change means a dense input layer on a flat vector.
fn factor_shapes(input: &[usize], output: &[usize]) -> Vec<(usize, usize)> {
    if input.len() == 1 && output.len() != 1 {
        vec![(numel(output), input[0])]
    } else {
        output.iter().copied().zip(input.iter().copied()).collect()
    }
}

/// Every tensor shape of the map over blocks of `shapes`, in [`BlockIaf::named`] order.
fn layout(shapes: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![SEED_LEN]];
    let mut embedding_len = SEED_LEN;
    for (i, shape) in shapes.iter().enumerate() {
        let mut enc = Vec::new();
        if i + 1 < shapes.len() {
            let mut input = shape.clone();
            for o in encoder_shapes(shape) {
                enc.extend(
                    factor_shapes(&input, &o)
                        .into_iter()
                        .map(|(a, b)| vec![a, b]),
                );
                enc.push(o.clone());
                input = o;
            }
        }
        let mut input = vec![embedding_len];
        let mut dec = Vec::new();
        for o in decoder_shapes(shape) {
            dec.extend(
                factor_shapes(&input, &o)
                    .into_iter()
                    .map(|(a, b)| vec![a, b]),
            );
            dec.push(o.clone());
            input = o;
        }
        out.extend(enc);
        out.extend(dec);
        if i + 1 < shapes.len() {
            let code = numel(encoder_shapes(shape).last().expect("depth > 0"));
            embedding_len = if i == 0 { code } else { embedding_len + code };
        }
    }
    out
}

fn make_layer<R: Rng>(
    rng: &mut R,
    input: &[usize],
    output: &[usize],
    relu_follows: bool,
    zero: bool,
    random_bias: bool,
) -> ModeLayer<Tensor> {
    let factors = factor_shapes(input, output)
        .into_iter()
        .enumerate()
        .map(|(k, (o, i))| {
            if zero {
                return Tensor::zeros(&[o, i]);
            }
            let gain = if k == 0 && relu_follows { 2.0 } else { 1.0 };
            uniform(rng, &[o, i], (3.0 * gain / i as f64).sqrt())
        })
        .collect();
    let bias = if random_bias {
        uniform(rng, output, 0.5)
    } else {
        Tensor::zeros(output)
    };
    ModeLayer { factors, bias }
}

impl BlockIaf<Tensor> {
    /// Starting point for meta-training: hidden layers random, output layer of
    /// every decoder zero in its first mode factor and bias, so the map starts
    /// at `phi = z / 2` yet every factor receives gradient.
    pub fn init<R: Rng>(partition: &Partition, rng: &mut R) -> Self {
        Self::build(partition, rng, Init::Trainable)
    }

    /// Fully random parameters, for exercising the map away from its start.
    pub fn random<R: Rng>(partition: &Partition, rng: &mut R) -> Self {
        Self::build(partition, rng, Init::Random)
    }

    /// All decoder weights, biases and the seed zero: `alpha = mu = 0`.
    pub fn zero_decoders<R: Rng>(partition: &Partition, rng: &mut R) -> Self {
        Self::build(partition, rng, Init::ZeroDecoders)
    }

    fn build<R: Rng>(partition: &Partition, rng: &mut R, init: Init) -> Self {
        let shapes: Vec<Vec<usize>> = partition.blocks().iter().map(|b| b.shape.clone()).collect();
        let random_bias = init == Init::Random;
        let mut embedding_len = SEED_LEN;
        let mut blocks = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let dec_shapes = decoder_shapes(shape);
            let mut decoder = Vec::with_capacity(DEPTH + 1);
            let mut input = vec![embedding_len];
            for (l, out) in dec_shapes.iter().enumerate() {
                let last = l == DEPTH;
                let layer = match init {
                    Init::ZeroDecoders => make_layer(rng, &input, out, !last, true, false),
                    Init::Random => make_layer(rng, &input, out, !last, false, true),
                    Init::Trainable if last => {
                        let mut layer = make_layer(rng, &input, out, false, false, false);
                        layer.factors[0] = Tensor::zeros(layer.factors[0].shape());
                        layer
                    }
                    Init::Trainable => make_layer(rng, &input, out, true, false, false),
                };
                decoder.push(layer);
                input = out.clone();
            }
            let mut encoder = Vec::new();
            if i + 1 < shapes.len() {
                let mut input = shape.clone();
                for (l, out) in encoder_shapes(shape).iter().enumerate() {
                    encoder.push(make_layer(
                        rng,
                        &input,
                        out,
                        l + 1 < DEPTH,
                        false,
                        random_bias,
                    ));
                    input = out.clone();
                }
                let code = encoder_shapes(shape)
                    .last()
                    .map(|s| numel(s))
                    .expect("depth > 0");
                embedding_len = if i == 0 { code } else { embedding_len + code };
            }
            blocks.push(BlockNet { encoder, decoder });
        }
        let seed = match init {
            Init::ZeroDecoders => Tensor::zeros(&[SEED_LEN]),
            _ => uniform(rng, &[SEED_LEN], 1.0),
        };
        Self {
            seed,
            blocks,
            shapes,
        }
    }

    /// Checks tensor shapes against the layer layout a partition implies.
    pub fn check_against(&self, partition: &Partition) -> Result<(), MirrorError> {
        let shapes: Vec<Vec<usize>> = partition.blocks().iter().map(|b| b.shape.clone()).collect();
        if shapes != self.shapes {
            return Err(MirrorError::PartitionMismatch(format!(
                "block shapes {:?} vs {:?}",
                self.shapes, shapes
            )));
        }
        let mine = self.named();
        let expected = layout(&shapes);
        if mine.len() != expected.len() {
            return Err(MirrorError::PartitionMismatch("layer count differs".into()));
        }
        for ((name, a), b) in mine.iter().zip(&expected) {
            if a.shape() != b.as_slice() {
                return Err(MirrorError::PartitionMismatch(format!(
                    "{name}: shape {:?}, expected {b:?}",
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T> BlockIaf<T> {
    pub fn block_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("seed".to_string(), &self.seed)];
        for (i, block) in self.blocks.iter().enumerate() {
            for (part, layers) in [("enc", &block.encoder), ("dec", &block.decoder)] {
                for (l, layer) in layers.iter().enumerate() {
                    for (k, f) in layer.factors.iter().enumerate() {
                        out.push((format!("block{i}.{part}{l}.factor{k}"), f));
                    }
                    out.push((format!("block{i}.{part}{l}.bias"), &layer.bias));
                }
            }
        }
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.seed];
        for block in self.blocks.iter_mut() {
            for layer in block.encoder.iter_mut().chain(block.decoder.iter_mut()) {
                out.extend(layer.factors.iter_mut());
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn map_values<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockIaf<U> {
        fn layer<T, U>(l: &ModeLayer<T>, f: &mut impl FnMut(&T) -> U) -> ModeLayer<U> {
            ModeLayer {
                factors: l.factors.iter().map(&mut *f).collect(),
                bias: f(&l.bias),
            }
        }
        let seed = f(&self.seed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockNet {
                encoder: b.encoder.iter().map(|l| layer(l, &mut f)).collect(),
                decoder: b.decoder.iter().map(|l| layer(l, &mut f)).collect(),
            })
            .collect();
        BlockIaf {
            seed,
            blocks,
            shapes: self.shapes.clone(),
        }
    }
}

fn apply_layers(
    g: &mut Graph,
    layers: &[ModeLayer<VarRef>],
    mut x: VarRef,
) -> Result<VarRef, AutodiffError> {
    for (l, layer) in layers.iter().enumerate() {
        for (k, &f) in layer.factors.iter().enumerate() {
            x = g.mode_product(x, f, k)?;
        }
        let shape = g.shape(layer.bias).to_vec();
        x = g.reshape(x, &shape)?;
        x = g.add(x, layer.bias)?;
        if l + 1 < layers.len() {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

impl BlockIaf<VarRef> {
    /// Flattened code `e_i(z_i)` of a block given as a tensor of its shape.
    fn encode(&self, g: &mut Graph, i: usize, z_block: VarRef) -> Result<VarRef, AutodiffError> {
        let code = apply_layers(g, &self.blocks[i].encoder, z_block)?;
        let n = g.value(code).numel();
        g.reshape(code, &[n])
    }

    /// `(alpha_i, mu_i)` shaped like block `i`, from the codes of earlier blocks.
    fn decode(
        &self,
        g: &mut Graph,
        i: usize,
        codes: &[VarRef],
    ) -> Result<(VarRef, VarRef), AutodiffError> {
        let input = match codes {
            [] => self.seed,
            [one] => *one,
            many => g.concat(many, 0)?,
        };
        let out = apply_layers(g, &self.blocks[i].decoder, input)?;
        let rows = self.shapes[i][0];
        let alpha = g.slice_axis(out, 0, 0, rows)?;
        let mu = g.slice_axis(out, 0, rows, rows)?;
        Ok((alpha, mu))
    }
}

/// Selects the entries of `block` from the flat vector `v`, shaped as the block.
fn take_block(g: &mut Graph, v: VarRef, block: &Block) -> Result<VarRef, AutodiffError> {
    let flat = match contiguous_start(block) {
        Some(start) => g.slice_axis(v, 0, start, block.len())?,
        None => g.gather(v, block.indices.clone())?,
    };
    g.reshape(flat, &block.shape)
}

fn contiguous_start(block: &Block) -> Option<usize> {
    let first = block.indices[0];
    block
        .indices
        .iter()
        .enumerate()
        .all(|(k, &i)| i == first + k)
        .then_some(first)
}

fn is_ordered_contiguous(partition: &Partition) -> bool {
    let mut next = 0;
    for b in partition.blocks() {
        match contiguous_start(b) {
            Some(s) if s == next => next += b.len(),
            _ => return false,
        }
    }
    true
}

/// Reassembles per-block pieces (any shape) into a flat vector.
fn assemble(
    g: &mut Graph,
    partition: &Partition,
    pieces: &[VarRef],
) -> Result<VarRef, AutodiffError> {
    let mut flat = Vec::with_capacity(pieces.len());
    for (&p, b) in pieces.iter().zip(partition.blocks()) {
        flat.push(g.reshape(p, &[b.len()])?);
    }
    if is_ordered_contiguous(partition) {
        return if flat.len() == 1 {
            Ok(flat[0])
        } else {
            g.concat(&flat, 0)
        };
    }
    let mut total: Option<VarRef> = None;
    for (p, b) in flat.into_iter().zip(partition.blocks()) {
        let s = g.scatter(p, b.indices.clone(), vec![partition.dim()])?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("partition has blocks"))
}

fn assemble_values(partition: &Partition, pieces: &[&Tensor]) -> Tensor {
    let mut out = vec![0.0; partition.dim()];
    for (p, b) in pieces.iter().zip(partition.blocks()) {
        for (&i, &v) in b.indices.iter().zip(p.data()) {
            out[i] = v;
        }
    }
    Tensor::vector(out)
}

/// The inverse mirror map `g = (grad h)^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub enum MapKind {
    Identity,
    DiagonalLinear(Tensor),
    SpdLinear(SpdMatrix),
    BlockIaf(BlockIafParams),
}

impl MapKind {
    pub fn diagonal(p: Tensor) -> Result<Self, MirrorError> {
        if let Some((index, &value)) = p.data().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(MirrorError::NonPositiveDiagonal { index, value });
        }
        Ok(MapKind::DiagonalLinear(p))
    }

    pub fn spd(matrix: Tensor) -> Result<Self, MirrorError> {
        Ok(MapKind::SpdLinear(SpdMatrix::new(matrix)?))
    }

    /// Learnable tensors with stable names, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            MapKind::Identity => Vec::new(),
            MapKind::DiagonalLinear(p) => vec![("precond".to_string(), p)],
            MapKind::SpdLinear(m) => vec![("spd".to_string(), &m.matrix)],
            MapKind::BlockIaf(params) => params.named(),
        }
    }

    /// Mutable learnable tensors, same order as [`MapKind::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            MapKind::Identity => Vec::new(),
            MapKind::DiagonalLinear(p) => vec![p],
            MapKind::SpdLinear(m) => vec![&mut m.matrix],
            MapKind::BlockIaf(params) => params.values_mut(),
        }
    }

    fn check(&self, partition: &Partition) -> Result<(), MirrorError> {
        let d = partition.dim();
        match self {
            MapKind::Identity => Ok(()),
            MapKind::DiagonalLinear(p) if p.shape() == [d] => Ok(()),
            MapKind::SpdLinear(m) if m.dim() == d => Ok(()),
            MapKind::BlockIaf(params) => params.check_against(partition),
            _ => Err(MirrorError::PartitionMismatch(format!(
                "linear map does not act on dimension {d}"
            ))),
        }
    }

    /// Adds the map parameters to `g` as leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundMap {
        match self {
            MapKind::Identity => BoundMap::Identity,
            MapKind::DiagonalLinear(p) => BoundMap::Diagonal(g.leaf(p.clone())),
            MapKind::SpdLinear(m) => BoundMap::Spd(g.leaf(m.matrix.clone())),
            MapKind::BlockIaf(params) => {
                BoundMap::BlockIaf(params.map_values(|t| g.leaf(t.clone())))
            }
        }
    }
}

/// A map whose parameters live in a graph.
#[derive(Clone, Debug)]
pub enum BoundMap {
    Identity,
    Diagonal(VarRef),
    Spd(VarRef),
    BlockIaf(BlockIaf<VarRef>),
}

impl BoundMap {
    /// Parameter leaves in the order of [`MapKind::named_tensors`].
    pub fn params(&self) -> Vec<VarRef> {
        match self {
            BoundMap::Identity => Vec::new(),
            BoundMap::Diagonal(p) | BoundMap::Spd(p) => vec![*p],
            BoundMap::BlockIaf(b) => b.named().into_iter().map(|(_, v)| *v).collect(),
        }
    }

    /// `phi = g(z)`, differentiable in `z` and the map parameters.
    pub fn forward(
        &self,
        g: &mut Graph,
        partition: &Partition,
        z: VarRef,
    ) -> Result<VarRef, MirrorError> {
        let d = partition.dim();
        if g.shape(z) != [d] {
            return Err(MirrorError::Length {
                expected: d,
                got: g.shape(z).to_vec(),
            });
        }
        match self {
            BoundMap::Identity => Ok(z),
            BoundMap::Diagonal(p) => Ok(g.mul(*p, z)?),
            BoundMap::Spd(m) => {
                let col = g.reshape(z, &[d, 1])?;
                let out = g.matmul(*m, col)?;
                Ok(g.reshape(out, &[d])?)
            }
            BoundMap::BlockIaf(params) => {
                let mut codes = Vec::with_capacity(partition.num_blocks());
                let mut pieces = Vec::with_capacity(partition.num_blocks());
                for (i, block) in partition.blocks().iter().enumerate() {
                    let zi = take_block(g, z, block)?;
                    let (alpha, mu) = params.decode(g, i, &codes)?;
                    let scale = g.logistic(alpha)?;
                    let scaled = g.mul(zi, scale)?;
                    pieces.push(g.add(scaled, mu)?);
                    if i + 1 < partition.num_blocks() {
                        codes.push(params.encode(g, i, zi)?);
                    }
                }
                Ok(assemble(g, partition, &pieces)?)
            }
        }
    }
}

/// `phi = g(z)` as a node of `graph`, binding fresh parameter leaves.
pub fn map_forward(
    kind: &MapKind,
    partition: &Partition,
    z: VarRef,
    graph: &mut Graph,
) -> Result<VarRef, MirrorError> {
    kind.check(partition)?;
    let bound = kind.bind(graph);
    bound.forward(graph, partition, z)
}

fn forward_value(kind: &MapKind, partition: &Partition, z: &Tensor) -> Result<Tensor, MirrorError> {
    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let phi = map_forward(kind, partition, zv, &mut g)?;
    Ok(g.value(phi).clone())
}

/// Exact inverse `z = g^{-1}(phi)`. The block IAF is inverted block by block,
/// each block's coefficients depending only on blocks already recovered.
pub fn map_inverse(
    kind: &MapKind,
    partition: &Partition,
    phi: &Tensor,
) -> Result<Tensor, MirrorError> {
    kind.check(partition)?;
    let d = partition.dim();
    if phi.shape() != [d] {
        return Err(MirrorError::Length {
            expected: d,
            got: phi.shape().to_vec(),
        });
    }
    match kind {
        MapKind::Identity => Ok(phi.clone()),
        MapKind::DiagonalLinear(p) => Ok(Tensor::vector(
            phi.data()
                .iter()
                .zip(p.data())
                .map(|(x, s)| x / s)
                .collect(),
        )),
        MapKind::SpdLinear(m) => Ok(Tensor::vector(m.solve(phi.data()))),
        MapKind::BlockIaf(params) => {
            let mut g = Graph::new();
            let bound = params.map_values(|t| g.leaf(t.clone()));
            let mut codes = Vec::with_capacity(partition.num_blocks());
            let mut recovered = Vec::with_capacity(partition.num_blocks());
            for (i, block) in partition.blocks().iter().enumerate() {
                let (alpha, mu) = bound.decode(&mut g, i, &codes)?;
                let data = block
                    .indices
                    .iter()
                    .zip(g.value(alpha).data().iter().zip(g.value(mu).data()))
                    .map(|(&k, (&a, &m))| {
                        let s = logistic(a);
                        if s == 0.0 {
                            return Err(MirrorError::Singular { index: k, alpha: a });
                        }
                        Ok((phi.data()[k] - m) / s)
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                let zi = Tensor::new(block.shape.clone(), data)?;
                if i + 1 < partition.num_blocks() {
                    let zv = g.leaf(zi.clone());
                    codes.push(bound.encode(&mut g, i, zv)?);
                }
                recovered.push(zi);
            }
            let refs: Vec<&Tensor> = recovered.iter().collect();
            Ok(assemble_values(partition, &refs))
        }
    }
}

fn logistic(x: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::scalar(x));
    let s = g.logistic(v).expect("scalar op");
    g.value(s).item()
}

/// `(z - z')^T (g(z) - g(z'))`.
pub fn monotonicity_witness(
    kind: &MapKind,
    partition: &Partition,
    z: &Tensor,
    z_prime: &Tensor,
) -> Result<f64, MirrorError> {
    if z == z_prime {
        return Err(MirrorError::IdenticalPoints);
    }
    let a = forward_value(kind, partition, z)?;
    let b = forward_value(kind, partition, z_prime)?;
    Ok(z.data()
        .iter()
        .zip(z_prime.data())
        .zip(a.data().iter().zip(b.data()))
        .map(|((x, y), (fx, fy))| (x - y) * (fx - fy))
        .sum())
}

/// The Jacobian diagonal of the block IAF at `z`: `logistic(alpha_i)` per block,
/// in flat index order.
pub fn diag_scale(
    kind: &MapKind,
    partition: &Partition,
    z: &Tensor,
) -> Result<Tensor, MirrorError> {
    let MapKind::BlockIaf(params) = kind else {
        return Err(MirrorError::NotBlockIaf);
    };
    params.check_against(partition)?;
    if z.shape() != [partition.dim()] {
        return Err(MirrorError::Length {
            expected: partition.dim(),
            got: z.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let bound = params.map_values(|t| g.leaf(t.clone()));
    let zv = g.leaf(z.clone());
    let mut codes = Vec::new();
    let mut scales = Vec::new();
    for (i, block) in partition.blocks().iter().enumerate() {
        let (alpha, _) = bound.decode(&mut g, i, &codes)?;
        scales.push(g.logistic(alpha)?);
        if i + 1 < partition.num_blocks() {
            let zi = take_block(&mut g, zv, block)?;
            codes.push(bound.encode(&mut g, i, zi)?);
        }
    }
    let values: Vec<&Tensor> = scales.iter().map(|s| g.value(*s)).collect();
    Ok(assemble_values(partition, &values))
}

/// Partition with the given block shapes over a shuffled index order, used by
/// tests that exercise non-contiguous blocks.
pub fn permuted_partition<R: Rng>(
    shapes: &[Vec<usize>],
    rng: &mut R,
) -> Result<Partition, crate::model::ModelError> {
    let d: usize = shapes.iter().map(|s| numel(s)).sum();
    let mut order: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut offset = 0;
    let blocks = shapes
        .iter()
        .map(|s| {
            let n = numel(s);
            let indices: Arc<[usize]> = Arc::from(&order[offset..offset + n]);
            offset += n;
            Block {
                indices,
                shape: s.clone(),
            }
        })
        .collect();
    Partition::new(blocks)
}
