use std::sync::Arc;

use super::ops::{evaluate, one_hot, OpKind};
use super::{AutodiffError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarRef(usize);

impl VarRef {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Option<OpKind>,
    inputs: Vec<VarRef>,
    value: Tensor,
}

/// Append-only computation graph with eagerly cached values.
///
/// Gradients are themselves emitted as nodes of the same graph, so a gradient
/// obtained with `create_graph = true` can be differentiated again.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Leaves are the only nodes without recorded inputs.
    pub fn leaf(&mut self, value: Tensor) -> VarRef {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
        });
        VarRef(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> VarRef {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: VarRef) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Values of every node in creation order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn shape(&self, v: VarRef) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn apply(&mut self, op: OpKind, inputs: &[VarRef]) -> Result<VarRef, AutodiffError> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad.0));
        }
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            evaluate(&op, &values)?
        };
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
        });
        Ok(VarRef(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: VarRef, b: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: VarRef, b: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: VarRef, b: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: VarRef, b: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn neg(&mut self, a: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Neg, &[a])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: VarRef, factor: f64) -> Result<VarRef, AutodiffError> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: VarRef, b: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn mode_product(
        &mut self,
        x: VarRef,
        u: VarRef,
        mode: usize,
    ) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::ModeProduct { mode }, &[x, u])
    }

    /// Applies one matrix per listed mode, in order.
    pub fn mode_products(
        &mut self,
        x: VarRef,
        factors: &[(usize, VarRef)],
    ) -> Result<VarRef, AutodiffError> {
        factors
            .iter()
            .try_fold(x, |acc, &(mode, u)| self.mode_product(acc, u, mode))
    }

    pub fn concat(&mut self, parts: &[VarRef], axis: usize) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn slice_axis(
        &mut self,
        x: VarRef,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::SliceAxis { axis, start, len }, &[x])
    }

    pub fn gather(&mut self, x: VarRef, indices: Arc<[usize]>) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Gather { indices }, &[x])
    }

    pub fn scatter(
        &mut self,
        x: VarRef,
        indices: Arc<[usize]>,
        shape: Vec<usize>,
    ) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Scatter { indices, shape }, &[x])
    }

    pub fn reshape(&mut self, x: VarRef, shape: &[usize]) -> Result<VarRef, AutodiffError> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(
            OpKind::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn relu(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn logistic(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Logistic, &[x])
    }

    pub fn tanh(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn sin(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Sin, &[x])
    }

    pub fn square(&mut self, x: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarRef,
        labels: Arc<[usize]>,
    ) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::SoftmaxCrossEntropy { labels }, &[logits])
    }

    pub fn squared_error(&mut self, pred: VarRef, target: VarRef) -> Result<VarRef, AutodiffError> {
        self.apply(OpKind::SquaredError, &[pred, target])
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned nodes are built from differentiable ops
    /// and stay connected to the graph. Without it the adjoint nodes are
    /// discarded and the gradients come back as fresh leaves.
    /// Nodes that `output` does not depend on receive a zero gradient.
    pub fn grad(
        &mut self,
        output: VarRef,
        wrt: &[VarRef],
        create_graph: bool,
    ) -> Result<Vec<VarRef>, AutodiffError> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(output.0));
        }
        if self.nodes[output.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarOutput {
                shape: self.shape(output).to_vec(),
            });
        }
        if let Some(bad) = wrt.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad.0));
        }
        let mark = self.nodes.len();
        let start = wrt
            .iter()
            .map(|v| v.0)
            .min()
            .unwrap_or(output.0)
            .min(output.0);
        let span = output.0 + 1 - start;

        // Nodes in [start, output] that are reachable from some wrt node.
        let mut depends = vec![false; span];
        for v in wrt {
            if v.0 <= output.0 {
                depends[v.0 - start] = true;
            }
        }
        for i in start..=output.0 {
            if depends[i - start] {
                continue;
            }
            let node = &self.nodes[i];
            depends[i - start] = node.op.is_some()
                && node
                    .inputs
                    .iter()
                    .any(|inp| inp.0 >= start && depends[inp.0 - start]);
        }

        let mut adjoint: Vec<Option<VarRef>> = vec![None; span];
        if depends[span - 1] {
            let seed = Tensor::ones(self.shape(output));
            adjoint[span - 1] = Some(self.leaf(seed));
        }
        for i in (start..=output.0).rev() {
            let Some(upstream) = adjoint[i - start] else {
                continue;
            };
            let Some(op) = self.nodes[i].op.clone() else {
                continue;
            };
            let inputs = self.nodes[i].inputs.clone();
            let needs: Vec<bool> = inputs
                .iter()
                .map(|inp| inp.0 >= start && depends[inp.0 - start])
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let contributions = self.vjp(&op, &inputs, VarRef(i), upstream, &needs)?;
            for ((inp, contribution), need) in inputs.iter().zip(contributions).zip(needs) {
                let Some(c) = contribution else { continue };
                if !need {
                    continue;
                }
                let slot = &mut adjoint[inp.0 - start];
                *slot = Some(match *slot {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        let grads: Vec<Option<VarRef>> = wrt
            .iter()
            .map(|v| {
                if v.0 <= output.0 {
                    adjoint[v.0 - start]
                } else {
                    None
                }
            })
            .collect();

        if create_graph {
            Ok(grads
                .into_iter()
                .zip(wrt)
                .map(|(g, v)| match g {
                    Some(g) => g,
                    None => {
                        let zeros = Tensor::zeros(self.shape(*v));
                        self.leaf(zeros)
                    }
                })
                .collect())
        } else {
            let values: Vec<Tensor> = grads
                .iter()
                .zip(wrt)
                .map(|(g, v)| match g {
                    Some(g) => self.nodes[g.0].value.clone(),
                    None => Tensor::zeros(self.shape(*v)),
                })
                .collect();
            self.nodes.truncate(mark);
            Ok(values.into_iter().map(|t| self.leaf(t)).collect())
        }
    }

    /// Sums `grad` down to a scalar when the operand `target` was broadcast.
    fn reduce_to(&mut self, grad: VarRef, target: VarRef) -> Result<VarRef, AutodiffError> {
        if self.value(target).is_scalar() && !self.value(grad).is_scalar() {
            self.sum(grad)
        } else {
            Ok(grad)
        }
    }

    fn vjp(
        &mut self,
        op: &OpKind,
        inputs: &[VarRef],
        out: VarRef,
        g: VarRef,
        needs: &[bool],
    ) -> Result<Vec<Option<VarRef>>, AutodiffError> {
        let need = |i: usize| needs[i];
        let mut res = vec![None; inputs.len()];
        match op {
            OpKind::Add => {
                for (i, &inp) in inputs.iter().enumerate() {
                    if need(i) {
                        res[i] = Some(self.reduce_to(g, inp)?);
                    }
                }
            }
            OpKind::Sub => {
                if need(0) {
                    res[0] = Some(self.reduce_to(g, inputs[0])?);
                }
                if need(1) {
                    let n = self.neg(g)?;
                    res[1] = Some(self.reduce_to(n, inputs[1])?);
                }
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if need(0) {
                    let t = self.mul(g, b)?;
                    res[0] = Some(self.reduce_to(t, a)?);
                }
                if need(1) {
                    let t = self.mul(g, a)?;
                    res[1] = Some(self.reduce_to(t, b)?);
                }
            }
            OpKind::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                if need(0) {
                    let t = self.div(g, b)?;
                    res[0] = Some(self.reduce_to(t, a)?);
                }
                if need(1) {
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    let t = self.neg(t)?;
                    res[1] = Some(self.reduce_to(t, b)?);
                }
            }
            OpKind::Neg => res[0] = Some(self.neg(g)?),
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if need(0) {
                    let bt = self.transpose(b)?;
                    res[0] = Some(self.matmul(g, bt)?);
                }
                if need(1) {
                    let at = self.transpose(a)?;
                    res[1] = Some(self.matmul(at, g)?);
                }
            }
            OpKind::Transpose => res[0] = Some(self.transpose(g)?),
            OpKind::ModeProduct { mode } => {
                let (x, u) = (inputs[0], inputs[1]);
                if need(0) {
                    let ut = self.transpose(u)?;
                    res[0] = Some(self.mode_product(g, ut, *mode)?);
                }
                if need(1) {
                    res[1] = Some(self.apply(OpKind::ModeGram { mode: *mode }, &[g, x])?);
                }
            }
            OpKind::ModeGram { mode } => {
                let (a, b) = (inputs[0], inputs[1]);
                if need(0) {
                    res[0] = Some(self.mode_product(b, g, *mode)?);
                }
                if need(1) {
                    let gt = self.transpose(g)?;
                    res[1] = Some(self.mode_product(a, gt, *mode)?);
                }
            }
            OpKind::Concat { axis } => {
                let mut offset = 0;
                for (i, &inp) in inputs.iter().enumerate() {
                    let len = self.shape(inp)[*axis];
                    if need(i) {
                        res[i] = Some(self.slice_axis(g, *axis, offset, len)?);
                    }
                    offset += len;
                }
            }
            OpKind::SliceAxis { axis, start, .. } => {
                let total = self.shape(inputs[0])[*axis];
                res[0] = Some(self.apply(
                    OpKind::PadAxis {
                        axis: *axis,
                        start: *start,
                        total,
                    },
                    &[g],
                )?);
            }
            OpKind::PadAxis { axis, start, .. } => {
                let len = self.shape(inputs[0])[*axis];
                res[0] = Some(self.slice_axis(g, *axis, *start, len)?);
            }
            OpKind::Gather { indices } => {
                let shape = self.shape(inputs[0]).to_vec();
                res[0] = Some(self.scatter(g, indices.clone(), shape)?);
            }
            OpKind::Scatter { indices, .. } => res[0] = Some(self.gather(g, indices.clone())?),
            OpKind::Reshape { .. } => {
                let shape = self.shape(inputs[0]).to_vec();
                res[0] = Some(self.reshape(g, &shape)?);
            }
            OpKind::Sum | OpKind::Mean => {
                let shape = self.shape(inputs[0]).to_vec();
                let mut t = if shape.is_empty() {
                    g
                } else {
                    self.apply(
                        OpKind::BroadcastTo {
                            shape: shape.clone(),
                        },
                        &[g],
                    )?
                };
                if matches!(op, OpKind::Mean) {
                    let n = shape.iter().product::<usize>() as f64;
                    t = self.scale(t, 1.0 / n)?;
                }
                res[0] = Some(t);
            }
            OpKind::BroadcastTo { .. } => res[0] = Some(self.sum(g)?),
            OpKind::Relu => {
                let mask = self.apply(OpKind::Step, &[inputs[0]])?;
                res[0] = Some(self.mul(g, mask)?);
            }
            OpKind::Step => {}
            OpKind::Logistic => {
                let one = self.scalar(1.0);
                let comp = self.sub(one, out)?;
                let slope = self.mul(out, comp)?;
                res[0] = Some(self.mul(g, slope)?);
            }
            OpKind::Tanh => {
                let one = self.scalar(1.0);
                let sq = self.square(out)?;
                let slope = self.sub(one, sq)?;
                res[0] = Some(self.mul(g, slope)?);
            }
            OpKind::Sin => {
                let c = self.apply(OpKind::Cos, &[inputs[0]])?;
                res[0] = Some(self.mul(g, c)?);
            }
            OpKind::Cos => {
                let s = self.sin(inputs[0])?;
                let t = self.mul(g, s)?;
                res[0] = Some(self.neg(t)?);
            }
            OpKind::Square => {
                let t = self.mul(g, inputs[0])?;
                res[0] = Some(self.scale(t, 2.0)?);
            }
            OpKind::Softmax => {
                let shape = self.shape(inputs[0]).to_vec();
                let cols = *shape.last().expect("softmax input has rank >= 1");
                let rows = self.value(inputs[0]).numel() / cols;
                let s = self.reshape(out, &[rows, cols])?;
                let gm = self.reshape(g, &[rows, cols])?;
                let weighted = self.mul(gm, s)?;
                let col_ones = self.leaf(Tensor::ones(&[cols, 1]));
                let row_ones = self.leaf(Tensor::ones(&[1, cols]));
                let dots = self.matmul(weighted, col_ones)?;
                let spread = self.matmul(dots, row_ones)?;
                let centered = self.sub(gm, spread)?;
                let dx = self.mul(s, centered)?;
                res[0] = Some(self.reshape(dx, &shape)?);
            }
            OpKind::SoftmaxCrossEntropy { labels } => {
                let shape = self.shape(inputs[0]).to_vec();
                let cols = *shape.last().expect("logits have rank >= 1");
                let s = self.apply(OpKind::Softmax, &[inputs[0]])?;
                let target = one_hot(labels, cols).reshaped(&shape)?;
                let target = self.leaf(target);
                let diff = self.sub(s, target)?;
                let coef = self.scale(g, 1.0 / labels.len() as f64)?;
                res[0] = Some(self.mul(diff, coef)?);
            }
            OpKind::SquaredError => {
                let n = self.value(inputs[0]).numel() as f64;
                let diff = self.sub(inputs[0], inputs[1])?;
                let coef = self.scale(g, 2.0 / n)?;
                let da = self.mul(diff, coef)?;
                if need(1) {
                    res[1] = Some(self.neg(da)?);
                }
                if need(0) {
                    res[0] = Some(da);
                }
            }
        }
        Ok(res)
    }
}
