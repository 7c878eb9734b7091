//! K-step inner solvers: gradient descent, diagonally preconditioned gradient
//! descent and dual-space mirror descent.
//!
//! All three build their updates in the caller's graph. With
//! [`InnerConfig::differentiable`] the gradients are themselves graph nodes, so
//! the adapted parameters can be differentiated with respect to the
//! initialization, the preconditioner or the map parameters.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, VarRef};
use crate::mirror::{BoundMap, MirrorError};
use crate::model::{self, MlpSpec, ModelError, Partition};
use crate::tasks::Split;

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("invalid inner config: {0}")]
    InvalidConfig(String),
    #[error("adaptation diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: &'static str },
    #[error("preconditioner entry {index} is {value}, must be positive")]
    NonPositivePrecond { index: usize, value: f64 },
    #[error("parameter vector has shape {got:?}, expected length {expected}")]
    Length { expected: usize, got: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mirror(#[from] MirrorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    pub steps: usize,
    pub alpha: f64,
    pub record_trace: bool,
    /// Keep gradients as graph nodes so the result supports a second `grad`.
    pub differentiable: bool,
}

impl InnerConfig {
    pub fn new(steps: usize, alpha: f64) -> Result<Self, InnerError> {
        let cfg = Self {
            steps,
            alpha,
            record_trace: false,
            differentiable: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), InnerError> {
        if self.steps == 0 {
            return Err(InnerError::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(InnerError::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn with_trace(mut self, record: bool) -> Self {
        self.record_trace = record;
        self
    }

    pub fn detached(mut self) -> Self {
        self.differentiable = false;
        self
    }
}

/// Training loss of a candidate parameter vector.
pub trait Objective: Sync {
    fn loss(&self, graph: &mut Graph, params: VarRef) -> Result<VarRef, InnerError>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph, VarRef) -> Result<VarRef, AutodiffError> + Sync,
{
    fn loss(&self, graph: &mut Graph, params: VarRef) -> Result<VarRef, InnerError> {
        Ok(self(graph, params)?)
    }
}

/// Mean loss of an MLP on one split.
#[derive(Clone, Copy, Debug)]
pub struct SplitLoss<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Split,
}

impl Objective for SplitLoss<'_> {
    fn loss(&self, graph: &mut Graph, params: VarRef) -> Result<VarRef, InnerError> {
        Ok(model::loss(self.spec, params, self.data, graph)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    /// Final primal parameters.
    pub adapted: VarRef,
    /// Primal iterates for k = 0..=K; the last one is `adapted`.
    pub iterates: Vec<VarRef>,
    /// Loss and gradient norm at every primal iterate, when recorded.
    pub trace: Vec<TracePoint>,
}

struct Step {
    loss: f64,
    grad: VarRef,
}

fn loss_and_grad(
    graph: &mut Graph,
    objective: &dyn Objective,
    params: VarRef,
    step: usize,
    create_graph: bool,
) -> Result<Step, InnerError> {
    let loss = objective.loss(graph, params)?;
    let value = graph.value(loss).item();
    if !value.is_finite() {
        return Err(InnerError::Diverged { step, what: "loss" });
    }
    let grad = graph.grad(loss, &[params], create_graph)?[0];
    if !graph.value(grad).all_finite() {
        return Err(InnerError::Diverged {
            step,
            what: "gradient",
        });
    }
    Ok(Step { loss: value, grad })
}

fn point(graph: &Graph, step: &Step) -> TracePoint {
    TracePoint {
        loss: step.loss,
        grad_norm: graph.value(step.grad).norm(),
    }
}

fn check_vector(graph: &Graph, v: VarRef, expected: Option<usize>) -> Result<usize, InnerError> {
    match (graph.shape(v), expected) {
        ([d], None) => Ok(*d),
        ([d], Some(e)) if *d == e => Ok(e),
        (shape, e) => Err(InnerError::Length {
            expected: e.unwrap_or(0),
            got: shape.to_vec(),
        }),
    }
}

/// Trace entry for the final iterate, which no update step evaluates.
fn finish(
    graph: &mut Graph,
    objective: &dyn Objective,
    cfg: &InnerConfig,
    adapted: VarRef,
    iterates: Vec<VarRef>,
    mut trace: Vec<TracePoint>,
) -> Result<AdaptResult, InnerError> {
    if !graph.value(adapted).all_finite() {
        return Err(InnerError::Diverged {
            step: cfg.steps,
            what: "parameters",
        });
    }
    if cfg.record_trace {
        let last = loss_and_grad(graph, objective, adapted, cfg.steps, false)?;
        trace.push(point(graph, &last));
    }
    Ok(AdaptResult {
        adapted,
        iterates,
        trace,
    })
}

/// `phi <- phi - alpha * grad L(phi)`, K times.
pub fn gd_adapt(
    init: VarRef,
    objective: &dyn Objective,
    cfg: &InnerConfig,
    graph: &mut Graph,
) -> Result<AdaptResult, InnerError> {
    descend(init, None, objective, cfg, graph)
}

/// `phi <- phi - alpha * p * grad L(phi)`, K times, with `p > 0` elementwise.
pub fn pgd_adapt(
    init: VarRef,
    precond: VarRef,
    objective: &dyn Objective,
    cfg: &InnerConfig,
    graph: &mut Graph,
) -> Result<AdaptResult, InnerError> {
    let d = check_vector(graph, init, None)?;
    check_vector(graph, precond, Some(d))?;
    if let Some((index, &value)) = graph
        .value(precond)
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0))
    {
        return Err(InnerError::NonPositivePrecond { index, value });
    }
    descend(init, Some(precond), objective, cfg, graph)
}

fn descend(
    init: VarRef,
    precond: Option<VarRef>,
    objective: &dyn Objective,
    cfg: &InnerConfig,
    graph: &mut Graph,
) -> Result<AdaptResult, InnerError> {
    cfg.validate()?;
    check_vector(graph, init, None)?;
    let mut phi = init;
    let mut iterates = vec![phi];
    let mut trace = Vec::new();
    for k in 0..cfg.steps {
        let step = loss_and_grad(graph, objective, phi, k, cfg.differentiable)?;
        if cfg.record_trace {
            trace.push(point(graph, &step));
        }
        let direction = match precond {
            Some(p) => graph.mul(p, step.grad)?,
            None => step.grad,
        };
        let delta = graph.scale(direction, cfg.alpha)?;
        phi = graph.sub(phi, delta)?;
        iterates.push(phi);
    }
    finish(graph, objective, cfg, phi, iterates, trace)
}

/// Mirror descent in the dual: `phi = g(z)`, `z <- z - alpha * grad L(phi)`,
/// K times, returning `g(z_K)`.
pub fn md_adapt(
    dual_init: VarRef,
    map: &BoundMap,
    partition: &Partition,
    objective: &dyn Objective,
    cfg: &InnerConfig,
    graph: &mut Graph,
) -> Result<AdaptResult, InnerError> {
    cfg.validate()?;
    check_vector(graph, dual_init, Some(partition.dim()))?;
    let mut z = dual_init;
    let mut iterates = Vec::with_capacity(cfg.steps + 1);
    let mut trace = Vec::new();
    for k in 0..cfg.steps {
        let phi = map.forward(graph, partition, z)?;
        iterates.push(phi);
        let step = loss_and_grad(graph, objective, phi, k, cfg.differentiable)?;
        if cfg.record_trace {
            trace.push(point(graph, &step));
        }
        let delta = graph.scale(step.grad, cfg.alpha)?;
        z = graph.sub(z, delta)?;
    }
    let adapted = map.forward(graph, partition, z)?;
    iterates.push(adapted);
    finish(graph, objective, cfg, adapted, iterates, trace)
}

/// Values of all iterates, for trajectory comparisons.
pub fn iterate_values(graph: &Graph, result: &AdaptResult) -> Vec<Tensor> {
    result
        .iterates
        .iter()
        .map(|&v| graph.value(v).clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mirror::{BlockIaf, MapKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(g: &mut Graph, p: VarRef) -> Result<VarRef, AutodiffError> {
        let s = g.square(p)?;
        g.sum(s)
    }

    fn half_square(g: &mut Graph, p: VarRef) -> Result<VarRef, AutodiffError> {
        let s = square(g, p)?;
        g.scale(s, 0.5)
    }

    fn run_gd(init: f64, alpha: f64, steps: usize) -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![init]));
        let r = gd_adapt(x, &square, &InnerConfig::new(steps, alpha).unwrap(), &mut g).unwrap();
        g.value(r.adapted).data()[0]
    }

    #[test]
    fn gd_quadratic_closed_forms() {
        assert_eq!(run_gd(1.0, 0.5, 1), 0.0);
        assert_eq!(run_gd(1.0, 0.25, 2), 0.25);
    }

    #[test]
    fn pgd_quadratic_closed_form() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let p = g.leaf(Tensor::vector(vec![0.5]));
        let r = pgd_adapt(x, p, &square, &InnerConfig::new(1, 0.5).unwrap(), &mut g).unwrap();
        assert_eq!(g.value(r.adapted).data(), &[0.5]);
    }

    #[test]
    fn zero_decoder_mirror_descent_unrolls_by_hand() {
        let part = Partition::contiguous(&[vec![1]]).unwrap();
        let kind = MapKind::BlockIaf(BlockIaf::zero_decoders(
            &part,
            &mut ChaCha8Rng::seed_from_u64(0),
        ));
        let (z0, alpha) = (3.0, 0.1);
        let mut g = Graph::new();
        let map = kind.bind(&mut g);
        let z = g.leaf(Tensor::vector(vec![z0]));
        let cfg = InnerConfig::new(1, alpha).unwrap().with_trace(true);
        let r = md_adapt(z, &map, &part, &square, &cfg, &mut g).unwrap();
        assert_eq!(g.value(r.iterates[0]).data(), &[0.5 * z0]);
        let expected = 0.5 * (1.0 - alpha) * z0;
        assert!((g.value(r.adapted).data()[0] - expected).abs() < 1e-15);
        assert_eq!(r.trace[0].loss, (0.5 * z0) * (0.5 * z0));
        assert_eq!(r.trace.len(), 2);
    }

    #[test]
    fn trace_has_k_plus_one_points_and_descends_on_quadratics() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let cfg = InnerConfig::new(6, 0.7).unwrap().with_trace(true);
        let r = gd_adapt(x, &half_square, &cfg, &mut g).unwrap();
        assert_eq!(r.trace.len(), 7);
        assert_eq!(r.iterates.len(), 7);
        for w in r.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        assert!((r.trace[0].grad_norm - 5.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let exploding = |g: &mut Graph, p: VarRef| -> Result<VarRef, AutodiffError> {
            let s = g.square(p)?;
            let s = g.square(s)?;
            g.sum(s)
        };
        let err = gd_adapt(x, &exploding, &InnerConfig::new(10, 1e3).unwrap(), &mut g).unwrap_err();
        assert!(matches!(err, InnerError::Diverged { .. }), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("step"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(InnerConfig::new(0, 0.1).is_err());
        assert!(InnerConfig::new(1, 0.0).is_err());
        assert!(InnerConfig::new(1, f64::NAN).is_err());
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        let p = g.leaf(Tensor::vector(vec![1.0, 0.0]));
        let cfg = InnerConfig::new(1, 0.1).unwrap();
        assert!(matches!(
            pgd_adapt(x, p, &square, &cfg, &mut g),
            Err(InnerError::NonPositivePrecond { index: 1, .. })
        ));
    }

    #[test]
    fn detached_run_matches_differentiable_values() {
        let run = |cfg: InnerConfig| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![0.3, -1.1]));
            let sine = |g: &mut Graph, p: VarRef| -> Result<VarRef, AutodiffError> {
                let s = g.sin(p)?;
                let s = g.square(s)?;
                g.sum(s)
            };
            let r = gd_adapt(x, &sine, &cfg, &mut g).unwrap();
            (g.value(r.adapted).clone(), g.len())
        };
        let cfg = InnerConfig::new(3, 0.2).unwrap();
        let (a, long) = run(cfg);
        let (b, short) = run(cfg.detached());
        assert_eq!(a, b);
        assert!(short < long);
    }
}
