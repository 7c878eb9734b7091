//! Outer loop: hypergradients through the inner solver, the stochastic
//! update of the prior, and meta-test evaluation.
//!
//! The prior is `init` plus the map parameters. `init` is the dual starting
//! point `z_0` for the mirror method and the primal starting point `phi_0` for
//! MAML and Meta-SGD.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, VarRef};
use crate::inner::{
    gd_adapt, md_adapt, pgd_adapt, AdaptResult, InnerConfig, InnerError, SplitLoss,
};
use crate::mirror::{map_inverse, BlockIaf, BoundMap, MapKind, MirrorError};
use crate::model::{self, init_params, partition_by_layer, Head, MlpSpec, ModelError, Partition};
use crate::tasks::FewShotTask;

/// Lower bound kept on learned preconditioner entries after each update.
pub const PRECOND_FLOOR: f64 = 1e-6;

/// Half-width multiplier of a 95% normal-approximation interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid meta config: {0}")]
    InvalidConfig(String),
    #[error("map {map} does not fit method {method}")]
    MethodMismatch {
        method: MethodTag,
        map: &'static str,
    },
    #[error("prior has {got} entries, model has {expected} parameters")]
    InitLength { expected: usize, got: usize },
    #[error("empty task batch")]
    EmptyBatch,
    #[error("every task in the batch diverged{}", iteration.map(|r| format!(" at outer iteration {r}")).unwrap_or_default())]
    AllDiverged { iteration: Option<usize> },
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Mirror(#[from] MirrorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl MetaError {
    /// Numerical failures as opposed to configuration mistakes.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            MetaError::AllDiverged { .. } | MetaError::Inner(InnerError::Diverged { .. })
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    /// Gradient descent from a learned initialization.
    Maml,
    /// Preconditioned gradient descent with a learned diagonal.
    Metasgd,
    /// Mirror descent through a learned block IAF map.
    Mirror,
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MethodTag::Maml => "maml",
            MethodTag::Metasgd => "metasgd",
            MethodTag::Mirror => "mirror",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub method: MethodTag,
    pub init: Tensor,
    pub map: MapKind,
}

fn map_name(map: &MapKind) -> &'static str {
    match map {
        MapKind::Identity => "identity",
        MapKind::DiagonalLinear(_) => "diagonal",
        MapKind::SpdLinear(_) => "spd",
        MapKind::BlockIaf(_) => "block-iaf",
    }
}

impl MetaParams {
    /// Fresh prior. All methods start from the same primal point for a given
    /// `rng` state: the mirror method's dual start is the inverse image of it.
    pub fn initial<R: Rng>(
        method: MethodTag,
        spec: &MlpSpec,
        rng: &mut R,
    ) -> Result<Self, MetaError> {
        let phi0 = init_params(spec, rng).into_tensor();
        let partition = partition_by_layer(spec);
        let (init, map) = match method {
            MethodTag::Maml => (phi0, MapKind::Identity),
            MethodTag::Metasgd => (phi0, MapKind::diagonal(Tensor::ones(&[partition.dim()]))?),
            MethodTag::Mirror => {
                let map = MapKind::BlockIaf(BlockIaf::init(&partition, rng));
                (map_inverse(&map, &partition, &phi0)?, map)
            }
        };
        Ok(Self { method, init, map })
    }

    pub fn validate(&self, spec: &MlpSpec) -> Result<(), MetaError> {
        let expected = spec.param_count();
        if self.init.shape() != [expected] {
            return Err(MetaError::InitLength {
                expected,
                got: self.init.numel(),
            });
        }
        let fits = matches!(
            (self.method, &self.map),
            (MethodTag::Maml, MapKind::Identity)
                | (MethodTag::Metasgd, MapKind::DiagonalLinear(_))
                | (MethodTag::Mirror, MapKind::BlockIaf(_))
        );
        if !fits {
            return Err(MetaError::MethodMismatch {
                method: self.method,
                map: map_name(&self.map),
            });
        }
        if let MapKind::BlockIaf(p) = &self.map {
            p.check_against(&partition_by_layer(spec))?;
        }
        if let MapKind::DiagonalLinear(p) = &self.map {
            if p.shape() != [expected] {
                return Err(MetaError::InitLength {
                    expected,
                    got: p.numel(),
                });
            }
        }
        Ok(())
    }

    /// Every learnable tensor with a stable name; `init` first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("init".to_string(), &self.init)];
        out.extend(
            self.map
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("map.{n}"), t)),
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.init];
        out.extend(self.map.tensors_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All learnable values concatenated in [`MetaParams::named_tensors`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat vector length");
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Outer iterations R.
    pub iterations: usize,
    pub beta: f64,
    pub batch_size: usize,
    /// Nominal task-pool size T in the `T / |batch|` update scaling.
    pub pool_size: usize,
    pub steps: usize,
    pub alpha: f64,
    pub eval_tasks: usize,
    pub seed: u64,
    /// Cap on each task's hypergradient norm (over all prior tensors) before
    /// summing; `None` sums the raw gradients.
    pub clip_norm: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            beta: 1e-3,
            batch_size: 4,
            pool_size: DEFAULT_POOL_SIZE,
            steps: 5,
            alpha: 1e-2,
            eval_tasks: 1000,
            seed: 0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }
}

/// Default nominal pool size T: the default batch size, so `T / |batch| = 1`
/// and `beta` is the step applied to the summed batch gradient.
pub const DEFAULT_POOL_SIZE: usize = 4;

/// Default per-task hypergradient norm cap. Sits above every per-task norm of
/// healthy sinusoid runs at the default settings, so it only acts once an
/// unrolled adaptation starts to blow up.
pub const DEFAULT_CLIP_NORM: f64 = 100.0;

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |msg: String| Err(MetaError::InvalidConfig(msg));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.batch_size == 0 || self.pool_size == 0 || self.eval_tasks == 0 {
            return bad("batch_size, pool_size and eval_tasks must be positive".into());
        }
        if self.batch_size > self.pool_size {
            return bad(format!(
                "batch_size {} exceeds pool_size {}",
                self.batch_size, self.pool_size
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.inner()?;
        Ok(())
    }

    /// Differentiable inner configuration used during meta-training.
    pub fn inner(&self) -> Result<InnerConfig, MetaError> {
        Ok(InnerConfig::new(self.steps, self.alpha)?)
    }
}

/// Per-task outcome of one hypergradient evaluation.
#[derive(Clone, Debug)]
pub struct TaskGradient {
    pub val_loss: f64,
    /// Gradients in [`MetaParams::named_tensors`] order.
    pub grads: Vec<Tensor>,
}

struct Bound {
    init: VarRef,
    map: BoundMap,
}

fn bind(params: &MetaParams, g: &mut Graph) -> Bound {
    let init = g.leaf(params.init.clone());
    let map = params.map.bind(g);
    Bound { init, map }
}

fn adapt(
    params: &MetaParams,
    bound: &Bound,
    spec: &MlpSpec,
    partition: &Partition,
    task: &FewShotTask,
    inner: &InnerConfig,
    g: &mut Graph,
) -> Result<AdaptResult, MetaError> {
    let objective = SplitLoss {
        spec,
        data: &task.train,
    };
    let result = match (params.method, &bound.map) {
        (MethodTag::Maml, _) => gd_adapt(bound.init, &objective, inner, g)?,
        (MethodTag::Metasgd, BoundMap::Diagonal(p)) => {
            pgd_adapt(bound.init, *p, &objective, inner, g)?
        }
        (MethodTag::Mirror, map) => md_adapt(bound.init, map, partition, &objective, inner, g)?,
        (method, _) => {
            return Err(MetaError::MethodMismatch {
                method,
                map: map_name(&params.map),
            })
        }
    };
    Ok(result)
}

/// Validation loss after adaptation and its gradient with respect to every
/// prior tensor.
pub fn task_hypergradient(
    params: &MetaParams,
    spec: &MlpSpec,
    task: &FewShotTask,
    inner: &InnerConfig,
) -> Result<TaskGradient, MetaError> {
    let partition = partition_by_layer(spec);
    let mut g = Graph::new();
    let bound = bind(params, &mut g);
    let inner = InnerConfig {
        differentiable: true,
        ..*inner
    };
    let result = adapt(params, &bound, spec, &partition, task, &inner, &mut g)?;
    let loss = model::loss(spec, result.adapted, &task.val, &mut g)?;
    let val_loss = g.value(loss).item();
    if !val_loss.is_finite() {
        return Err(InnerError::Diverged {
            step: inner.steps,
            what: "validation loss",
        }
        .into());
    }
    let mut wrt = vec![bound.init];
    wrt.extend(bound.map.params());
    let grads = g.grad(loss, &wrt, false)?;
    let grads: Vec<Tensor> = grads.iter().map(|&v| g.value(v).clone()).collect();
    if let Some(bad) = grads.iter().find(|t| !t.all_finite()) {
        log::debug!("non-finite hypergradient of shape {:?}", bad.shape());
        return Err(InnerError::Diverged {
            step: inner.steps,
            what: "hypergradient",
        }
        .into());
    }
    Ok(TaskGradient { val_loss, grads })
}

/// Validation loss after adaptation, without building second-order nodes.
pub fn validation_loss(
    params: &MetaParams,
    spec: &MlpSpec,
    task: &FewShotTask,
    inner: &InnerConfig,
) -> Result<f64, MetaError> {
    let partition = partition_by_layer(spec);
    let mut g = Graph::new();
    let bound = bind(params, &mut g);
    let result = adapt(
        params,
        &bound,
        spec,
        &partition,
        task,
        &inner.detached(),
        &mut g,
    )?;
    let loss = model::loss(spec, result.adapted, &task.val, &mut g)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub mean_val_loss: f64,
    pub diverged: usize,
}

/// One outer update `theta -= beta * T / |valid| * sum of task hypergradients`.
///
/// Tasks whose adaptation diverges are left out of both the sum and `|valid|`.
/// With `clip_norm` set, each task gradient is rescaled to at most that norm
/// before summing. Per-task work runs in parallel; the sum is taken in batch
/// order.
pub fn meta_step(
    params: &MetaParams,
    batch: &[FewShotTask],
    spec: &MlpSpec,
    cfg: &MetaConfig,
) -> Result<(MetaParams, StepReport), MetaError> {
    if batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    params.validate(spec)?;
    let inner = cfg.inner()?;
    let outcomes: Vec<Result<TaskGradient, MetaError>> = batch
        .par_iter()
        .map(|task| task_hypergradient(params, spec, task, &inner))
        .collect();
    let mut sum: Option<Vec<Tensor>> = None;
    let mut loss_sum = 0.0;
    let mut valid = 0usize;
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(mut tg) => {
                valid += 1;
                loss_sum += tg.val_loss;
                if let Some(cap) = cfg.clip_norm {
                    clip(&mut tg.grads, cap);
                }
                match &mut sum {
                    None => sum = Some(tg.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&tg.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Err(e) if e.is_divergence() => log::warn!("skipping task {t} of the batch: {e}"),
            Err(e) => return Err(e),
        }
    }
    let Some(sum) = sum else {
        return Err(MetaError::AllDiverged { iteration: None });
    };
    let factor = cfg.beta * cfg.pool_size as f64 / valid as f64;
    let mut next = params.clone();
    for (t, g) in next.tensors_mut().into_iter().zip(&sum) {
        for (x, d) in t.data_mut().iter_mut().zip(g.data()) {
            *x -= factor * d;
        }
    }
    if let MapKind::DiagonalLinear(p) = &mut next.map {
        for v in p.data_mut() {
            *v = v.max(PRECOND_FLOOR);
        }
    }
    let report = StepReport {
        mean_val_loss: loss_sum / valid as f64,
        diverged: batch.len() - valid,
    };
    Ok((next, report))
}

fn clip(grads: &mut [Tensor], cap: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > cap {
        log::debug!("clipping task hypergradient norm {norm:.3e} to {cap}");
        let s = cap / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Source of meta-training tasks by index.
pub trait TaskSampler: Sync {
    fn task(&self, index: u64) -> Result<FewShotTask, MetaError>;
}

impl<F> TaskSampler for F
where
    F: Fn(u64) -> Result<FewShotTask, MetaError> + Sync,
{
    fn task(&self, index: u64) -> Result<FewShotTask, MetaError> {
        self(index)
    }
}

/// Runs `cfg.iterations` outer steps. Batch `r` holds tasks
/// `r * batch_size .. (r + 1) * batch_size` of the sampler. `sink` receives
/// `(r, mean validation loss)` after every step.
pub fn meta_train(
    init: MetaParams,
    sampler: &dyn TaskSampler,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    mut sink: impl FnMut(usize, &StepReport),
) -> Result<MetaParams, MetaError> {
    cfg.validate()?;
    init.validate(spec)?;
    let mut params = init;
    let b = cfg.batch_size as u64;
    for r in 0..cfg.iterations {
        let batch = (0..b)
            .into_par_iter()
            .map(|j| sampler.task(r as u64 * b + j))
            .collect::<Result<Vec<_>, _>>()?;
        let (next, report) = meta_step(&params, &batch, spec, cfg).map_err(|e| match e {
            MetaError::AllDiverged { .. } => MetaError::AllDiverged { iteration: Some(r) },
            other => other,
        })?;
        sink(r, &report);
        params = next;
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Mse,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    /// Mean of the metric on validation splits after adaptation.
    pub mean: f64,
    /// 95% half-width `1.96 * stderr`.
    pub half_width: f64,
    /// Mean training loss at iterates k = 0..=K.
    pub trace_loss: Vec<f64>,
    /// Mean training-gradient norm at iterates k = 0..=K.
    pub trace_grad_norm: Vec<f64>,
    pub evaluated: usize,
    pub diverged: usize,
}

struct TaskEval {
    score: f64,
    loss: Vec<f64>,
    grad_norm: Vec<f64>,
}

fn eval_task(
    params: &MetaParams,
    spec: &MlpSpec,
    partition: &Partition,
    task: &FewShotTask,
    inner: &InnerConfig,
) -> Result<TaskEval, MetaError> {
    let mut g = Graph::new();
    let bound = bind(params, &mut g);
    let result = adapt(params, &bound, spec, partition, task, inner, &mut g)?;
    let pred = model::forward(spec, result.adapted, &task.val.inputs, &mut g)?;
    let score = match spec.head {
        Head::Regression => {
            let loss = model::loss(spec, result.adapted, &task.val, &mut g)?;
            g.value(loss).item()
        }
        Head::Classification => model::accuracy(g.value(pred), &task.val.class_labels()),
    };
    if !score.is_finite() {
        return Err(InnerError::Diverged {
            step: inner.steps,
            what: "validation score",
        }
        .into());
    }
    Ok(TaskEval {
        score,
        loss: result.trace.iter().map(|p| p.loss).collect(),
        grad_norm: result.trace.iter().map(|p| p.grad_norm).collect(),
    })
}

/// Adapts to each task's training split and scores its validation split:
/// MSE for regression, accuracy for classification.
pub fn evaluate(
    params: &MetaParams,
    tasks: &[FewShotTask],
    spec: &MlpSpec,
    inner: &InnerConfig,
) -> Result<EvalReport, MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    params.validate(spec)?;
    let partition = partition_by_layer(spec);
    let inner = inner.detached().with_trace(true);
    let outcomes: Vec<Result<TaskEval, MetaError>> = tasks
        .par_iter()
        .map(|task| eval_task(params, spec, &partition, task, &inner))
        .collect();
    let mut scores = Vec::with_capacity(tasks.len());
    let mut loss = vec![0.0; inner.steps + 1];
    let mut grad_norm = vec![0.0; inner.steps + 1];
    let mut diverged = 0;
    for outcome in outcomes {
        match outcome {
            Ok(e) => {
                scores.push(e.score);
                for (acc, v) in loss.iter_mut().zip(&e.loss) {
                    *acc += v;
                }
                for (acc, v) in grad_norm.iter_mut().zip(&e.grad_norm) {
                    *acc += v;
                }
            }
            Err(e) if e.is_divergence() => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    let n = scores.len();
    let (mean, half_width) = mean_and_half_width(&scores);
    let scale = |v: Vec<f64>| {
        v.into_iter()
            .map(|x| if n == 0 { f64::NAN } else { x / n as f64 })
            .collect()
    };
    Ok(EvalReport {
        metric: match spec.head {
            Head::Regression => Metric::Mse,
            Head::Classification => Metric::Accuracy,
        },
        mean,
        half_width,
        trace_loss: scale(loss),
        trace_grad_norm: scale(grad_norm),
        evaluated: n,
        diverged,
    })
}

/// Sample mean and `1.96 * s / sqrt(n)`; NaN mean for no samples.
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z_95 * (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tasks::{pool_task, Pool, TaskFamilyConfig};

    fn spec() -> MlpSpec {
        MlpSpec::new(vec![1, 4, 1], Head::Regression).unwrap()
    }

    fn batch(n: u64) -> Vec<FewShotTask> {
        let cfg = TaskFamilyConfig::sinusoid(5, 2);
        (0..n)
            .map(|i| pool_task(&cfg, Pool::MetaTrain, i).unwrap())
            .collect()
    }

    #[test]
    fn zero_beta_leaves_params_unchanged() {
        for method in [MethodTag::Maml, MethodTag::Metasgd, MethodTag::Mirror] {
            let params =
                MetaParams::initial(method, &spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let cfg = MetaConfig {
                beta: 0.0,
                ..MetaConfig::default()
            };
            let (next, _) = meta_step(&params, &batch(4), &spec(), &cfg).unwrap();
            assert_eq!(next, params);
        }
    }

    #[test]
    fn methods_share_the_primal_start() {
        let s = spec();
        let maml =
            MetaParams::initial(MethodTag::Maml, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mirror =
            MetaParams::initial(MethodTag::Mirror, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let part = partition_by_layer(&s);
        let mut g = Graph::new();
        let z = g.leaf(mirror.init.clone());
        let phi = crate::mirror::map_forward(&mirror.map, &part, z, &mut g).unwrap();
        assert!(g.value(phi).max_abs_diff(&maml.init) <= 1e-15);
    }

    #[test]
    fn method_and_map_must_agree() {
        let mut params =
            MetaParams::initial(MethodTag::Maml, &spec(), &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        params.method = MethodTag::Mirror;
        assert!(matches!(
            params.validate(&spec()),
            Err(MetaError::MethodMismatch { .. })
        ));
        params.method = MethodTag::Maml;
        params.init = Tensor::zeros(&[3]);
        assert!(matches!(
            params.validate(&spec()),
            Err(MetaError::InitLength { .. })
        ));
    }

    #[test]
    fn flat_round_trip() {
        let mut params = MetaParams::initial(
            MethodTag::Mirror,
            &spec(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let flat = params.flat();
        assert_eq!(flat.len(), params.num_params());
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        params.set_flat(&shifted);
        assert_eq!(params.flat(), shifted);
    }

    #[test]
    fn preconditioner_stays_above_floor() {
        let mut params = MetaParams::initial(
            MethodTag::Metasgd,
            &spec(),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        if let MapKind::DiagonalLinear(p) = &mut params.map {
            p.data_mut().fill(PRECOND_FLOOR);
        }
        let cfg = MetaConfig {
            beta: 10.0,
            ..MetaConfig::default()
        };
        let (next, _) = meta_step(&params, &batch(2), &spec(), &cfg).unwrap();
        let MapKind::DiagonalLinear(p) = &next.map else {
            unreachable!()
        };
        assert!(p.data().iter().all(|&v| v >= PRECOND_FLOOR));
    }

    #[test]
    fn clipping_bounds_each_task_contribution() {
        let s = spec();
        let params =
            MetaParams::initial(MethodTag::Mirror, &s, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let tasks = batch(1);
        let raw = MetaConfig {
            clip_norm: None,
            ..MetaConfig::default()
        };
        let (free, _) = meta_step(&params, &tasks, &s, &raw).unwrap();
        let loose = MetaConfig {
            clip_norm: Some(1e12),
            ..raw.clone()
        };
        assert_eq!(meta_step(&params, &tasks, &s, &loose).unwrap().0, free);
        let cap = 1e-3;
        let tight = MetaConfig {
            clip_norm: Some(cap),
            ..raw.clone()
        };
        let (next, _) = meta_step(&params, &tasks, &s, &tight).unwrap();
        let step: f64 = next
            .flat()
            .iter()
            .zip(params.flat())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let expected = raw.beta * raw.pool_size as f64 * cap;
        // Recovering a 4e-6 step from O(1) parameters loses about 1e-16 per coordinate.
        assert!(
            (step - expected).abs() <= 1e-9 * expected,
            "{step} vs {expected}"
        );
        assert!(MetaConfig {
            clip_norm: Some(0.0),
            ..raw
        }
        .validate()
        .is_err());
    }

    #[test]
    fn interval_arithmetic() {
        assert_eq!(mean_and_half_width(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, h) = mean_and_half_width(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - Z_95 * (2f64 / 2.0).sqrt()).abs() < 1e-15);
        assert!(mean_and_half_width(&[]).0.is_nan());
    }

    #[test]
    fn invalid_meta_config() {
        let cfg = MetaConfig {
            batch_size: 20,
            pool_size: 10,
            ..MetaConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MetaConfig {
            steps: 0,
            ..MetaConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
