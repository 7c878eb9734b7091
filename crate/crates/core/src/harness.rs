//! The train, eval and diagnose commands behind the CLI. Each command reads a
//! [`RunConfig`], writes CSVs under `out`, and maps failures to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::inner::{gd_adapt, md_adapt, pgd_adapt, InnerConfig, InnerError, SplitLoss};
use crate::meta::{evaluate, meta_train, EvalReport, MetaError, MetaParams, MethodTag, Metric};
use crate::mirror::BoundMap;
use crate::model::{partition_by_layer, MlpSpec};
use crate::tasks::{pool_task, FewShotTask, Pool, TaskError, TaskFamilyConfig};

/// Meta-test tasks used for the timing diagnostic.
pub const TIMING_TASKS: usize = 200;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    /// 2 for numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        let diverged = match self {
            HarnessError::Meta(e) => e.is_divergence(),
            HarnessError::Checkpoint(CheckpointError::Meta(e)) => e.is_divergence(),
            _ => false,
        };
        if diverged {
            2
        } else {
            1
        }
    }
}

impl From<InnerError> for HarnessError {
    fn from(e: InnerError) -> Self {
        HarnessError::Meta(e.into())
    }
}

/// Writes a CSV with a header row. Floats are written with `Display`, the
/// shortest decimal text that parses back to the same `f64`.
fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })
}

/// The first `n` tasks of the meta-test pool.
pub fn meta_test_tasks(
    tasks: &TaskFamilyConfig,
    n: usize,
) -> Result<Vec<FewShotTask>, HarnessError> {
    (0..n as u64)
        .map(|i| pool_task(tasks, Pool::MetaTest, i).map_err(HarnessError::from))
        .collect()
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub params: MetaParams,
}

/// Meta-trains `cfg.method` and writes `<method>.ckpt` and
/// `<method>_train.csv` (columns `r, mean_val_loss`) under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput, HarnessError> {
    cfg.validate()?;
    let tasks = cfg.task_config();
    let spec = cfg.mlp_spec()?;
    let meta = cfg.meta_config();
    ensure_dir(&cfg.out)?;
    let init = MetaParams::initial(cfg.method, &spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let sampler = |i: u64| {
        pool_task(&tasks, Pool::MetaTrain, i).map_err(|e| MetaError::InvalidConfig(e.to_string()))
    };
    let mut rows = Vec::with_capacity(meta.iterations);
    let params = meta_train(init, &sampler, &spec, &meta, |r, report| {
        if report.diverged > 0 {
            log::warn!(
                "iteration {r}: {} of {} tasks diverged",
                report.diverged,
                meta.batch_size
            );
        }
        if r % 100 == 0 {
            log::info!(
                "iteration {r}: mean validation loss {}",
                report.mean_val_loss
            );
        }
        rows.push(vec![r.to_string(), report.mean_val_loss.to_string()]);
    })?;
    let loss_csv = cfg.out.join(format!("{}_train.csv", cfg.method));
    write_csv(&loss_csv, &["r", "mean_val_loss"], rows)?;
    let checkpoint = cfg.out.join(format!("{}.ckpt", cfg.method));
    Checkpoint::new(params.clone(), spec, meta, tasks)?.save(&checkpoint)?;
    Ok(TrainOutput {
        checkpoint,
        loss_csv,
        params,
    })
}

fn load_compatible(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, MlpSpec), HarnessError> {
    let spec = cfg.mlp_spec()?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&spec, &cfg.task_config())?;
    Ok((ckpt, spec))
}

/// Inner configuration at meta-test time: the training `K` and `alpha`.
pub fn eval_inner(cfg: &RunConfig) -> Result<InnerConfig, HarnessError> {
    Ok(InnerConfig::new(cfg.steps, cfg.alpha)?)
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub csv: PathBuf,
}

/// Evaluates a checkpoint on `cfg.eval_tasks` meta-test tasks and writes
/// `<method>_eval.csv` under `cfg.out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutput, HarnessError> {
    cfg.validate()?;
    let (ckpt, spec) = load_compatible(cfg, checkpoint)?;
    ensure_dir(&cfg.out)?;
    let inner = eval_inner(cfg)?;
    let tasks = meta_test_tasks(&cfg.task_config(), cfg.eval_tasks)?;
    let report = evaluate(&ckpt.params, &tasks, &spec, &inner)?;
    if report.evaluated == 0 {
        return Err(MetaError::AllDiverged { iteration: None }.into());
    }
    let csv = cfg.out.join(format!("{}_eval.csv", ckpt.params.method));
    let metric = match report.metric {
        Metric::Mse => "mse",
        Metric::Accuracy => "accuracy",
    };
    write_csv(
        &csv,
        &[
            "method",
            "metric",
            "mean",
            "half_width",
            "evaluated",
            "diverged",
            "steps",
            "alpha",
        ],
        [vec![
            ckpt.params.method.to_string(),
            metric.to_string(),
            report.mean.to_string(),
            report.half_width.to_string(),
            report.evaluated.to_string(),
            report.diverged.to_string(),
            inner.steps.to_string(),
            inner.alpha.to_string(),
        ]],
    )?;
    Ok(EvalOutput { report, csv })
}

/// Header line noting the meta-test adaptation settings.
pub fn report_header(inner: &InnerConfig) -> String {
    format!(
        "# meta-test adaptation: K = {} steps, alpha = {} (the meta-training values)",
        inner.steps, inner.alpha
    )
}

/// `mse 0.012345 ± 0.000678` or `accuracy 56.10 ± 1.43%`.
pub fn format_report(report: &EvalReport) -> String {
    match report.metric {
        Metric::Mse => format!("mse {:.6} ± {:.6}", report.mean, report.half_width),
        Metric::Accuracy => format!(
            "accuracy {:.2} ± {:.2}%",
            100.0 * report.mean,
            100.0 * report.half_width
        ),
    }
}

#[derive(Clone, Debug)]
pub struct TimingRow {
    pub label: String,
    pub method: MethodTag,
    pub solver: &'static str,
    pub solver_seconds_per_step: f64,
    pub gd_seconds_per_step: f64,
}

impl TimingRow {
    pub fn ratio(&self) -> f64 {
        self.solver_seconds_per_step / self.gd_seconds_per_step
    }
}

pub struct TraceFiles {
    pub label: String,
    pub loss_csv: PathBuf,
    pub grad_norm_csv: PathBuf,
    pub report: EvalReport,
}

pub struct DiagnoseOutput {
    pub traces: Vec<TraceFiles>,
    pub timing: Vec<TimingRow>,
    pub timing_csv: PathBuf,
}

fn solver_name(method: MethodTag) -> &'static str {
    match method {
        MethodTag::Maml => "gd",
        MethodTag::Metasgd => "pgd",
        MethodTag::Mirror => "md",
    }
}

/// Mean wall time per inner step of the method's own solver and of plain GD
/// from the same starting vector, on the same tasks. Both solvers build the
/// differentiable unroll used during meta-training. Runs single-threaded,
/// alternating solvers task by task so drift affects both equally.
pub fn time_inner_steps(
    params: &MetaParams,
    spec: &MlpSpec,
    tasks: &[FewShotTask],
    inner: &InnerConfig,
) -> Result<(f64, f64), HarnessError> {
    let partition = partition_by_layer(spec);
    let inner = InnerConfig {
        differentiable: true,
        record_trace: false,
        ..*inner
    };
    let run = |task: &FewShotTask, own: bool| -> Result<f64, HarnessError> {
        let objective = SplitLoss {
            spec,
            data: &task.train,
        };
        let start = Instant::now();
        let mut g = Graph::new();
        let init = g.leaf(params.init.clone());
        if own {
            match params.map.bind(&mut g) {
                BoundMap::Identity => gd_adapt(init, &objective, &inner, &mut g)?,
                BoundMap::Diagonal(p) => pgd_adapt(init, p, &objective, &inner, &mut g)?,
                map => md_adapt(init, &map, &partition, &objective, &inner, &mut g)?,
            };
        } else {
            gd_adapt(init, &objective, &inner, &mut g)?;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    // Warm caches and the allocator before measuring.
    if let Some(t) = tasks.first() {
        run(t, true)?;
        run(t, false)?;
    }
    let (mut own, mut gd) = (0.0, 0.0);
    for (i, task) in tasks.iter().enumerate() {
        if i % 2 == 0 {
            own += run(task, true)?;
            gd += run(task, false)?;
        } else {
            gd += run(task, false)?;
            own += run(task, true)?;
        }
    }
    let steps = (tasks.len() * inner.steps) as f64;
    Ok((own / steps, gd / steps))
}

/// For each checkpoint, writes `<label>_trace_loss.csv` (k, mean_loss) and
/// `<label>_trace_grad_norm.csv` (k, mean_grad_norm) with rows k = 0..=K,
/// then one `timing.csv` with a row per checkpoint.
pub fn cmd_diagnose(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
) -> Result<DiagnoseOutput, HarnessError> {
    if checkpoints.is_empty() {
        return Err(HarnessError::Usage(
            "diagnose needs at least one --checkpoint".into(),
        ));
    }
    cfg.validate()?;
    ensure_dir(&cfg.out)?;
    let inner = eval_inner(cfg)?;
    let tasks = meta_test_tasks(&cfg.task_config(), cfg.eval_tasks)?;
    let timing_tasks = &tasks[..tasks.len().min(TIMING_TASKS)];
    let mut traces = Vec::new();
    let mut timing = Vec::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let (ckpt, spec) = load_compatible(cfg, path)?;
        let method = ckpt.params.method;
        let label = if traces
            .iter()
            .any(|t: &TraceFiles| t.label == method.to_string())
        {
            format!("{method}_{i}")
        } else {
            method.to_string()
        };
        let report = evaluate(&ckpt.params, &tasks, &spec, &inner)?;
        if report.evaluated == 0 {
            return Err(MetaError::AllDiverged { iteration: None }.into());
        }
        let loss_csv = cfg.out.join(format!("{label}_trace_loss.csv"));
        let grad_norm_csv = cfg.out.join(format!("{label}_trace_grad_norm.csv"));
        let rows = |v: &[f64]| -> Vec<Vec<String>> {
            v.iter()
                .enumerate()
                .map(|(k, x)| vec![k.to_string(), x.to_string()])
                .collect()
        };
        write_csv(&loss_csv, &["k", "mean_loss"], rows(&report.trace_loss))?;
        write_csv(
            &grad_norm_csv,
            &["k", "mean_grad_norm"],
            rows(&report.trace_grad_norm),
        )?;
        let (own, gd) = time_inner_steps(&ckpt.params, &spec, timing_tasks, &inner)?;
        timing.push(TimingRow {
            label: label.clone(),
            method,
            solver: solver_name(method),
            solver_seconds_per_step: own,
            gd_seconds_per_step: gd,
        });
        traces.push(TraceFiles {
            label,
            loss_csv,
            grad_norm_csv,
            report,
        });
    }
    let timing_csv = cfg.out.join("timing.csv");
    write_csv(
        &timing_csv,
        &[
            "label",
            "method",
            "solver",
            "solver_seconds_per_step",
            "gd_seconds_per_step",
            "ratio",
        ],
        timing.iter().map(|t| {
            vec![
                t.label.clone(),
                t.method.to_string(),
                t.solver.to_string(),
                t.solver_seconds_per_step.to_string(),
                t.gd_seconds_per_step.to_string(),
                t.ratio().to_string(),
            ]
        }),
    )?;
    Ok(DiagnoseOutput {
        traces,
        timing,
        timing_csv,
    })
}
