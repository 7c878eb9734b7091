//! Synthetic few-shot task families.
//!
//! Every task is a pure function of `(config, pool, index)`: the per-task RNG is a
//! ChaCha stream keyed by the config seed, with meta-train and meta-test tasks
//! drawn from disjoint halves of the stream space.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

/// Validation records per class.
pub const VAL_SHOTS: usize = 15;

/// Sinusoid inputs are drawn uniformly from `[-INPUT_RANGE, INPUT_RANGE]`.
pub const INPUT_RANGE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("task {kind:?} was asked for from a {family:?} sampler")]
    WrongFamily { family: Family, kind: TaskKind },
    #[error("writing task dump: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing task dump: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sinusoid,
    GaussianBlobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl Family {
    pub fn kind(self) -> TaskKind {
        match self {
            Family::Sinusoid => TaskKind::Regression,
            Family::GaussianBlobs => TaskKind::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamilyConfig {
    pub family: Family,
    /// Classes per task; ignored for regression.
    pub classes: usize,
    /// Training shots (per class for classification).
    pub shots: usize,
    pub input_dim: usize,
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    /// Standard deviation of blob points around their class center.
    pub spread: f64,
    /// Centers are drawn uniformly from `[-center_range, center_range]` per axis.
    pub center_range: f64,
    pub seed: u64,
}

impl TaskFamilyConfig {
    pub fn sinusoid(shots: usize, seed: u64) -> Self {
        Self {
            family: Family::Sinusoid,
            classes: 1,
            shots,
            input_dim: 1,
            amplitude: (0.1, 5.0),
            phase: (0.0, PI),
            spread: 0.0,
            center_range: 0.0,
            seed,
        }
    }

    pub fn blobs(classes: usize, shots: usize, input_dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            family: Family::GaussianBlobs,
            classes,
            shots,
            input_dim,
            amplitude: (1.0, 1.0),
            phase: (0.0, 0.0),
            spread,
            center_range: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: &str| Err(TaskError::InvalidConfig(msg.to_string()));
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        match self.family {
            Family::Sinusoid => {
                if self.input_dim != 1 {
                    return bad("sinusoid tasks have input_dim 1");
                }
                let (lo, hi) = self.amplitude;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad("amplitude range must satisfy lo < hi");
                }
                let (lo, hi) = self.phase;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad("phase range must satisfy lo < hi");
                }
            }
            Family::GaussianBlobs => {
                if self.classes < 2 {
                    return bad("classification needs at least 2 classes");
                }
                if !(self.spread.is_finite() && self.spread >= 0.0) {
                    return bad("spread must be finite and non-negative");
                }
                if !(self.center_range.is_finite() && self.center_range > 0.0) {
                    return bad("center_range must be positive");
                }
            }
        }
        Ok(())
    }

    /// Number of output units a model needs for this family.
    pub fn output_dim(&self) -> usize {
        match self.family {
            Family::Sinusoid => 1,
            Family::GaussianBlobs => self.classes,
        }
    }

    pub fn train_size(&self) -> usize {
        self.shots * self.classes_or_one()
    }

    pub fn val_size(&self) -> usize {
        VAL_SHOTS * self.classes_or_one()
    }

    fn classes_or_one(&self) -> usize {
        match self.family {
            Family::Sinusoid => 1,
            Family::GaussianBlobs => self.classes,
        }
    }
}

/// Inputs and labels of one split. Classification labels are class indices
/// stored as floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Tensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_labels(&self) -> Vec<usize> {
        self.labels.data().iter().map(|&l| l as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub train: Split,
    pub val: Split,
    pub kind: TaskKind,
}

/// Which disjoint task pool a task is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    MetaTrain,
    MetaTest,
}

const TEST_STREAM_BIT: u64 = 1 << 63;

/// The RNG that generates task `index` of `pool`.
pub fn task_rng(seed: u64, pool: Pool, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = index & !TEST_STREAM_BIT;
    rng.set_stream(match pool {
        Pool::MetaTrain => index,
        Pool::MetaTest => TEST_STREAM_BIT | index,
    });
    rng
}

pub fn sample_sinusoid_task<R: Rng>(
    config: &TaskFamilyConfig,
    rng: &mut R,
) -> Result<FewShotTask, TaskError> {
    config.validate()?;
    if config.family != Family::Sinusoid {
        return Err(TaskError::WrongFamily {
            family: config.family,
            kind: TaskKind::Regression,
        });
    }
    let amplitude = rng.random_range(config.amplitude.0..config.amplitude.1);
    let phase = rng.random_range(config.phase.0..config.phase.1);
    let mut draw = |n: usize| {
        let xs: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-INPUT_RANGE..INPUT_RANGE))
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| sinusoid(amplitude, phase, x)).collect();
        Split {
            inputs: Tensor::new(vec![n, 1], xs).expect("n > 0"),
            labels: Tensor::new(vec![n, 1], ys).expect("n > 0"),
        }
    };
    let train = draw(config.train_size());
    let val = draw(config.val_size());
    Ok(FewShotTask {
        train,
        val,
        kind: TaskKind::Regression,
    })
}

pub fn sinusoid(amplitude: f64, phase: f64, x: f64) -> f64 {
    amplitude * (x + phase).sin()
}

pub fn sample_classification_task<R: Rng>(
    config: &TaskFamilyConfig,
    rng: &mut R,
) -> Result<FewShotTask, TaskError> {
    config.validate()?;
    if config.family != Family::GaussianBlobs {
        return Err(TaskError::WrongFamily {
            family: config.family,
            kind: TaskKind::Classification,
        });
    }
    let dim = config.input_dim;
    let centers: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-config.center_range..config.center_range))
                .collect()
        })
        .collect();
    let mut draw = |per_class: usize| {
        let n = per_class * config.classes;
        let mut xs = Vec::with_capacity(n * dim);
        let mut ys = Vec::with_capacity(n);
        for (class, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                for &c in center {
                    let noise: f64 = StandardNormal.sample(rng);
                    xs.push(c + config.spread * noise);
                }
                ys.push(class as f64);
            }
        }
        Split {
            inputs: Tensor::new(vec![n, dim], xs).expect("n > 0"),
            labels: Tensor::new(vec![n], ys).expect("n > 0"),
        }
    };
    let train = draw(config.shots);
    let val = draw(VAL_SHOTS);
    Ok(FewShotTask {
        train,
        val,
        kind: TaskKind::Classification,
    })
}

/// Draws a task of the configured family.
pub fn sample_task<R: Rng>(
    config: &TaskFamilyConfig,
    rng: &mut R,
) -> Result<FewShotTask, TaskError> {
    match config.family {
        Family::Sinusoid => sample_sinusoid_task(config, rng),
        Family::GaussianBlobs => sample_classification_task(config, rng),
    }
}

/// Task `index` of `pool`, deterministic in `(config, pool, index)`.
pub fn pool_task(
    config: &TaskFamilyConfig,
    pool: Pool,
    index: u64,
) -> Result<FewShotTask, TaskError> {
    sample_task(config, &mut task_rng(config.seed, pool, index))
}

/// Writes one row per record: `split, x0.., label`.
pub fn write_task_csv<W: Write>(task: &FewShotTask, out: W) -> Result<(), TaskError> {
    let dim = task.train.inputs.shape()[1];
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["split".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.push("label".to_string());
    writer.write_record(&header)?;
    for (name, split) in [("train", &task.train), ("val", &task.val)] {
        for r in 0..split.len() {
            let mut row = vec![name.to_string()];
            row.extend(
                split.inputs.data()[r * dim..(r + 1) * dim]
                    .iter()
                    .map(|v| v.to_string()),
            );
            row.push(split.labels.data()[r].to_string());
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn dump_task(task: &FewShotTask, path: &Path) -> Result<(), TaskError> {
    write_task_csv(task, std::fs::File::create(path)?)
}
