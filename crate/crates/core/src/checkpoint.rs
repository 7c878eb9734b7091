//! Checkpoint files: a magic line, a one-line JSON manifest, then every prior
//! tensor as little-endian `f64` in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::meta::{MetaConfig, MetaError, MetaParams, MethodTag};
use crate::mirror::{BlockIaf, MapKind, MirrorError};
use crate::model::{partition_by_layer, MlpSpec};
use crate::tasks::TaskFamilyConfig;

const MAGIC: &str = "METAMIRROR-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad header line)")]
    BadMagic { path: String },
    #[error("{path}: bad manifest: {source}")]
    Manifest {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Layout { path: String, msg: String },
    #[error("checkpoint does not match the config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Mirror(#[from] MirrorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: MethodTag,
    pub spec: MlpSpec,
    pub block_sizes: Vec<usize>,
    pub meta: MetaConfig,
    pub tasks: TaskFamilyConfig,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: MetaParams,
}

impl Checkpoint {
    pub fn new(
        params: MetaParams,
        spec: MlpSpec,
        meta: MetaConfig,
        tasks: TaskFamilyConfig,
    ) -> Result<Self, CheckpointError> {
        params.validate(&spec)?;
        let arrays = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| ArrayEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            method: params.method,
            block_sizes: partition_by_layer(&spec).block_sizes(),
            spec,
            meta,
            tasks,
            arrays,
        };
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        writeln!(buf, "{MAGIC}").map_err(io)?;
        let manifest =
            serde_json::to_string(&self.manifest).map_err(|source| CheckpointError::Manifest {
                path: path.display().to_string(),
                source,
            })?;
        writeln!(buf, "{manifest}").map_err(io)?;
        for (_, t) in self.params.named_tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let name = path.display().to_string();
        let io = |source| CheckpointError::Io {
            path: name.clone(),
            source,
        };
        let layout = |msg: String| CheckpointError::Layout {
            path: name.clone(),
            msg,
        };
        let mut reader = BufReader::new(fs::File::open(path).map_err(io)?);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(io)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(CheckpointError::BadMagic { path: name.clone() });
        }
        line.clear();
        reader.read_line(&mut line).map_err(io)?;
        let manifest: Manifest =
            serde_json::from_str(&line).map_err(|source| CheckpointError::Manifest {
                path: name.clone(),
                source,
            })?;
        let mut params = template(&manifest).map_err(|e| layout(e.to_string()))?;
        let expected: Vec<ArrayEntry> = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| ArrayEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != manifest.arrays {
            return Err(layout(
                "array list does not match the method and model".into(),
            ));
        }
        let mut bytes = [0u8; 8];
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                reader
                    .read_exact(&mut bytes)
                    .map_err(|_| layout("truncated array data".into()))?;
                *v = f64::from_le_bytes(bytes);
            }
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(layout(format!("{} trailing bytes", rest.len())));
        }
        if let MapKind::DiagonalLinear(p) = &params.map {
            params.map = MapKind::diagonal(p.clone())?;
        }
        params.validate(&manifest.spec)?;
        Ok(Self { manifest, params })
    }

    /// Rejects a checkpoint whose model or task family differs from the ones
    /// a run is configured for.
    pub fn check_compatible(
        &self,
        spec: &MlpSpec,
        tasks: &TaskFamilyConfig,
    ) -> Result<(), CheckpointError> {
        if &self.manifest.spec != spec {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint model has layers {:?} ({:?} head), config has {:?} ({:?} head)",
                self.manifest.spec.layer_sizes,
                self.manifest.spec.head,
                spec.layer_sizes,
                spec.head
            )));
        }
        let (a, b) = (&self.manifest.tasks, tasks);
        if a.family != b.family || a.classes != b.classes || a.input_dim != b.input_dim {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint was trained on {:?} with {} classes and input_dim {}, config asks for {:?} with {} classes and input_dim {}",
                a.family, a.classes, a.input_dim, b.family, b.classes, b.input_dim
            )));
        }
        Ok(())
    }
}

/// Prior with the right structure for `manifest` and placeholder values.
fn template(manifest: &Manifest) -> Result<MetaParams, CheckpointError> {
    manifest.spec.validate().map_err(MetaError::from)?;
    let partition = partition_by_layer(&manifest.spec);
    if partition.block_sizes() != manifest.block_sizes {
        return Err(CheckpointError::Mismatch(format!(
            "block sizes {:?} do not follow from the model ({:?})",
            manifest.block_sizes,
            partition.block_sizes()
        )));
    }
    let d = partition.dim();
    let map = match manifest.method {
        MethodTag::Maml => MapKind::Identity,
        MethodTag::Metasgd => MapKind::DiagonalLinear(Tensor::ones(&[d])),
        MethodTag::Mirror => MapKind::BlockIaf(BlockIaf::zero_decoders(
            &partition,
            &mut ChaCha8Rng::seed_from_u64(0),
        )),
    };
    Ok(MetaParams {
        method: manifest.method,
        init: Tensor::zeros(&[d]),
        map,
    })
}
