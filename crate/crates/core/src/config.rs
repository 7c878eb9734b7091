//! Run configuration: a flat TOML file, overridable per key through
//! `METAMIRROR_<KEY>` environment variables.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{MetaConfig, MethodTag, DEFAULT_POOL_SIZE};
use crate::model::{Head, MlpSpec};
use crate::tasks::{Family, TaskFamilyConfig};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "METAMIRROR_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodTag,
    pub family: Family,
    /// Classes per task; classification only.
    pub classes: usize,
    pub shots: usize,
    /// Defaults to 1 for sinusoid and 2 for blobs.
    pub input_dim: Option<usize>,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub phase_min: f64,
    pub phase_max: f64,
    pub spread: f64,
    pub center_range: f64,
    /// Hidden layer widths; input and output widths follow from the family.
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch: usize,
    pub iterations: usize,
    pub pool_size: usize,
    pub eval_tasks: usize,
    pub seed: u64,
    /// Per-task hypergradient norm cap; `inf` disables clipping.
    pub clip_norm: f64,
    pub out: PathBuf,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        Self {
            method: MethodTag::Mirror,
            family: Family::Sinusoid,
            classes: 5,
            shots: 10,
            input_dim: None,
            amplitude_min: 0.1,
            amplitude_max: 5.0,
            phase_min: 0.0,
            phase_max: PI,
            spread: 0.5,
            center_range: 2.0,
            hidden: vec![40, 40],
            steps: meta.steps,
            alpha: meta.alpha,
            beta: meta.beta,
            batch: meta.batch_size,
            iterations: meta.iterations,
            pool_size: DEFAULT_POOL_SIZE,
            eval_tasks: meta.eval_tasks,
            seed: meta.seed,
            clip_norm: meta.clip_norm.unwrap_or(f64::INFINITY),
            out: PathBuf::from("runs"),
            workers: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies overrides from `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let (text, name) = match path {
            Some(p) => {
                let name = p.display().to_string();
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: name.clone(),
                    source,
                })?;
                (text, name)
            }
            None => (String::new(), "<defaults>".to_string()),
        };
        let parse_err = |e: toml::de::Error| ConfigError::Parse {
            path: name.clone(),
            message: e.to_string(),
        };
        // Parsing the text directly keeps line numbers in key and type errors.
        let from_file: RunConfig = toml::from_str(&text).map_err(parse_err)?;
        let overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        let cfg = if overrides.is_empty() {
            from_file
        } else {
            let mut table: toml::Table = toml::from_str(&text).map_err(parse_err)?;
            for (var, value) in &overrides {
                let key = var[ENV_PREFIX.len()..].to_ascii_lowercase();
                table.insert(key, env_value(value));
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    let vars: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
                    ConfigError::Env {
                        var: vars.join(", "),
                        message: e.message().to_string(),
                    }
                })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mlp_spec()?;
        self.meta_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.workers == Some(0) {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskFamilyConfig {
        let input_dim = self.input_dim.unwrap_or(match self.family {
            Family::Sinusoid => 1,
            Family::GaussianBlobs => 2,
        });
        let classes = match self.family {
            Family::Sinusoid => 1,
            Family::GaussianBlobs => self.classes,
        };
        TaskFamilyConfig {
            family: self.family,
            classes,
            shots: self.shots,
            input_dim,
            amplitude: (self.amplitude_min, self.amplitude_max),
            phase: (self.phase_min, self.phase_max),
            spread: self.spread,
            center_range: self.center_range,
            seed: self.seed,
        }
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec, ConfigError> {
        let tasks = self.task_config();
        let mut sizes = vec![tasks.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(tasks.output_dim());
        MlpSpec::new(sizes, Head::from(self.family.kind()))
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            iterations: self.iterations,
            beta: self.beta,
            batch_size: self.batch,
            pool_size: self.pool_size,
            steps: self.steps,
            alpha: self.alpha,
            eval_tasks: self.eval_tasks,
            seed: self.seed,
            clip_norm: (self.clip_norm != f64::INFINITY).then_some(self.clip_norm),
        }
    }
}

/// An override value is read as a TOML value when it parses as one and as a
/// bare string otherwise, so `METAMIRROR_OUT=/tmp/run` needs no quoting.
fn env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) if t.len() == 1 => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        _ => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str, env: &[(&str, &str)]) -> Result<RunConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, text).unwrap();
        RunConfig::load(
            Some(&path),
            env.iter().map(|(k, v)| (k.to_string(), v.to_string())),
        )
    }

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = load_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let m = cfg.meta_config();
        assert_eq!((m.steps, m.alpha, m.beta, m.batch_size), (5, 1e-2, 1e-3, 4));
        assert_eq!(cfg.mlp_spec().unwrap().layer_sizes, vec![1, 40, 40, 1]);
    }

    #[test]
    fn unknown_key_error_names_the_line() {
        let err = load_str("steps = 3\nalpah = 0.1\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("alpah"), "{msg}");
    }

    #[test]
    fn type_error_names_the_line() {
        let msg = load_str("\n\nbeta = \"fast\"\n", &[])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Some(Path::new("/no/such/run.toml")), Vec::new()).unwrap_err();
        assert!(err.to_string().contains("/no/such/run.toml"));
    }

    #[test]
    fn environment_overrides_file() {
        let cfg = load_str(
            "alpha = 0.5\nmethod = \"maml\"\n",
            &[
                ("METAMIRROR_ALPHA", "0.25"),
                ("METAMIRROR_OUT", "/tmp/x y"),
                ("METAMIRROR_HIDDEN", "[8, 4]"),
                ("PATH", "/bin"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.method, MethodTag::Maml);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x y"));
        assert_eq!(cfg.hidden, vec![8, 4]);
    }

    #[test]
    fn unknown_environment_key_is_rejected() {
        let err = load_str("", &[("METAMIRROR_STPES", "3")]).unwrap_err();
        assert!(matches!(err, ConfigError::Env { .. }), "{err}");
    }

    #[test]
    fn semantic_errors_are_reported() {
        assert!(matches!(
            load_str("batch = 8\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            load_str("alpha = -1.0\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        let blobs = load_str("family = \"gaussian-blobs\"\nclasses = 3\n", &[]).unwrap();
        assert_eq!(blobs.mlp_spec().unwrap().layer_sizes, vec![2, 40, 40, 3]);
        assert_eq!(blobs.mlp_spec().unwrap().head, Head::Classification);
    }
}
