//! Experiment configuration.
//!
//! Config files are TOML restricted to scalar and array values under dotted
//! keys, e.g.
//!
//! ```toml
//! rounds = 200
//! gamma = 0.9
//! world.input_dim = 8
//! shared.widths = [8, 16, 2]
//! tasks.0.kind = "regression"
//! tasks.0.difficulty = 10.0
//! ```
//!
//! `[section]` headers are accepted and flattened to the same dotted keys.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::client::{HeadOptimizer, LocalConfig};
use crate::error::{Error, Result};
use crate::numerics::{Activation, MlpSpec};
use crate::server::{FgradNorm, ServerConfig, WeightingStrategy};
use crate::taskgen::{DatasetSchema, LabelEncoding, TaskKind, TaskSpec};

/// Where a task's samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Synthetic,
    File {
        path: PathBuf,
        schema: DatasetSchema,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub input_dim: usize,
    pub repr_dim: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub tau_h: usize,
    pub tau_w: usize,
    /// Weight-update step size.
    pub alpha: f64,
    /// Shared-network step size.
    pub beta: f64,
    pub gamma: f64,
    /// Head step size; defaults to `beta`.
    pub head_lr: Option<f64>,
    pub head_optimizer: HeadOptimizer,
    pub batch_size: Option<usize>,
    pub strategy: WeightingStrategy,
    pub fgrad_norm: FgradNorm,
    pub weight_steps: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Client worker threads; 0 picks automatically.
    pub threads: usize,
    pub world: WorldConfig,
    pub shared_spec: MlpSpec,
    /// Number of final shared layers whose gradient norm drives weighting.
    pub tail_layers: usize,
    pub tasks: Vec<TaskSpec>,
    pub head_specs: Vec<MlpSpec>,
    pub task_data: Vec<TaskData>,
}

impl Default for ExperimentConfig {
    /// Three regression tasks with difficulties 10, 1, 1 and the step sizes
    /// γ = 0.9, β = 2e-4, α = 4e-3, τ_h = τ_w = 5.
    fn default() -> Self {
        let world = WorldConfig {
            input_dim: 16,
            repr_dim: 4,
            noise_std: 0.0,
        };
        let tasks = vec![
            TaskSpec::regression(0, 10.0, 500),
            TaskSpec::regression(1, 1.0, 500),
            TaskSpec::regression(2, 1.0, 500),
        ];
        let head_specs = tasks
            .iter()
            .map(|t| MlpSpec::linear(world.repr_dim, t.kind.label_width()).expect("valid widths"))
            .collect();
        Self {
            rounds: 100,
            tau_h: 5,
            tau_w: 5,
            alpha: 4e-3,
            beta: 2e-4,
            gamma: 0.9,
            head_lr: None,
            head_optimizer: HeadOptimizer::GradientDescent,
            batch_size: None,
            strategy: WeightingStrategy::FedGradNorm,
            fgrad_norm: FgradNorm::L1,
            weight_steps: 1,
            seed: 0,
            output: None,
            threads: 0,
            shared_spec: MlpSpec::new(vec![16, 32, 4], vec![Activation::Relu])
                .expect("valid widths"),
            tail_layers: 1,
            task_data: vec![TaskData::Synthetic; tasks.len()],
            world,
            tasks,
            head_specs,
        }
    }
}

impl ExperimentConfig {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            tau_h: self.tau_h,
            tau_w: self.tau_w,
            beta: self.beta,
            head_lr: self.head_lr.unwrap_or(self.beta),
            head_optimizer: self.head_optimizer,
            batch_size: self.batch_size,
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            fgrad_norm: self.fgrad_norm,
            weight_steps: self.weight_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Error::Config(msg);
        if self.rounds == 0 {
            return Err(cfg("rounds must be at least 1".into()));
        }
        self.local_config()
            .validate()
            .map_err(|e| cfg(e.to_string()))?;
        self.server_config()
            .validate()
            .map_err(|e| cfg(e.to_string()))?;
        let n = self.tasks.len();
        if n < 2 {
            return Err(cfg(format!("need at least two tasks, found {n}")));
        }
        if self.head_specs.len() != n || self.task_data.len() != n {
            return Err(cfg(format!(
                "{n} tasks but {} head networks and {} data sources",
                self.head_specs.len(),
                self.task_data.len()
            )));
        }
        if self.tail_layers == 0 || self.tail_layers > self.shared_spec.num_layers() {
            return Err(cfg(format!(
                "tail_layers must be in 1..={}",
                self.shared_spec.num_layers()
            )));
        }
        let synthetic = self.task_data.contains(&TaskData::Synthetic);
        if synthetic && self.shared_spec.input_width() != self.world.input_dim {
            return Err(cfg(format!(
                "shared network takes {} inputs but world.input_dim is {}",
                self.shared_spec.input_width(),
                self.world.input_dim
            )));
        }
        for (i, (t, h)) in self.tasks.iter().zip(&self.head_specs).enumerate() {
            if t.task_id != i {
                return Err(cfg(format!("task at position {i} has id {}", t.task_id)));
            }
            t.validate().map_err(|e| cfg(e.to_string()))?;
            if h.input_width() != self.shared_spec.output_width() {
                return Err(cfg(format!(
                    "task {i}: head takes {} inputs, shared network emits {}",
                    h.input_width(),
                    self.shared_spec.output_width()
                )));
            }
            if h.output_width() != t.kind.label_width() {
                return Err(cfg(format!(
                    "task {i}: head emits {} values, task needs {}",
                    h.output_width(),
                    t.kind.label_width()
                )));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        let mut keys = Keys { flat };
        let cfg = Self::from_keys(&mut keys)?;
        if let Some(k) = keys.flat.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_keys(keys: &mut Keys) -> Result<Self> {
        let d = Self::default();
        let world = WorldConfig {
            input_dim: keys.usize("world.input_dim")?.unwrap_or(d.world.input_dim),
            repr_dim: keys.usize("world.repr_dim")?.unwrap_or(d.world.repr_dim),
            noise_std: keys.f64("world.noise_std")?.unwrap_or(d.world.noise_std),
        };

        let shared_spec = match keys.usize_list("shared.widths")? {
            Some(widths) => {
                let acts = keys.activations("shared.activations")?.unwrap_or_default();
                MlpSpec::new(widths, acts).map_err(|e| Error::Config(format!("shared: {e}")))?
            }
            None => {
                if keys.activations("shared.activations")?.is_some() {
                    return Err(Error::Config(
                        "shared.activations given without shared.widths".into(),
                    ));
                }
                d.shared_spec.clone()
            }
        };

        let task_ids = keys.task_indices();
        let (tasks, head_specs, task_data) = if task_ids.is_empty() {
            (d.tasks.clone(), d.head_specs.clone(), d.task_data.clone())
        } else {
            let mut tasks = Vec::new();
            let mut heads = Vec::new();
            let mut data = Vec::new();
            for (pos, &id) in task_ids.iter().enumerate() {
                if id != pos {
                    return Err(Error::Config(format!(
                        "task indices must be 0..N without gaps; missing {pos}"
                    )));
                }
                let (t, h, src) = parse_task(keys, id, shared_spec.output_width())?;
                tasks.push(t);
                heads.push(h);
                data.push(src);
            }
            (tasks, heads, data)
        };

        let head_optimizer = match keys.string("head_optimizer")?.as_deref() {
            None | Some("gd") | Some("sgd") => HeadOptimizer::GradientDescent,
            Some("adam") => HeadOptimizer::adam(),
            Some(other) => return Err(Error::Config(format!("unknown head_optimizer `{other}`"))),
        };
        let parse_cfg = |e: Error| Error::Config(e.to_string());
        Ok(Self {
            rounds: keys.usize("rounds")?.unwrap_or(d.rounds),
            tau_h: keys.usize("tau_h")?.unwrap_or(d.tau_h),
            tau_w: keys.usize("tau_w")?.unwrap_or(d.tau_w),
            alpha: keys.f64("alpha")?.unwrap_or(d.alpha),
            beta: keys.f64("beta")?.unwrap_or(d.beta),
            gamma: keys.f64("gamma")?.unwrap_or(d.gamma),
            head_lr: keys.f64("head_lr")?,
            head_optimizer,
            batch_size: keys.usize("batch_size")?.filter(|&b| b > 0),
            strategy: match keys.string("strategy")? {
                Some(s) => s.parse().map_err(parse_cfg)?,
                None => d.strategy,
            },
            fgrad_norm: match keys.string("fgrad_norm")? {
                Some(s) => s.parse().map_err(parse_cfg)?,
                None => d.fgrad_norm,
            },
            weight_steps: keys.usize("weight_steps")?.unwrap_or(d.weight_steps),
            seed: keys.u64("seed")?.unwrap_or(d.seed),
            output: keys.string("output")?.map(PathBuf::from),
            threads: keys.usize("threads")?.unwrap_or(d.threads),
            tail_layers: keys.usize("tail_layers")?.unwrap_or(d.tail_layers),
            world,
            shared_spec,
            tasks,
            head_specs,
            task_data,
        })
    }
}

fn parse_task(
    keys: &mut Keys,
    id: usize,
    repr_dim: usize,
) -> Result<(TaskSpec, MlpSpec, TaskData)> {
    let key = |name: &str| format!("tasks.{id}.{name}");
    let kind = match keys.string(&key("kind"))?.as_deref() {
        None | Some("regression") => TaskKind::Regression {
            outputs: keys.usize(&key("outputs"))?.unwrap_or(1),
        },
        Some("classification") => TaskKind::Classification {
            classes: keys.usize(&key("classes"))?.ok_or_else(|| {
                Error::Config(format!("{} is required for classification", key("classes")))
            })?,
        },
        Some(other) => {
            return Err(Error::Config(format!(
                "{}: unknown kind `{other}`",
                key("kind")
            )))
        }
    };
    let difficulty = keys.f64(&key("difficulty"))?.unwrap_or(1.0);
    let samples = keys.usize(&key("samples"))?;

    let mut widths = vec![repr_dim];
    widths.extend(keys.usize_list(&key("head_hidden"))?.unwrap_or_default());
    widths.push(kind.label_width());
    let acts = keys
        .activations(&key("head_activations"))?
        .unwrap_or_default();
    let head =
        MlpSpec::new(widths, acts).map_err(|e| Error::Config(format!("task {id} head: {e}")))?;

    let data = match keys.string(&key("data"))? {
        None => TaskData::Synthetic,
        Some(path) => {
            let label_columns = keys.string_list(&key("label_columns"))?.ok_or_else(|| {
                Error::Config(format!(
                    "{} is required with a data file",
                    key("label_columns")
                ))
            })?;
            let delimiter = match keys.string(&key("delimiter"))? {
                None => b',',
                Some(s) if s.len() == 1 => s.as_bytes()[0],
                Some(s) if s == "\\t" || s == "tab" => b'\t',
                Some(s) => {
                    return Err(Error::Config(format!(
                        "{}: `{s}` is not one byte",
                        key("delimiter")
                    )))
                }
            };
            let label_encoding = match kind {
                TaskKind::Classification { classes } => LabelEncoding::OneHot { classes },
                TaskKind::Regression { .. } => LabelEncoding::Raw,
            };
            TaskData::File {
                path: PathBuf::from(path),
                schema: DatasetSchema {
                    delimiter,
                    feature_columns: keys.string_list(&key("feature_columns"))?,
                    label_columns,
                    label_encoding,
                },
            }
        }
    };
    let samples = match (&data, samples) {
        (_, Some(s)) => s,
        (TaskData::Synthetic, None) => 500,
        // Replaced by the file's row count when the data is loaded.
        (TaskData::File { .. }, None) => 1,
    };
    let task = TaskSpec {
        task_id: id,
        kind,
        difficulty_scale: difficulty,
        samples,
    };
    Ok((task, head, data))
}

fn flatten(
    prefix: &str,
    value: &toml::Value,
    out: &mut BTreeMap<String, toml::Value>,
) -> Result<()> {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out)?;
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
    Ok(())
}

/// Flattened key-value pairs; every read removes the key so leftovers can be
/// reported as unknown.
struct Keys {
    flat: BTreeMap<String, toml::Value>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.flat.remove(key)
    }

    fn type_err(key: &str, want: &str, got: &toml::Value) -> Error {
        Error::Config(format!("`{key}` must be {want}, found {}", got.type_str()))
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(f)),
            Some(toml::Value::Integer(i)) => Ok(Some(i as f64)),
            Some(v) => Err(Self::type_err(key, "a number", &v)),
        }
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(v) => Err(Self::type_err(key, "a non-negative integer", &v)),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(Self::type_err(key, "a string", &v)),
        }
    }

    fn array(&mut self, key: &str) -> Result<Option<Vec<toml::Value>>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) => Ok(Some(a)),
            Some(v) => Err(Self::type_err(key, "an array", &v)),
        }
    }

    fn usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(items) = self.array(key)? else {
            return Ok(None);
        };
        items
            .iter()
            .map(|v| match v {
                toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                other => Err(Self::type_err(
                    key,
                    "an array of non-negative integers",
                    other,
                )),
            })
            .collect::<Result<_>>()
            .map(Some)
    }

    fn string_list(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        let Some(items) = self.array(key)? else {
            return Ok(None);
        };
        items
            .iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s.clone()),
                other => Err(Self::type_err(key, "an array of strings", other)),
            })
            .collect::<Result<_>>()
            .map(Some)
    }

    fn activations(&mut self, key: &str) -> Result<Option<Vec<Activation>>> {
        let Some(names) = self.string_list(key)? else {
            return Ok(None);
        };
        names
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e: Error| Error::Config(format!("`{key}`: {e}")))
            })
            .collect::<Result<_>>()
            .map(Some)
    }

    /// Sorted task indices mentioned under `tasks.*`.
    fn task_indices(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .flat
            .keys()
            .filter_map(|k| k.strip_prefix("tasks."))
            .filter_map(|rest| rest.split('.').next())
            .filter_map(|id| id.parse().ok())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let d = ExperimentConfig::default();
        d.validate().unwrap();
        assert_eq!((d.gamma, d.beta, d.alpha), (0.9, 2e-4, 4e-3));
        assert_eq!((d.tau_h, d.tau_w), (5, 5));
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), d);
    }

    #[test]
    fn parses_dotted_keys_and_sections() {
        let text = r#"
            rounds = 7
            strategy = "equal"
            seed = 42
            alpha = 1
            world.input_dim = 6
            world.repr_dim = 2
            shared.widths = [6, 8, 2]
            shared.activations = ["tanh"]

            [tasks.0]
            kind = "regression"
            difficulty = 10.0
            samples = 30

            [tasks.1]
            kind = "classification"
            classes = 3
            head_hidden = [4]
            head_activations = ["relu"]
        "#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.rounds, 7);
        assert_eq!(c.strategy, WeightingStrategy::Equal);
        assert_eq!(c.alpha, 1.0);
        assert_eq!(c.tasks.len(), 2);
        assert_eq!(c.tasks[0].difficulty_scale, 10.0);
        assert_eq!(c.tasks[1].kind, TaskKind::Classification { classes: 3 });
        assert_eq!(c.head_specs[1].widths(), &[2, 4, 3]);
        assert_eq!(c.shared_spec.activations(), &[Activation::Tanh]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str("roundz = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("rounds = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml_str("rounds = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("gamma = -1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("tasks.0.kind = \"regression\"").is_err());
        assert!(
            ExperimentConfig::from_toml_str("tasks.0.samples = 3\ntasks.2.samples = 3").is_err()
        );
        assert!(ExperimentConfig::from_toml_str("shared.widths = [5, 4]").is_err());
    }

    #[test]
    fn file_backed_tasks() {
        let text = r#"
            shared.widths = [3, 2]
            tasks.0.data = "a.csv"
            tasks.0.label_columns = ["y"]
            tasks.1.data = "b.tsv"
            tasks.1.delimiter = "tab"
            tasks.1.kind = "classification"
            tasks.1.classes = 2
            tasks.1.label_columns = ["label"]
        "#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        match &c.task_data[1] {
            TaskData::File { path, schema } => {
                assert_eq!(path, &PathBuf::from("b.tsv"));
                assert_eq!(schema.delimiter, b'\t');
                assert_eq!(schema.label_encoding, LabelEncoding::OneHot { classes: 2 });
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
