//! Experiment configuration: a TOML file of flat dotted keys, every key
//! optional, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{QepError, Result};
use crate::kernels::KernelFamily;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelType {
    Gp,
    Qep,
    DeepGp,
    DeepQep,
}

impl ModelType {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(Self::Gp),
            "qep" => Ok(Self::Qep),
            "deep_gp" => Ok(Self::DeepGp),
            "deep_qep" => Ok(Self::DeepQep),
            _ => Err(QepError::Config(format!("unknown model.type `{s}` (gp, qep, deep_gp, deep_qep)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gp => "gp",
            Self::Qep => "qep",
            Self::DeepGp => "deep_gp",
            Self::DeepQep => "deep_qep",
        }
    }

    pub fn is_deep(self) -> bool {
        matches!(self, Self::DeepGp | Self::DeepQep)
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, Self::Gp | Self::DeepGp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    TimeSeries,
    Rhombus,
    Clusters,
    Csv(PathBuf),
}

impl Source {
    pub fn parse(s: &str) -> Self {
        match s {
            "timeseries" => Self::TimeSeries,
            "rhombus" => Self::Rhombus,
            "clusters" => Self::Clusters,
            path => Self::Csv(PathBuf::from(path)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::TimeSeries => "timeseries".into(),
            Self::Rhombus => "rhombus".into(),
            Self::Clusters => "clusters".into(),
            Self::Csv(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvTask {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: Source,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
    pub split_fraction: f64,
    pub targets: Vec<String>,
    pub task: CsvTask,
    pub classes: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelType,
    pub q: f64,
    /// Hidden widths for deep models.
    pub layers: Vec<usize>,
    pub family: KernelFamily,
    pub num_inducing: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub latent_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub mc_samples: usize,
    pub class_samples: usize,
    pub predict_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub trace: PathBuf,
    pub latent: PathBuf,
    pub bench: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub models: Vec<ModelType>,
    pub datasets: Vec<Source>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub optim: OptimConfig,
    pub output: OutputConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                source: Source::TimeSeries,
                seed: None,
                split_fraction: 0.8,
                targets: vec![],
                task: CsvTask::Regression,
                classes: 2,
                points: 500,
            },
            model: ModelConfig {
                kind: ModelType::DeepQep,
                q: 1.0,
                layers: vec![2],
                family: KernelFamily::Matern32Ard,
                num_inducing: 32,
                latent_dim: 2,
                beta: 100.0,
                latent_var: 0.1,
            },
            inference: InferenceConfig { mc_samples: 16, class_samples: 4, predict_samples: 200 },
            optim: OptimConfig { iterations: 2000, ..OptimConfig::default() },
            output: OutputConfig {
                checkpoint: "model.json".into(),
                metrics: "metrics.json".into(),
                trace: "trace.csv".into(),
                latent: "latent.csv".into(),
                bench: "bench.csv".into(),
            },
            bench: BenchConfig { models: vec![ModelType::Qep, ModelType::DeepQep], datasets: vec![Source::TimeSeries], seeds: vec![0, 1, 2] },
        }
    }
}

type Table = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, t: &toml::Table, out: &mut Table) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(sub) => flatten(&key, sub, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn bad(key: &str, want: &str) -> QepError {
    QepError::Config(format!("`{key}` must be {want}"))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer().and_then(|i| usize::try_from(i).ok()).ok_or_else(|| bad(key, "a non-negative integer"))
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer().and_then(|i| u64::try_from(i).ok()).ok_or_else(|| bad(key, "a non-negative integer"))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "a string"))
}

fn as_list<'a>(key: &str, v: &'a toml::Value) -> Result<&'a [toml::Value]> {
    v.as_array().map(Vec::as_slice).ok_or_else(|| bad(key, "an array"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| QepError::Config(e.to_string()))?;
        let mut flat = Table::new();
        flatten("", &table, &mut flat);
        let mut c = ExperimentConfig::default();
        let mut clip_set = false;
        for (key, v) in &flat {
            let k = key.as_str();
            match k {
                "seed" => c.seed = as_u64(k, v)?,
                "data.source" => c.data.source = Source::parse(as_str(k, v)?),
                "data.seed" => c.data.seed = Some(as_u64(k, v)?),
                "data.split_fraction" => c.data.split_fraction = as_f64(k, v)?,
                "data.points" => c.data.points = as_usize(k, v)?,
                "data.classes" => c.data.classes = as_usize(k, v)?,
                "data.targets" => {
                    c.data.targets = as_list(k, v)?.iter().map(|t| as_str(k, t).map(str::to_string)).collect::<Result<_>>()?
                }
                "data.task" => {
                    c.data.task = match as_str(k, v)? {
                        "regression" => CsvTask::Regression,
                        "classification" => CsvTask::Classification,
                        _ => return Err(bad(k, "`regression` or `classification`")),
                    }
                }
                "model.type" => c.model.kind = ModelType::parse(as_str(k, v)?)?,
                "model.q" => c.model.q = as_f64(k, v)?,
                "model.layers" => c.model.layers = as_list(k, v)?.iter().map(|w| as_usize(k, w)).collect::<Result<_>>()?,
                "model.kernel.family" => c.model.family = KernelFamily::parse(as_str(k, v)?).map_err(|e| QepError::Config(e.to_string()))?,
                "model.kernel.nu" => {
                    if as_f64(k, v)? != 1.5 {
                        return Err(QepError::Config("only the Matérn ν = 1.5 kernel is implemented".into()));
                    }
                    c.model.family = KernelFamily::Matern32Ard;
                }
                "model.num_inducing" => c.model.num_inducing = as_usize(k, v)?,
                "model.latent_dim" => c.model.latent_dim = as_usize(k, v)?,
                "model.beta" => c.model.beta = as_f64(k, v)?,
                "model.latent_var" => c.model.latent_var = as_f64(k, v)?,
                "inference.mc_samples" => c.inference.mc_samples = as_usize(k, v)?,
                "inference.class_samples" => c.inference.class_samples = as_usize(k, v)?,
                "inference.predict_samples" => c.inference.predict_samples = as_usize(k, v)?,
                "optim.step_size" => c.optim.step_size = as_f64(k, v)?,
                "optim.iterations" => c.optim.iterations = as_usize(k, v)?,
                "optim.beta1" => c.optim.beta1 = as_f64(k, v)?,
                "optim.beta2" => c.optim.beta2 = as_f64(k, v)?,
                "optim.eps" => c.optim.eps = as_f64(k, v)?,
                "optim.gradient_clip" => {
                    let g = as_f64(k, v)?;
                    c.optim.gradient_clip = (g > 0.0).then_some(g);
                    clip_set = true;
                }
                "output.checkpoint" => c.output.checkpoint = as_str(k, v)?.into(),
                "output.metrics" => c.output.metrics = as_str(k, v)?.into(),
                "output.trace" => c.output.trace = as_str(k, v)?.into(),
                "output.latent" => c.output.latent = as_str(k, v)?.into(),
                "output.bench" => c.output.bench = as_str(k, v)?.into(),
                "bench.models" => {
                    c.bench.models = as_list(k, v)?.iter().map(|m| as_str(k, m).and_then(ModelType::parse)).collect::<Result<_>>()?
                }
                "bench.datasets" => c.bench.datasets = as_list(k, v)?.iter().map(|d| as_str(k, d).map(Source::parse)).collect::<Result<_>>()?,
                "bench.seeds" => c.bench.seeds = as_list(k, v)?.iter().map(|s| as_u64(k, s)).collect::<Result<_>>()?,
                _ => return Err(QepError::Config(format!("unknown key `{key}`"))),
            }
        }
        if !clip_set && c.is_classification() {
            // sampled likelihoods are noisy enough to need clipping
            c.optim.gradient_clip = Some(10.0);
        }
        c.normalize();
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QepError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Gaussian model types force q = 2.
    pub fn normalize(&mut self) {
        if self.model.kind.is_gaussian() {
            self.model.q = 2.0;
        }
        if !self.model.kind.is_deep() {
            self.model.layers.clear();
        }
    }

    pub fn is_classification(&self) -> bool {
        match &self.data.source {
            Source::Rhombus => true,
            Source::Csv(_) => self.data.task == CsvTask::Classification,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(QepError::Config(m.to_string()));
        if !(self.model.q > 0.0 && self.model.q.is_finite()) {
            return fail("model.q must be positive");
        }
        if self.model.kind.is_deep() && self.model.layers.is_empty() {
            return fail("deep models need at least one hidden width in model.layers");
        }
        if self.model.layers.contains(&0) || self.model.num_inducing == 0 || self.model.latent_dim == 0 {
            return fail("widths and inducing counts must be positive");
        }
        if !(self.model.beta > 0.0 && self.model.latent_var > 0.0) {
            return fail("model.beta and model.latent_var must be positive");
        }
        if self.inference.mc_samples == 0 || self.inference.class_samples == 0 || self.inference.predict_samples == 0 {
            return fail("inference sample counts must be positive");
        }
        if !(self.data.split_fraction > 0.0 && self.data.split_fraction <= 1.0) {
            return fail("data.split_fraction must lie in (0, 1]");
        }
        if matches!(self.data.source, Source::Csv(_)) && self.data.targets.is_empty() {
            return fail("csv sources need data.targets");
        }
        self.optim.validate().map_err(|e| QepError::Config(e.to_string()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }
}
