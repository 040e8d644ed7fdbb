//! Train, evaluate, export and benchmark pipelines shared by the CLI and the
//! tests.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{CsvTask, ExperimentConfig, ModelType, Source};
use super::data::{gen_clusters, gen_rhombus, gen_timeseries, load_csv, Dataset, Task};
use super::metrics::{accuracy, categorical_nll, centroid_purity, macro_auc, mae_std, qed_nll, Metrics};
use crate::deep::{deep_predict, fit, predict_proba, DeepModel, DeepObjective, Head, Mode, ModelSetup};
use crate::error::{invalid, QepError, Result};
use crate::optim::{self, GradientReport, OptimConfig, Trace};

/// Mixes the experiment seed into per-stage streams so that data, model
/// initialization, optimization and prediction never share draws.
fn stream(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let seed = config.data_seed();
    match &config.data.source {
        Source::TimeSeries => Ok(gen_timeseries(seed)),
        Source::Rhombus => gen_rhombus(seed, config.data.points, config.data.split_fraction),
        Source::Clusters => Ok(gen_clusters(seed)),
        Source::Csv(path) => {
            let task = match config.data.task {
                CsvTask::Regression => Task::Regression,
                CsvTask::Classification => Task::Classification { classes: config.data.classes },
            };
            load_csv(path, &config.data.targets, task, config.data.split_fraction, seed)
        }
    }
}

pub fn model_setup(config: &ExperimentConfig, data: &Dataset) -> ModelSetup {
    let (mode, head) = match data.task {
        Task::Regression => (Mode::Supervised, Head::Regression),
        Task::Classification { classes } => (Mode::Supervised, Head::Classification { classes }),
        Task::Latent { .. } => (Mode::Unsupervised, Head::Regression),
    };
    ModelSetup {
        mode,
        head,
        q: config.model.q,
        hidden: config.model.layers.clone(),
        latent_dim: config.model.latent_dim,
        family: config.model.family,
        num_inducing: config.model.num_inducing,
        beta: config.model.beta,
        latent_var: config.model.latent_var,
        mc_draws: config.inference.mc_samples,
        class_samples: config.inference.class_samples,
        seed: stream(config.seed, 1),
    }
}

fn training_arrays(data: &Dataset) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    match data.task {
        Task::Latent { .. } => (data.train_y(), None),
        _ => (data.train_y(), Some(data.train_x())),
    }
}

pub fn initial_model(config: &ExperimentConfig, data: &Dataset) -> Result<DeepModel> {
    let (y, x) = training_arrays(data);
    DeepModel::initialize(&model_setup(config, data), &y, x.as_ref())
}

pub fn train(config: &ExperimentConfig, data: &Dataset) -> Result<(DeepModel, Trace)> {
    let model = initial_model(config, data)?;
    let (y, x) = training_arrays(data);
    let optim = OptimConfig { seed: stream(config.seed, 2), ..config.optim.clone() };
    info!("training {} on {} ({} points)", config.model.kind.name(), data.name, y.nrows());
    fit(&y, &model, x.as_ref(), &optim)
}

/// Checks the model against the dataset and computes the task's metrics.
pub fn evaluate(config: &ExperimentConfig, model: &DeepModel, data: &Dataset) -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(config.seed, 3));
    let samples = config.inference.predict_samples;
    match data.task {
        Task::Regression => {
            let x = data.test_x();
            expect_dims(model, Some(x.ncols()), data.y.ncols())?;
            let p = deep_predict(model, &x, samples, &mut rng)?;
            let mean = data.unstandardize_y(&p.mean);
            let scale = data.y_scale();
            let var = DMatrix::from_fn(p.stddev.nrows(), p.stddev.ncols(), |i, j| (p.stddev[(i, j)] * scale[j]).powi(2));
            let reference = data.test_truth().unwrap_or_else(|| data.test_y());
            let (mae, std) = mae_std(&mean, &reference)?;
            let nll = qed_nll(&mean, &var, &data.test_y(), model.q)?;
            Ok(Metrics { mae: Some(mae), std: Some(std), nll: Some(nll), acc: None, auc: None })
        }
        Task::Classification { classes } => {
            let x = data.test_x();
            expect_dims(model, Some(x.ncols()), classes)?;
            let labels: Vec<usize> = data.test.iter().map(|&i| data.labels.as_ref().expect("labels")[i]).collect();
            let probs = predict_proba(model, &x, samples, &mut rng)?;
            Ok(Metrics {
                mae: None,
                std: None,
                nll: Some(categorical_nll(&probs, &labels)?),
                acc: Some(accuracy(&probs, &labels)?),
                auc: macro_auc(&probs, &labels)?,
            })
        }
        Task::Latent { classes } => {
            expect_dims(model, None, data.y.ncols())?;
            let (coords, _) = dominant_latent(model)?;
            let labels = data.train_labels().expect("labels");
            if coords.nrows() != labels.len() {
                return Err(QepError::Evaluation("latent rows differ from the dataset".into()));
            }
            Ok(Metrics { acc: Some(centroid_purity(&coords, &labels, classes)), ..Metrics::default() })
        }
    }
}

fn expect_dims(model: &DeepModel, inputs: Option<usize>, outputs: usize) -> Result<()> {
    let top = model.layers.last().map(|l| l.in_dim);
    let ok_in = inputs.is_none_or(|q| top == Some(q));
    let ok_mode = (inputs.is_some()) == (model.mode == Mode::Supervised);
    if !ok_in || !ok_mode || model.layers[0].out_dim != outputs {
        return Err(QepError::Evaluation("model and dataset dimensions disagree".into()));
    }
    Ok(())
}

/// Top-layer latent means and standard deviations on the two dimensions with
/// the largest ARD weights, in decreasing weight order.
pub fn dominant_latent(model: &DeepModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let top = model.layers.len() - 1;
    let state = &model.states[top];
    if state.x_mean.nrows() == 0 {
        return Err(invalid("the model has no latent inputs"));
    }
    let gamma = &model.layers[top].kernel.gamma;
    if gamma.len() < 2 {
        return Err(invalid("latent export needs at least two latent dimensions"));
    }
    let mut order: Vec<usize> = (0..gamma.len()).collect();
    order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]));
    let dims = [order[0], order[1]];
    let n = state.x_mean.nrows();
    let mean = DMatrix::from_fn(n, 2, |i, j| state.x_mean[(i, dims[j])]);
    let sd = DMatrix::from_fn(n, 2, |i, j| state.x_cov_diag[(i, dims[j])].sqrt());
    Ok((mean, sd))
}

/// CSV rows of `mu_a, mu_b, sd_a, sd_b, label`.
pub fn export_latent(model: &DeepModel, labels: Option<&[usize]>) -> Result<String> {
    let (mean, sd) = dominant_latent(model)?;
    let mut out = String::from("mu_0,mu_1,sd_0,sd_1,label\n");
    for i in 0..mean.nrows() {
        let label = labels.and_then(|l| l.get(i)).map_or(String::new(), |l| l.to_string());
        writeln!(out, "{},{},{},{},{}", mean[(i, 0)], mean[(i, 1)], sd[(i, 0)], sd[(i, 1)], label).unwrap();
    }
    Ok(out)
}

pub fn gradcheck(config: &ExperimentConfig, data: &Dataset, step: f64) -> Result<GradientReport> {
    let model = initial_model(config, data)?;
    let (y, x) = training_arrays(data);
    let obj = DeepObjective::new(&model, &y, x.as_ref())?;
    optim::check_gradient(&obj, &model.to_params()?, step, stream(config.seed, 2))
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub wall_time_s: Option<f64>,
    pub elbo_trace_path: Option<String>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv_header() -> &'static str {
        "dataset,model,seed,mae,std,nll,acc,auc,wall_time_s"
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.model,
            self.seed,
            f(m.mae),
            f(m.std),
            f(m.nll),
            f(m.acc),
            f(m.auc),
            f(self.wall_time_s)
        )
    }
}

pub fn trace_csv(trace: &Trace) -> String {
    let mut out = String::from("iteration,neg_elbo\n");
    for (i, l) in trace.losses.iter().enumerate() {
        writeln!(out, "{i},{l}").unwrap();
    }
    out
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// One configured (model, dataset, seed) cell.
pub fn cell_config(base: &ExperimentConfig, kind: ModelType, source: &Source, seed: u64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.model.kind = kind;
    if kind.is_deep() && c.model.layers.is_empty() {
        c.model.layers = vec![2];
    }
    c.data.source = source.clone();
    c.seed = seed;
    c.data.seed = None;
    c.normalize();
    if c.is_classification() && c.optim.gradient_clip.is_none() {
        c.optim.gradient_clip = Some(10.0);
    }
    c.validate()?;
    Ok(c)
}

/// Runs the full matrix in parallel and returns CSV text, one row per cell
/// in matrix order.
pub fn bench(base: &ExperimentConfig, timing: bool) -> Result<String> {
    let mut cells = Vec::new();
    for source in &base.bench.datasets {
        for &kind in &base.bench.models {
            for &seed in &base.bench.seeds {
                cells.push(cell_config(base, kind, source, seed)?);
            }
        }
    }
    let rows: Vec<Result<String>> = cells
        .par_iter()
        .map(|c| {
            let start = Instant::now();
            let data = load_dataset(c)?;
            let (model, _) = train(c, &data)?;
            let metrics = evaluate(c, &model, &data)?;
            let record = MetricsRecord {
                dataset: data.name.clone(),
                model: c.model.kind.name().to_string(),
                seed: c.seed,
                metrics,
                wall_time_s: timing.then(|| start.elapsed().as_secs_f64()),
                elbo_trace_path: None,
            };
            Ok(record.csv_row())
        })
        .collect();
    let mut out = String::from(MetricsRecord::csv_header());
    out.push('\n');
    for r in rows {
        out.push_str(&r?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(source: &str, kind: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "data.source = \"{source}\"\nmodel.type = \"{kind}\"\nmodel.num_inducing = 6\noptim.iterations = 3\ninference.predict_samples = 5\ninference.mc_samples = 2\nmodel.kernel.family = \"se_ard\"\ndata.points = 60\n"
        ))
        .unwrap()
    }

    #[test]
    fn saved_model_evaluates_like_the_in_memory_one() {
        let c = quick("timeseries", "deep_qep");
        let data = load_dataset(&c).unwrap();
        let (model, trace) = train(&c, &data).unwrap();
        assert_eq!(trace.losses.len(), 3);
        let direct = evaluate(&c, &model, &data).unwrap();
        let loaded = DeepModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(evaluate(&c, &loaded, &data).unwrap(), direct);
        assert!(direct.mae.unwrap() > 0.0 && direct.nll.unwrap().is_finite());
    }

    #[test]
    fn classification_and_latent_metrics() {
        let c = quick("rhombus", "qep");
        let data = load_dataset(&c).unwrap();
        let (model, _) = train(&c, &data).unwrap();
        let m = evaluate(&c, &model, &data).unwrap();
        assert!(m.acc.is_some() && m.auc.is_some() && m.mae.is_none());

        let c = quick("clusters", "qep");
        let data = load_dataset(&c).unwrap();
        let model = initial_model(&c, &data).unwrap();
        let m = evaluate(&c, &model, &data).unwrap();
        assert!(m.acc.unwrap() > 0.8, "{m:?}");
        let csv = export_latent(&model, data.labels.as_deref()).unwrap();
        assert_eq!(csv.lines().count(), data.y.nrows() + 1);
        assert!(csv.lines().skip(1).all(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[2].parse::<f64>().unwrap() > 0.0 && f[3].parse::<f64>().unwrap() > 0.0
        }));
    }

    #[test]
    fn mismatched_model_is_an_evaluation_error() {
        let c = quick("timeseries", "qep");
        let data = load_dataset(&c).unwrap();
        let rh = quick("rhombus", "qep");
        let other = initial_model(&rh, &load_dataset(&rh).unwrap()).unwrap();
        assert!(matches!(evaluate(&c, &other, &data), Err(QepError::Evaluation(_))));
    }

    #[test]
    fn latent_export_needs_two_dimensions() {
        let mut c = quick("clusters", "qep");
        c.model.latent_dim = 1;
        let data = load_dataset(&c).unwrap();
        let model = initial_model(&c, &data).unwrap();
        assert!(matches!(export_latent(&model, None), Err(QepError::InvalidArgument(_))));
    }

    #[test]
    fn bench_rows_follow_matrix_order() {
        let mut c = quick("timeseries", "qep");
        c.bench.models = vec![ModelType::Gp, ModelType::Qep];
        c.bench.seeds = vec![4, 5];
        let csv = bench(&c, false).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 5);
        assert!(rows[1].starts_with("timeseries,gp,4,") && rows[4].starts_with("timeseries,qep,5,"));
        assert_eq!(csv, bench(&c, false).unwrap());
    }
}
