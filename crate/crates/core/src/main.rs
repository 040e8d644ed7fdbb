use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qepdx::deep::DeepModel;
use qepdx::harness::config::{ExperimentConfig, Source};
use qepdx::harness::data::Dataset;
use qepdx::harness::run::{self, MetricsRecord};
use qepdx::{QepError, Result};

#[derive(Parser)]
#[command(name = "qepdx", version, about = "Q-exponential process and deep Q-EP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset.
    Gen(Common),
    /// Train a model and write its checkpoint and bound trace.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Export the two dominant latent dimensions of an embedding.
    Latent(Common),
    /// Compare analytic and finite-difference gradients at the initial model.
    Gradcheck(Common),
    /// Train and evaluate every (model, dataset, seed) cell.
    Bench(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV dataset; overrides `data.source`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Record wall-clock times (makes outputs non-reproducible).
    #[arg(long)]
    timing: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = &self.data {
            c.data.source = Source::Csv(d.clone());
        }
        c.validate()?;
        Ok(c)
    }

    fn model(&self, c: &ExperimentConfig) -> Result<DeepModel> {
        let path = self.model.clone().unwrap_or_else(|| c.output.checkpoint.clone());
        DeepModel::from_json(&std::fs::read_to_string(&path)?)
    }
}

fn dataset_csv(d: &Dataset) -> String {
    let mut header: Vec<String> = (0..d.x.ncols()).map(|j| format!("x{j}")).collect();
    header.extend((0..d.y.ncols()).map(|j| format!("y{j}")));
    header.push("split".into());
    let mut out = header.join(",") + "\n";
    let mut split = vec![""; d.y.nrows()];
    for &i in &d.train {
        split[i] = "train";
    }
    for &i in &d.test {
        split[i] = "test";
    }
    for i in 0..d.y.nrows() {
        let mut cells: Vec<String> = d.x.row(i).iter().chain(d.y.row(i).iter()).map(f64::to_string).collect();
        cells.push(split[i].to_string());
        out += &(cells.join(",") + "\n");
    }
    out
}

fn dataset_json(d: &Dataset) -> Result<String> {
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() };
    let doc = serde_json::json!({
        "name": d.name,
        "x": rows(&d.x),
        "y": rows(&d.y),
        "train": d.train,
        "test": d.test,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let c = a.config()?;
            let d = run::load_dataset(&c)?;
            let text = match a.format.unwrap_or(Format::Csv) {
                Format::Csv => dataset_csv(&d),
                Format::Json => dataset_json(&d)?,
            };
            match &a.out {
                Some(p) => run::write_file(p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Train(a) => {
            let c = a.config()?;
            let d = run::load_dataset(&c)?;
            let (model, trace) = run::train(&c, &d)?;
            run::write_file(&a.out.unwrap_or(c.output.checkpoint.clone()), &model.to_json()?)?;
            run::write_file(&c.output.trace, &run::trace_csv(&trace))
        }
        Command::Eval(a) => {
            let c = a.config()?;
            let d = run::load_dataset(&c)?;
            let model = a.model(&c)?;
            let start = Instant::now();
            let metrics = run::evaluate(&c, &model, &d)?;
            let record = MetricsRecord {
                dataset: d.name.clone(),
                model: c.model.kind.name().to_string(),
                seed: c.seed,
                metrics,
                wall_time_s: a.timing.then(|| start.elapsed().as_secs_f64()),
                elbo_trace_path: Some(c.output.trace.display().to_string()),
            };
            let text = match a.format.unwrap_or(Format::Json) {
                Format::Json => record.to_json()?,
                Format::Csv => format!("{}\n{}\n", MetricsRecord::csv_header(), record.csv_row()),
            };
            run::write_file(&a.out.unwrap_or(c.output.metrics.clone()), &text)
        }
        Command::Latent(a) => {
            let c = a.config()?;
            let d = run::load_dataset(&c)?;
            let model = a.model(&c)?;
            let text = run::export_latent(&model, d.train_labels().as_deref())?;
            run::write_file(&a.out.unwrap_or(c.output.latent.clone()), &text)
        }
        Command::Gradcheck(a) => {
            let c = a.config()?;
            let d = run::load_dataset(&c)?;
            let report = run::gradcheck(&c, &d, 1e-5)?;
            println!("parameters: {}", report.entries.len());
            println!("max relative error: {:.3e}", report.max_rel_error);
            println!("mean relative error: {:.3e}", report.mean_rel_error);
            for e in report.flagged(1e-4) {
                println!("  {}  analytic {:.6e}  numeric {:.6e}  rel {:.2e}", e.name, e.analytic, e.numeric, e.rel_error);
            }
            if report.max_rel_error < 1e-4 {
                Ok(())
            } else {
                Err(QepError::NumericalFailure(format!("gradient check failed: max relative error {:.3e}", report.max_rel_error)))
            }
        }
        Command::Bench(a) => {
            let c = a.config()?;
            let text = run::bench(&c, a.timing)?;
            run::write_file(&a.out.unwrap_or(c.output.bench.clone()), &text)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
