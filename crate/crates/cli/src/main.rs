mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{ExperimentArgs, Precision, RunConfig};
use mexp_core::dgm::{read_raw_field, write_flow_png, write_raw_field, FramePair};
use mexp_core::fusion::{profile_fusion, FusionVariant};
use mexp_core::pipeline::{
    generate_synthetic_dataset, load_dataset, read_image, run_loso, write_synthetic_dataset, ExperimentConfig, Metrics,
    SyntheticSpec, Trainer, CLASS_NAMES,
};
use mexp_core::{Error, Real, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mexp", version, about = "Micro-expression recognition with learned displacement and transformer fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to disk.
    GenSynthetic {
        /// Generator spec (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on every sample of a dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-subject-out cross validation.
    Loso {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Run only the first N folds.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Colour-wheel image and raw file of a displacement field.
    VizDisplacement {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Checkpoint whose displacement network is applied to --onset/--apex.
        #[arg(long, requires_all = ["onset", "apex"], conflicts_with = "field")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        onset: Option<PathBuf>,
        #[arg(long)]
        apex: Option<PathBuf>,
        /// Visualise an existing raw field file instead.
        #[arg(long, required_unless_present = "checkpoint")]
        field: Option<PathBuf>,
        /// Output PNG; the raw field is written next to it with extension `.bin`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved run configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Symbolic MACs and wall-clock of both fusion variants.
    ProfileFusion {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,9,25")]
        tokens: Vec<usize>,
    },
}

/// Process exit code of an error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Shape { .. } | Error::Resolution(_) | Error::Geometry(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } => 3,
        Error::Numerical(_) => 4,
        Error::Version(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic { config, seed, out, force } => gen_synthetic(config.as_deref(), seed, &out, force),
        Command::Train { exp, out, force } => {
            let run = exp.resolve()?;
            match run.precision {
                Precision::F32 => train::<f32>(&run, &out, force),
                Precision::F64 => train::<f64>(&run, &out, force),
            }
        }
        Command::Eval { exp, checkpoint, out } => {
            let run = exp.resolve()?;
            match run.precision {
                Precision::F32 => eval::<f32>(&run, &checkpoint, out.as_deref()),
                Precision::F64 => eval::<f64>(&run, &checkpoint, out.as_deref()),
            }
        }
        Command::Loso { exp, out, force, folds } => {
            let run = exp.resolve()?;
            match run.precision {
                Precision::F32 => loso::<f32>(&run, &out, force, folds),
                Precision::F64 => loso::<f64>(&run, &out, force, folds),
            }
        }
        Command::VizDisplacement { exp, checkpoint, onset, apex, field, out } => match (checkpoint, field) {
            (_, Some(field)) => {
                let f = read_raw_field::<f32>(&field, 1.0)?;
                write_flow_png(&f, &out)
            }
            (Some(ckpt), None) => {
                let run = exp.resolve()?;
                let (onset, apex) = (onset.expect("required by clap"), apex.expect("required by clap"));
                viz_from_model(&run, &ckpt, &onset, &apex, &out)
            }
            (None, None) => unreachable!("clap requires --checkpoint or --field"),
        },
        Command::ShowConfig { exp } => {
            print!("{}", exp.resolve()?.experiment.to_toml());
            Ok(())
        }
        Command::ProfileFusion { exp, runs, batch, tokens } => {
            let run = exp.resolve()?;
            profile(&run.experiment, &tokens, batch, runs)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Create `dir`, refusing a non-empty existing directory unless forced.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_dir() && !force && std::fs::read_dir(dir).map_err(io_err(dir))?.next().is_some() {
        return Err(Error::Usage(format!("{} is not empty; pass --force to write into it", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("serialisable")
}

fn gen_synthetic(config: Option<&Path>, seed: Option<u64>, out: &Path, force: bool) -> Result<()> {
    let mut spec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    prepare_dir(out, force)?;
    let data = generate_synthetic_dataset::<f32>(&spec)?;
    let rows = write_synthetic_dataset(&data, out)?;
    write_text(&out.join("spec.toml"), &toml::to_string(&spec).expect("spec serialises"))?;
    println!("wrote {} samples from {} subjects to {}", rows.len(), spec.subjects, out.display());
    Ok(())
}

fn print_metrics(name: &str, m: &Metrics) {
    println!("{name}: UF1 {:.4}  UAR {:.4}  accuracy {:.4}  ({} samples)", m.uf1, m.uar, m.accuracy, m.samples);
}

fn train<T: Real>(run: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let data = load_dataset::<T>(run.dataset()?, run.experiment.model.dgm.image_channels)?;
    prepare_dir(out, force)?;
    let mut trainer = Trainer::<T>::new(run.experiment.model.clone(), run.experiment.train.clone())?;
    let all: Vec<usize> = (0..data.len()).collect();
    let logs = trainer.fit(&data, &all)?;
    for l in &logs {
        eprintln!("epoch {:>3}  cls {:.4}  dgm {:.4}  self-supervised {:.4}", l.epoch, l.cls, l.dgm, l.self_supervised);
    }
    trainer.save(&out.join("model.ckpt"))?;
    write_text(&out.join("config.toml"), &run.experiment.to_toml())?;
    write_text(&out.join("train_log.json"), &to_json(&logs))?;
    print_metrics("training set", &trainer.evaluate(&data, &all)?);
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    metrics: Metrics,
    classes: Vec<&'static str>,
    predictions: Vec<Prediction>,
}

#[derive(Serialize)]
struct Prediction {
    id: String,
    label: usize,
    predicted: usize,
    probabilities: Vec<f64>,
}

fn eval<T: Real>(run: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let data = load_dataset::<T>(run.dataset()?, run.experiment.model.dgm.image_channels)?;
    let mut trainer = Trainer::<T>::new(run.experiment.model.clone(), run.experiment.train.clone())?;
    trainer.load(checkpoint)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let results = trainer.predict(&data, &all)?;
    let preds: Vec<usize> = results.iter().map(|r| r.label).collect();
    let metrics = mexp_core::pipeline::compute_metrics(&preds, &data.labels(&all), run.experiment.model.fusion.num_classes)?;
    let report = EvalReport {
        classes: CLASS_NAMES[..run.experiment.model.fusion.num_classes].to_vec(),
        predictions: data
            .samples
            .iter()
            .zip(results)
            .map(|(s, r)| Prediction { id: s.id.clone(), label: s.label, predicted: r.label, probabilities: r.probs })
            .collect(),
        metrics,
    };
    let text = to_json(&report);
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn loso<T: Real>(run: &RunConfig, out: &Path, force: bool, folds: Option<usize>) -> Result<()> {
    let data = load_dataset::<T>(run.dataset()?, run.experiment.model.dgm.image_channels)?;
    prepare_dir(out, force)?;
    let report = run_loso(&data, &run.experiment, folds, |f| {
        print_metrics(&format!("fold {}", f.subject), &f.metrics);
    })?;
    for (domain, m) in &report.per_domain {
        print_metrics(&format!("domain {domain}"), m);
    }
    print_metrics("aggregate", &report.aggregate);
    write_text(&out.join("loso_report.json"), &report.to_json())?;
    write_text(&out.join("config.toml"), &run.experiment.to_toml())?;
    Ok(())
}

fn viz_from_model(run: &RunConfig, checkpoint: &Path, onset: &Path, apex: &Path, out: &Path) -> Result<()> {
    let mut trainer = Trainer::<f32>::new(run.experiment.model.clone(), run.experiment.train.clone())?;
    trainer.load(checkpoint)?;
    let dgm = trainer.model.dgm.as_ref().ok_or_else(|| Error::Usage("the model has no displacement network".into()))?;
    let channels = run.experiment.model.dgm.image_channels;
    let pair = FramePair::new(read_image(onset, channels)?, read_image(apex, channels)?, "input", None)?;
    let field = dgm.generate_displacement(&trainer.store, &pair)?;
    write_flow_png(&field, out)?;
    write_raw_field(&field, &out.with_extension("bin"))
}

fn profile(config: &ExperimentConfig, tokens: &[usize], batch: usize, runs: usize) -> Result<()> {
    let cfg = &config.model.fusion;
    let rows = profile_fusion(cfg, tokens, batch, runs)?;
    println!("fusion layer, C={} h={} batch={} ({} runs each)", cfg.embed_dim, cfg.heads, batch, runs);
    println!("{:>6}  {:>7}  {:>14}  {:>10}", "tokens", "variant", "MACs", "median ms");
    for r in &rows {
        let name = match r.variant {
            FusionVariant::Before => "before",
            FusionVariant::After => "after",
        };
        println!("{:>6}  {:>7}  {:>14}  {:>10.4}", r.tokens, name, r.macs, r.median_ms);
    }
    for pair in rows.chunks(2) {
        let (b, a) = (&pair[0], &pair[1]);
        println!(
            "n={:<3} before/after: MACs {:.3}, time {:.3}",
            b.tokens,
            b.macs as f64 / a.macs as f64,
            b.median_ms / a.median_ms
        );
    }
    Ok(())
}
