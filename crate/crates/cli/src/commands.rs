use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use poe_core::data::{generate, load_csv, save_csv, Dataset, DatasetSpec};
use poe_core::eval::{accuracy, mae, uncertainty_analysis, AnalysisOptions};
use poe_core::model::{train, PoeModel, TrainConfig, TrainingReport};
use serde::Serialize;

use crate::manifest::{sibling, ManifestWriter};
use crate::{Command, Split, SweepAxis, TrainArgs};

pub(crate) fn run(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Generate { config, out, seed } => {
            cmd_generate(config.as_deref(), &out, seed, argv)
        }
        Command::Train { train, out } => cmd_train(&train, &out, argv),
        Command::Eval {
            model,
            data,
            out,
            corruption,
            seed,
            split,
            example_level_tau,
        } => cmd_eval(
            &EvalArgs {
                model,
                data,
                out,
                corruption,
                seed,
                split,
                example_level_tau,
            },
            argv,
        ),
        Command::Sweep {
            train,
            axis,
            values,
            out,
        } => cmd_sweep(&train, axis, &values, &out, argv),
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn cmd_generate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    argv: Vec<String>,
) -> Result<()> {
    let mut spec: DatasetSpec = read_toml(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut manifest = ManifestWriter::start(
        sibling(out, ".manifest.json"),
        "generate",
        argv,
        &spec,
        spec.seed,
        None,
    )?;
    let result = generate(&spec)
        .and_then(|d| save_csv(&d, out))
        .map_err(anyhow::Error::from)
        .and_then(|()| manifest.record_dataset(out));
    manifest.finish(vec![out.to_path_buf()], result)
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_toml(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(h) = args.head {
        cfg.head = h;
    }
    if let Some(m) = args.metric {
        cfg.metric = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_for(cfg: &TrainConfig, path: &Path) -> Result<(Dataset, Dataset)> {
    let data = load_csv(path)?;
    if let Some(r) = data.records.iter().find(|r| r.class_index > cfg.classes) {
        bail!(
            "{}: class index {} exceeds the configured {} classes",
            path.display(),
            r.class_index,
            cfg.classes
        );
    }
    Ok(data.split_holdout(cfg.holdout_fraction)?)
}

#[derive(Serialize)]
struct TrainOutput {
    training: TrainingReport,
    train_examples: usize,
    test_examples: usize,
    test_mae: Option<f64>,
    test_accuracy: Option<f64>,
    model_checksum: String,
}

fn test_metrics(model: &PoeModel, test: &Dataset) -> Result<(Option<f64>, Option<f64>)> {
    if test.is_empty() {
        return Ok((None, None));
    }
    let preds = model.predict(&test.records)?;
    let est: Vec<f64> = preds.iter().map(|p| p.decoded.estimate).collect();
    let cls: Vec<usize> = preds.iter().map(|p| p.decoded.class).collect();
    Ok((
        Some(mae(&est, &test.targets())?),
        Some(accuracy(&cls, &test.classes())?),
    ))
}

fn fit(cfg: &TrainConfig, train_set: &Dataset, test: &Dataset) -> Result<(PoeModel, TrainOutput)> {
    let mut model = PoeModel::new(train_set.feature_dim(), cfg.clone())?;
    let training = train(&mut model, train_set)?;
    let (test_mae, test_accuracy) = test_metrics(&model, test)?;
    let out = TrainOutput {
        training,
        train_examples: train_set.len(),
        test_examples: test.len(),
        test_mae,
        test_accuracy,
        model_checksum: format!("{:08x}", model.checksum()),
    };
    Ok((model, out))
}

fn cmd_train(args: &TrainArgs, out: &Path, argv: Vec<String>) -> Result<()> {
    let cfg = resolve_train_config(args)?;
    let manifest = ManifestWriter::start(
        sibling(out, ".manifest.json"),
        "train",
        argv,
        &cfg,
        cfg.seed,
        Some(&args.data),
    )?;
    let report_path = sibling(out, ".report.json");
    let result = (|| {
        let (train_set, test) = load_for(&cfg, &args.data)?;
        let (model, report) = fit(&cfg, &train_set, &test)?;
        model.save(out)?;
        fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", report_path.display()))?;
        Ok(())
    })();
    manifest.finish(vec![out.to_path_buf(), report_path.clone()], result)
}

struct EvalArgs {
    model: PathBuf,
    data: PathBuf,
    out: PathBuf,
    corruption: Vec<f64>,
    seed: Option<u64>,
    split: Split,
    example_level_tau: bool,
}

fn cmd_eval(args: &EvalArgs, argv: Vec<String>) -> Result<()> {
    let model = PoeModel::load(&args.model)?;
    let opts = AnalysisOptions {
        corruption_levels: args.corruption.clone(),
        seed: args.seed.unwrap_or(model.config.seed),
        example_level_tau: args.example_level_tau,
        ..AnalysisOptions::default()
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    #[derive(Serialize)]
    struct EvalConfig<'a> {
        model: &'a Path,
        corruption_levels: &'a [f64],
        split: &'static str,
        example_level_tau: bool,
        bins: usize,
        violation_budget: usize,
        model_config: &'a TrainConfig,
    }
    let manifest = ManifestWriter::start(
        args.out.join("manifest.json"),
        "eval",
        argv,
        &EvalConfig {
            model: &args.model,
            corruption_levels: &opts.corruption_levels,
            split: match args.split {
                Split::Test => "test",
                Split::All => "all",
            },
            example_level_tau: opts.example_level_tau,
            bins: opts.bins,
            violation_budget: opts.violation_budget,
            model_config: &model.config,
        },
        opts.seed,
        Some(&args.data),
    )?;
    let files = ["report.json", "bins.csv", "uncertainty.csv"].map(|f| args.out.join(f));
    let result = (|| {
        let data = load_csv(&args.data)?;
        ensure!(
            data.feature_dim() == model.input_dim,
            "{} has {} features but the model expects {}",
            args.data.display(),
            data.feature_dim(),
            model.input_dim
        );
        let records = match args.split {
            Split::Test => data.split_holdout(model.config.holdout_fraction)?.1,
            Split::All => data,
        };
        let records = if records.is_empty() {
            bail!("the test split is empty (holdout_fraction is 0); use --split all")
        } else {
            records
        };
        let report = uncertainty_analysis(&model, &records, &opts)?;
        fs::write(&files[0], report.to_json()? + "\n")
            .with_context(|| format!("writing {}", files[0].display()))?;
        report.write_bins_csv(&files[1])?;
        report.write_uncertainty_csv(&files[2])?;
        Ok(())
    })();
    manifest.finish(files.to_vec(), result)
}

fn apply_axis(cfg: &mut TrainConfig, axis: SweepAxis, value: &str) -> Result<()> {
    let num = || -> Result<f64> {
        value
            .trim()
            .parse::<f64>()
            .with_context(|| format!("sweep value {value:?} is not a number"))
    };
    match axis {
        SweepAxis::Margin => cfg.margin = num()?,
        SweepAxis::Alpha => cfg.alpha = num()?,
        SweepAxis::Beta => cfg.beta = num()?,
        SweepAxis::T => {
            cfg.samples = value
                .trim()
                .parse()
                .with_context(|| format!("sample count {value:?} is not a positive integer"))?
        }
        SweepAxis::Metric => cfg.metric = value.trim().parse()?,
    }
    cfg.validate()?;
    Ok(())
}

fn cmd_sweep(
    args: &TrainArgs,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    let base = resolve_train_config(args)?;
    ensure!(
        base.holdout_fraction > 0.0,
        "sweep reports test metrics; holdout_fraction must be positive"
    );
    let cells: Vec<TrainConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            apply_axis(&mut c, axis, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let manifest = ManifestWriter::start(
        sibling(out, ".manifest.json"),
        "sweep",
        argv,
        &serde_json::json!({ "base": base, "axis": axis_name(axis), "values": values }),
        base.seed,
        Some(&args.data),
    )?;
    let result = (|| {
        let (train_set, test) = load_for(&base, &args.data)?;
        let mut table = String::from("axis,value,test_mae,test_accuracy,seconds\n");
        for (cfg, value) in cells.iter().zip(values) {
            let started = Instant::now();
            let (_, report) = fit(cfg, &train_set, &test)?;
            let secs = started.elapsed().as_secs_f64();
            writeln!(
                table,
                "{},{},{:?},{:?},{:.3}",
                axis_name(axis),
                value.trim(),
                report.test_mae.unwrap_or(f64::NAN),
                report.test_accuracy.unwrap_or(f64::NAN),
                secs
            )?;
        }
        fs::write(out, table).with_context(|| format!("writing {}", out.display()))?;
        Ok(())
    })();
    manifest.finish(vec![out.to_path_buf()], result)
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Margin => "margin",
        SweepAxis::Alpha => "alpha",
        SweepAxis::Beta => "beta",
        SweepAxis::T => "T",
        SweepAxis::Metric => "metric",
    }
}
