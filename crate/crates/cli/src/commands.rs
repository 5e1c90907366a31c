use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blf_core::alignment::Modality;
use blf_core::checkpoint::{Checkpoint, RunConfig};
use blf_core::data::{make_synthetic, Dataset, Split, SyntheticSpec};
use blf_core::metrics::MetricsReport;
use blf_core::trainer::{predict, score, split_indices, train_with, write_log_csv, StopReason, TrainConfig};
use blf_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{overrides, EvalArgs, ReportArgs, SynthArgs, TrainArgs, UsageError};

pub const CHECKPOINT_FILE: &str = "checkpoint.blfc";

fn require_file(path: &Path, what: &str) -> Result<(), UsageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Defaults, then the optional JSON file, then `--set` pairs, then `patch`.
fn layered_config<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    what: &str,
    pairs: &[String],
    patch: impl FnOnce(&mut Value),
) -> Result<T, UsageError> {
    let base: T = match file {
        Some(path) => {
            require_file(path, what)?;
            let text = fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
        }
        None => T::default(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    overrides::apply(&mut value, pairs)?;
    patch(&mut value);
    serde_json::from_value(value).map_err(|e| UsageError(format!("{what}: {e}")))
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = layered_config(args.spec.as_deref(), "spec file", &args.overrides, |v| {
        if let Some(seed) = args.seed {
            v["seed"] = json!(seed);
        }
    })?;
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let manifest = make_synthetic(&spec, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(dir.join("metrics.txt"), format!("{report}\n"))?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.serialize(report)?;
    w.flush()?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let config: TrainConfig = layered_config(args.config.as_deref(), "config file", &args.overrides, |v| {
        if let Some(s) = args.strategy {
            v["strategy"] = json!(s);
        }
        if let Some(l) = args.lambda {
            v["lambda_entropy"] = json!(l);
        }
        if let Some(seed) = args.seed {
            v["seed"] = json!(seed);
        }
    })?;
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    let dataset = Dataset::load(&args.manifest)?;

    let run = train_with(&dataset, &config, |e| {
        let attn = match (e.mean_entropy, e.alpha_dna, e.alpha_rna, e.alpha_protein) {
            (Some(h), Some(d), Some(r), Some(p)) => format!(" H={h:.4} alpha=[{d:.3} {r:.3} {p:.3}]"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>4} loss {:.6} val {:.6} lr {:.3e}{attn}",
            e.epoch, e.train_loss, e.val_metric, e.lr
        );
    })?;
    eprintln!("{}", run.stop);

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_log_csv(args.out.join("log.csv"), &run.log)?;
    let ckpt = run.best_checkpoint().context("no epoch completed")?;
    ckpt.write(args.out.join(CHECKPOINT_FILE))?;
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&ckpt.config)? + "\n",
    )?;
    println!("best epoch {} val {:.6}", ckpt.epoch, ckpt.metric);

    if let StopReason::NonFiniteGradient { .. } = run.stop {
        bail!("{}", run.stop);
    }

    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        println!("no test samples; skipping test metrics");
        return Ok(());
    }
    let (model, store) = ckpt.restore()?;
    let outputs = predict(&model, &store, &dataset, &test, config.batch_size)?;
    let report = score(&dataset, &outputs, "test")?;
    write_report(&args.out, &report)?;
    println!("{report}");
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file: PathBuf = if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    require_file(&file, "checkpoint")?;
    Ok(Checkpoint::read(&file)?)
}

/// Rejects datasets whose embedding widths or label layout differ from the checkpoint's.
fn check_compatible(config: &RunConfig, dataset: &Dataset) -> Result<()> {
    for m in Modality::ALL {
        let (want, got) = (config.model.dims.get(m), dataset.dims.get(m));
        if want != got {
            return Err(Error::DimMismatch {
                what: format!("{m} embedding dim"),
                checkpoint: want,
                data: got,
            }
            .into());
        }
    }
    if config.model.task != dataset.task || config.model.outputs != dataset.outputs() {
        return Err(Error::DimMismatch {
            what: format!("output width ({:?} vs {:?})", config.model.task, dataset.task),
            checkpoint: config.model.outputs,
            data: dataset.outputs(),
        }
        .into());
    }
    Ok(())
}

/// Sample indices of `split` as seen during training.
fn split_of(dataset: &Dataset, config: &TrainConfig, split: Split) -> Result<Vec<usize>> {
    let idx = match split {
        Split::Test => dataset.indices(Split::Test),
        Split::Train => split_indices(dataset, config)?.0,
        Split::Val => split_indices(dataset, config)?.1,
    };
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.to_string()).into());
    }
    Ok(idx)
}

fn load_pair(checkpoint: &Path, manifest: &Path) -> Result<(Checkpoint, Dataset)> {
    require_file(manifest, "manifest")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(manifest)?;
    check_compatible(&ckpt.config, &dataset)?;
    Ok((ckpt, dataset))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (ckpt, dataset) = load_pair(&args.checkpoint, &args.manifest)?;
    let idx = split_of(&dataset, &ckpt.config.train, args.split)?;
    let (model, store) = ckpt.restore()?;
    let outputs = predict(&model, &store, &dataset, &idx, ckpt.config.train.batch_size)?;
    let report = score(&dataset, &outputs, args.split.as_str())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_report(dir, &report)?;
    }
    println!("{report}");
    Ok(())
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn attn_report(args: ReportArgs) -> Result<()> {
    let (ckpt, dataset) = load_pair(&args.checkpoint, &args.manifest)?;
    let strategy = ckpt.config.model.strategy;
    if !strategy.has_attention() {
        return Err(Error::NoAttention(strategy.to_string()).into());
    }
    let idx = split_of(&dataset, &ckpt.config.train, args.split)?;
    let (model, store) = ckpt.restore()?;
    let outputs = predict(&model, &store, &dataset, &idx, ckpt.config.train.batch_size)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = csv::Writer::from_path(args.out.join("attention.csv"))?;
    w.write_record(["id", "label", "alpha_dna", "alpha_rna", "alpha_protein", "entropy"])?;
    let mut rows = Vec::with_capacity(outputs.len());
    for o in &outputs {
        let alpha = o.alpha_mean().expect("attention strategy");
        let entropy = o.entropy.expect("attention strategy");
        let s = &dataset.samples[o.index];
        w.write_record([
            s.id.clone(),
            s.label.to_string(),
            alpha[0].to_string(),
            alpha[1].to_string(),
            alpha[2].to_string(),
            entropy.to_string(),
        ])?;
        rows.push((alpha, entropy));
    }
    w.flush()?;

    let stats: Vec<(f64, f64)> = (0..3).map(|m| mean_std(rows.iter().map(move |r| r.0[m]))).collect();
    let (mean_entropy, _) = mean_std(rows.iter().map(|r| r.1));
    let top = Modality::ALL
        .into_iter()
        .max_by(|a, b| stats[a.index()].0.total_cmp(&stats[b.index()].0))
        .expect("three modalities");
    let summary = json!({
        "strategy": strategy,
        "split": args.split,
        "count": rows.len(),
        "alpha_mean": {"dna": stats[0].0, "rna": stats[1].0, "protein": stats[2].0},
        "alpha_std": {"dna": stats[0].1, "rna": stats[1].1, "protein": stats[2].1},
        "mean_entropy": mean_entropy,
        "dominant": top.as_str(),
    });
    fs::write(
        args.out.join("attention_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let mut text = format!("{strategy} {} n={}\n", args.split, rows.len());
    for m in Modality::ALL {
        let (mean, std) = stats[m.index()];
        text += &format!("alpha_{:<8} mean {mean:.6} std {std:.6}\n", m.as_str());
    }
    text += &format!("mean entropy {mean_entropy:.6} (uniform {:.6})\n", 3f64.ln());
    text += &format!("dominant modality {top}\n");
    fs::write(args.out.join("attention_summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}
