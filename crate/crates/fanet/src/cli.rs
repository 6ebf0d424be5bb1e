//! Command-line surface: train, eval, explain, project, gradcheck.
//!
//! Every command validates all of its inputs before touching the
//! output locations, so a bad invocation never leaves partial
//! artifacts. Results go to standard output; errors are one line on
//! the error stream, `error: <category>: <message>`.
//!
//! Exit codes: 0 success, 1 config, 2 data, 3 numerical abort,
//! 4 incompatible or corrupt checkpoint, 5 gradient check failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::parse_run_config;
use crate::data::{
    index_dataset, index_from_manifest, load_and_preprocess, manifest_rows, read_manifest,
    split_validation, write_manifest, DatasetIndex, Split,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite_with_fault, TOLERANCE};
use crate::metrics::{evaluate, pca_project, write_confusion_csv, write_metrics_csv,
    write_projection_csv, EvalReport};
use crate::model::FaNet;
use crate::train::{fit, load_checkpoint, Checkpoint};
use crate::vis::write_pgm;

#[derive(Parser)]
#[command(
    name = "fanet",
    about = "Train and inspect an attention-based image classifier",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config file.
    Train {
        /// Run configuration (flat `key = value` file).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from (optimizer state and epoch
        /// counter restored).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metric CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (one directory per class), unless --split is given.
        #[arg(long)]
        data: PathBuf,
        /// Split manifest CSV written by train; evaluates one tag of it.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Which tag of the manifest to evaluate.
        #[arg(long, default_value = "val")]
        split_tag: String,
        /// Directory for metrics.csv and confusion.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export attention maps and channel diagnostics for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory for the CSVs, heatmaps, and prediction.
        #[arg(long)]
        out: PathBuf,
    },
    /// Project pooled features of a dataset to 3-D and write a CSV.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (`x,y,z,label` rows).
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one op's measured error (test hook for the failure path).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            split_tag,
            out,
        } => cmd_eval(&checkpoint, &data, split.as_deref(), &split_tag, &out),
        Command::Explain {
            checkpoint,
            image,
            out,
        } => cmd_explain(&checkpoint, &image, &out),
        Command::Project {
            checkpoint,
            data,
            out,
        } => cmd_project(&checkpoint, &data, &out),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault.as_deref()),
    }
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<i32> {
    let cfg = parse_run_config(config_path)?;
    if !cfg.data_root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root '{}' does not exist",
            cfg.data_root.display()
        )));
    }
    let full = index_dataset(&cfg.data_root, Split::Train)?;
    let (train_idx, val_idx) = split_validation(&full, cfg.val_fraction, cfg.seed)?;
    let model_cfg = cfg.model_config(full.class_count());
    model_cfg.validate()?;

    let mut model = FaNet::new(model_cfg, cfg.seed)?;
    let trainer = match resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            check_same_architecture(&model, &ckpt.model)?;
            model = ckpt.model;
            ckpt.trainer
        }
        None => None,
    };

    // validation done; now the side effects
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rows = manifest_rows(&train_idx);
    rows.extend(manifest_rows(&val_idx));
    write_manifest(&cfg.out_dir.join("split.csv"), &rows)?;

    let outcome = fit(
        &mut model,
        &train_idx,
        &val_idx,
        &cfg.train_config(),
        trainer,
        &cfg.out_dir,
    )?;
    println!(
        "done: {} epochs, best val loss {}{}",
        outcome.epochs.last().map(|e| e.epoch).unwrap_or(0),
        outcome.best_val_loss,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    Ok(0)
}

/// Param registries must agree exactly for a resume to make sense.
fn check_same_architecture(fresh: &FaNet, loaded: &FaNet) -> Result<()> {
    if fresh.params.len() != loaded.params.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has {} parameters, config asks for {}",
            loaded.params.len(),
            fresh.params.len()
        )));
    }
    for (a, b) in fresh.params.iter().zip(&loaded.params) {
        if a.name != b.name || a.shape != b.shape {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint parameter {} {:?} does not match config {} {:?}",
                b.name, b.shape, a.name, a.shape
            )));
        }
    }
    Ok(())
}

/// Index order: paths, labels, flat probabilities (N x K), predictions.
fn predict_index(model: &FaNet, index: &DatasetIndex) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    let (h, w) = (model.config.backbone.input_h, model.config.backbone.input_w);
    let k = model.config.num_classes;
    let mut labels = Vec::with_capacity(index.len());
    let mut probs = Vec::with_capacity(index.len() * k);
    let mut preds = Vec::with_capacity(index.len());
    for chunk in index.samples.chunks(32) {
        let mut batch = Vec::with_capacity(chunk.len() * h * w * 3);
        for s in chunk {
            batch.extend_from_slice(&load_and_preprocess(&s.path, h, w)?.data);
            labels.push(s.class_id);
        }
        let pred = model.predict(&batch, &[chunk.len(), h, w, 3])?;
        preds.extend(pred.labels);
        for row in pred.probabilities {
            probs.extend(row);
        }
    }
    Ok((labels, probs, preds))
}

fn print_report(report: &EvalReport, class_names: &[String], n: usize) {
    println!("samples: {n}");
    println!("accuracy: {}", report.accuracy);
    println!("macro_precision: {}", report.macro_precision);
    println!("macro_recall: {}", report.macro_recall);
    println!("macro_f1: {}", report.macro_f1);
    match (report.auc, &report.auc_note) {
        (Some(auc), _) => println!("auc: {auc}"),
        (None, Some(note)) => println!("auc: undefined ({note})"),
        (None, None) => {}
    }
    for (c, m) in report.per_class.iter().enumerate() {
        println!(
            "class {}: precision={} recall={} f1={} support={}",
            class_names[c], m.precision, m.recall, m.f1, m.support
        );
    }
    println!("confusion (rows = true class):");
    for t in 0..report.confusion.k() {
        let counts: Vec<String> = (0..report.confusion.k())
            .map(|p| report.confusion.at(t, p).to_string())
            .collect();
        println!("{} {}", class_names[t], counts.join(" "));
    }
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: Option<&Path>,
    split_tag: &str,
    out: &Path,
) -> Result<i32> {
    let Checkpoint { model, .. } = load_checkpoint(checkpoint)?;
    let index = match split {
        Some(manifest) => {
            let rows = read_manifest(manifest)?;
            index_from_manifest(&rows, Split::parse(split_tag)?)?
        }
        None => index_dataset(data, Split::Test)?,
    };
    if index.class_count() != model.config.num_classes {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint expects {} classes, dataset has {}",
            model.config.num_classes,
            index.class_count()
        )));
    }
    if index.is_empty() {
        return Err(Error::Data("nothing to evaluate in the selected split".into()));
    }
    let (labels, probs, preds) = predict_index(&model, &index)?;
    let report = evaluate(&labels, &preds, model.config.num_classes, Some(&probs))?;

    std::fs::create_dir_all(out)?;
    write_metrics_csv(&out.join("metrics.csv"), &report, &index.class_names)?;
    write_confusion_csv(&out.join("confusion.csv"), &report.confusion, &index.class_names)?;
    print_report(&report, &index.class_names, index.len());
    Ok(0)
}

fn cmd_explain(checkpoint: &Path, image: &Path, out: &Path) -> Result<i32> {
    let Checkpoint { model, .. } = load_checkpoint(checkpoint)?;
    let (h, w) = (model.config.backbone.input_h, model.config.backbone.input_w);
    let img = load_and_preprocess(image, h, w)?;
    let diag = model.extract_attention_diagnostics(&img.data, &[h, w, 3])?;

    std::fs::create_dir_all(out)?;
    let mut cam = csv::Writer::from_path(out.join("cam.csv"))
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    cam.write_record(["channel", "weight"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for (c, v) in diag.cam_weights.iter().enumerate() {
        cam.write_record([c.to_string(), v.to_string()])
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    cam.flush()?;

    write_pgm(&out.join("sam_avg.pgm"), &diag.sam_avg_map, diag.map_h, diag.map_w)?;
    write_pgm(&out.join("sam_max.pgm"), &diag.sam_max_map, diag.map_h, diag.map_w)?;

    let mut gates = csv::Writer::from_path(out.join("gates.csv"))
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    gates
        .write_record(["channel", "gate"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for (c, v) in diag.gate_values.iter().enumerate() {
        gates
            .write_record([c.to_string(), v.to_string()])
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    gates.flush()?;

    let selected: Vec<String> = diag.selected_indices.iter().map(|i| i.to_string()).collect();
    std::fs::write(out.join("selected.txt"), selected.join("\n") + "\n")?;
    std::fs::write(
        out.join("predicted.txt"),
        format!(
            "{} {}\n",
            diag.predicted, diag.probabilities[diag.predicted]
        ),
    )?;
    println!(
        "predicted class {} (p = {})",
        diag.predicted, diag.probabilities[diag.predicted]
    );
    Ok(0)
}

fn cmd_project(checkpoint: &Path, data: &Path, out: &Path) -> Result<i32> {
    let Checkpoint { model, .. } = load_checkpoint(checkpoint)?;
    let index = index_dataset(data, Split::Test)?;
    if index.len() < 4 {
        return Err(Error::Data(format!(
            "projection needs at least 4 samples, found {}",
            index.len()
        )));
    }
    let (h, w) = (model.config.backbone.input_h, model.config.backbone.input_w);
    let mut features: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut labels = Vec::with_capacity(index.len());
    for chunk in index.samples.chunks(32) {
        let mut batch = Vec::with_capacity(chunk.len() * h * w * 3);
        for s in chunk {
            batch.extend_from_slice(&load_and_preprocess(&s.path, h, w)?.data);
            labels.push(s.class_id);
        }
        for row in model.extract_gap_features(&batch, &[chunk.len(), h, w, 3])? {
            dim = row.len();
            features.extend(row);
        }
    }
    let pca = pca_project(&features, index.len(), dim, 3)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_projection_csv(out, &pca.projection, &labels, &index.class_names)?;
    println!(
        "wrote {} rows to {} (explained variance: {})",
        index.len(),
        out.display(),
        pca.explained_variance
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(0)
}

fn cmd_gradcheck(seed: u64, inject_fault: Option<&str>) -> Result<i32> {
    let checks = run_suite_with_fault(seed, inject_fault)?;
    let mut failing = Vec::new();
    for c in &checks {
        let status = if c.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<22} max_rel_err {:.3e}  ({} slots)  {status}",
            c.name, c.max_rel_err, c.instances
        );
        if !c.passed() {
            failing.push(c.name);
        }
    }
    if failing.is_empty() {
        println!("all {} ops within {:e}", checks.len(), TOLERANCE);
        Ok(0)
    } else {
        eprintln!("error: gradcheck: ops exceeding {:e}: {}", TOLERANCE, failing.join(", "));
        Ok(5)
    }
}
