//! `milx train`: one or more independent training runs.
//!
//! ```text
//! <out>/run-<r>/model.safetensors   checkpoint (best validation loss)
//! <out>/run-<r>/log.jsonl           header, one line per epoch, result
//! <out>/run-<r>/metrics.json        test-split metrics
//! <out>/run-<r>/confusion.png
//! <out>/summary.tsv                 mean and std per metric over runs
//! ```
//!
//! Run `r` uses seed `train.rng_seed + r` for both initialisation and the
//! epoch order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use milx_core::bagdata::SplitTag;
use milx_core::metrics::MetricsReport;
use milx_core::milnet::MilModel;
use milx_core::trainer::{evaluate, mean_loss, train_with, TrainConfig, TrainingLog};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::context::{create_dir, Context};
use crate::dataset_io::{write_json, write_png, DatasetDir};
use crate::digest::Provenance;
use crate::error::{Error, Result};
use crate::outdir::Staged;
use crate::render;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub provenance: Provenance,
    pub run: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub metrics: MetricsReport,
}

impl RunMetrics {
    /// Scalar metrics that enter the summary, in table order.
    pub fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.metrics.accuracy)),
            ("macro_f1", Some(self.metrics.macro_f1)),
            ("auroc", self.metrics.auroc),
            ("best_val_loss", Some(self.best_val_loss)),
            ("best_epoch", Some(self.best_epoch as f64)),
        ]
    }
}

fn now() -> Option<f64> {
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs_f64())
}

struct Outcome {
    model: MilModel,
    log: TrainingLog,
    lines: Vec<serde_json::Value>,
    metrics: MetricsReport,
}

fn one_run(data: &DatasetDir, ctx: &Context, cfg: &TrainConfig) -> Result<Outcome> {
    let train = data.split(SplitTag::Train);
    let val = data.split(SplitTag::Val);
    let test = data.split(SplitTag::Test);
    if val.is_empty() || test.is_empty() {
        return Err(Error::Data("training needs non-empty val and test splits".into()));
    }
    let model = MilModel::new(ctx.config.model.clone(), cfg.rng_seed)?;
    let mut lines = Vec::new();
    let stamps = ctx.options.timestamps;
    let (model, log) = train_with(model, &train, cfg, |m, _| mean_loss(m, &val), |r| {
        lines.push(json!({
            "kind": "epoch",
            "epoch": r.epoch,
            "train_loss": r.train_loss,
            "val_loss": r.val_loss,
            "timestamp": if stamps { now() } else { None },
        }));
    })?;
    let metrics = evaluate(&model, &test)?;
    Ok(Outcome { model, log, lines, metrics })
}

fn write_run(dir: &Path, ctx: &Context, run: usize, seed: u64, o: &Outcome) -> Result<RunMetrics> {
    create_dir(dir)?;
    let digest = checkpoint::save(&dir.join("model.safetensors"), &o.model, &o.log, &ctx.config_digest)?;
    let provenance = ctx.provenance(&digest);

    let mut log = String::new();
    let header = json!({ "kind": "header", "run": run, "seed": seed, "provenance": provenance });
    let result = json!({
        "kind": "result",
        "best_epoch": o.log.best_epoch,
        "best_val_loss": o.log.best_val_loss,
        "stopped_early": o.log.stopped_early,
    });
    for line in std::iter::once(&header).chain(&o.lines).chain(std::iter::once(&result)) {
        writeln!(log, "{line}").expect("writing to a String");
    }
    let path = dir.join("log.jsonl");
    std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;

    let metrics = RunMetrics {
        provenance: provenance.clone(),
        run,
        seed,
        epochs_run: o.log.epochs.len(),
        best_epoch: o.log.best_epoch,
        best_val_loss: o.log.best_val_loss,
        stopped_early: o.log.stopped_early,
        metrics: o.metrics.clone(),
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    let (img, side) = render::confusion_image(&o.metrics.confusion_matrix, 48);
    write_png(&dir.join("confusion.png"), side, side, png::ColorType::Rgb, &img, &provenance)?;
    Ok(metrics)
}

/// Mean and population std per metric; a metric is left out when any run
/// lacks it.
pub fn summary_table(runs: &[RunMetrics], config_digest: &str) -> String {
    let mut out = String::new();
    writeln!(out, "# config_digest\t{config_digest}").unwrap();
    let digests: Vec<&str> = runs.iter().map(|r| r.provenance.checkpoint_digest.as_str()).collect();
    writeln!(out, "# checkpoint_digests\t{}", digests.join(",")).unwrap();
    writeln!(out, "metric\tmean\tstd\truns").unwrap();
    let names: Vec<&str> = runs[0].scalars().iter().map(|(n, _)| *n).collect();
    for (i, name) in names.iter().enumerate() {
        let values: Option<Vec<f64>> = runs.iter().map(|r| r.scalars()[i].1).collect();
        if let Some((mean, std)) = values.as_deref().and_then(milx_core::evalbench::mean_std) {
            writeln!(out, "{name}\t{mean}\t{std}\t{}", runs.len()).unwrap();
        }
    }
    out
}

pub fn run(ctx: &Context) -> Result<PathBuf> {
    let data = ctx.dataset()?;
    if data.split(SplitTag::Train).is_empty() {
        return Err(Error::Data("the dataset has no train split".into()));
    }
    let stage = Staged::begin(&ctx.out_dir("train")?, ctx.options.force)?;
    let base = &ctx.config.train;
    let outcomes: Vec<(u64, Result<Outcome>)> = (0..ctx.config.runs)
        .into_par_iter()
        .map(|r| {
            let seed = base.rng_seed + r as u64;
            (seed, one_run(&data, ctx, &TrainConfig { rng_seed: seed, ..base.clone() }))
        })
        .collect();
    let mut runs = Vec::new();
    for (r, (seed, outcome)) in outcomes.into_iter().enumerate() {
        let o = outcome?;
        let m = write_run(&stage.path().join(format!("run-{r}")), ctx, r, seed, &o)?;
        println!(
            "run {r}: seed {seed}, {} epochs (best {}), test accuracy {:.4}, macro F1 {:.4}",
            m.epochs_run, m.best_epoch, m.metrics.accuracy, m.metrics.macro_f1
        );
        runs.push(m);
    }
    let path = stage.path().join("summary.tsv");
    std::fs::write(&path, summary_table(&runs, &ctx.config_digest)).map_err(|e| Error::io(&path, e))?;
    stage.commit()
}
