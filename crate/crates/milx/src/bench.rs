//! `milx bench`: faithfulness and localization benchmark.
//!
//! Series are attribution methods plus two references: `random` (uniform
//! noise maps) and `ground_truth` (the generator's motif masks).
//!
//! ```text
//! <out>/curves/<series>.<insertion|deletion>.tsv   mean curve over bags
//! <out>/plots/<series>.<insertion|deletion>.png
//! <out>/localization.tsv
//! <out>/roar.json, roar.tsv, plots/roar.png
//! <out>/summary.tsv                                  one row per series and metric
//! <out>/failures.tsv                                 only when something failed
//! <cache>/<series>/<bag_id>.json                     per-bag curves and scores
//! ```
//!
//! The cache defaults to `<out>/cache`. With `paths.cache` set, entries whose
//! key (checkpoint, series config, curve config) matches are reused.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use milx_core::attributions::{explain, Method, MethodConfig};
use milx_core::bagdata::{Bag, SplitTag};
use milx_core::evalbench::{
    bag_curves, ground_truth_maps, localization_score, mean_std, random_maps, trapezoid, BagCurves, CurveMode,
    LocalizationReport, RoarPlan, RoarReport, RANDOM_SERIES,
};
use milx_core::milnet::MilModel;
use milx_core::trainer::TrainConfig;
use milx_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::config::Metric;
use crate::context::{calibrated_configs, create_dir, select, Context};
use crate::dataset_io::{write_json, write_png, DatasetDir};
use crate::digest::{of_json, Provenance};
use crate::error::{Error, Result};
use crate::outdir::Staged;
use crate::render::{self, Line};

pub const GROUND_TRUTH_SERIES: &str = "ground_truth";

#[derive(Debug, Clone)]
pub enum Series {
    Method(MethodConfig),
    Random(u64),
    GroundTruth,
}

impl Series {
    pub fn name(&self) -> &'static str {
        match self {
            Series::Method(c) => c.method().as_str(),
            Series::Random(_) => RANDOM_SERIES,
            Series::GroundTruth => GROUND_TRUTH_SERIES,
        }
    }

    pub fn maps(&self, model: &MilModel, bag: &Bag) -> milx_core::Result<Vec<Tensor>> {
        match self {
            Series::Method(c) => Ok(explain(model, bag, bag.label, c.method(), c)?.maps),
            Series::Random(seed) => Ok(random_maps(bag, *seed)),
            Series::GroundTruth => Ok(ground_truth_maps(bag)),
        }
    }

    fn describe(&self) -> serde_json::Value {
        match self {
            Series::Method(c) => serde_json::to_value(c.for_metadata()).expect("configs serialize"),
            Series::Random(seed) => json!({ "random_seed": seed }),
            Series::GroundTruth => json!(GROUND_TRUTH_SERIES),
        }
    }
}

/// Per-bag cache entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub provenance: Provenance,
    pub series: String,
    pub bag_id: String,
    pub curves: Option<BagCurves>,
    pub localization: Option<LocalizationReport>,
}

fn cache_path(cache: &Path, series: &str, bag_id: &str) -> PathBuf {
    cache.join(series).join(format!("{bag_id}.json"))
}

pub fn read_cache(cache: &Path, series: &str, bag_id: &str) -> Option<CacheEntry> {
    let text = std::fs::read_to_string(cache_path(cache, series, bag_id)).ok()?;
    serde_json::from_str(&text).ok()
}

fn want(metrics: &[Metric], m: Metric) -> bool {
    metrics.contains(&m)
}

/// Resolves the series names of `[bench] methods`.
pub fn parse_series(ctx: &Context, names: &[String]) -> Result<Vec<Series>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            RANDOM_SERIES => Ok(Series::Random(ctx.config.bench.roar.random_seed)),
            GROUND_TRUTH_SERIES => Ok(Series::GroundTruth),
            other => {
                let m: Method = other.parse().map_err(Error::from)?;
                Ok(Series::Method(ctx.config.methods.config_for(m)))
            }
        })
        .collect()
}

fn calibrate(ctx: &Context, model: &MilModel, data: &DatasetDir, series: Vec<Series>) -> Result<Vec<Series>> {
    let methods: Vec<Method> = series.iter().filter_map(|s| if let Series::Method(c) = s { Some(c.method()) } else { None }).collect();
    let mut calibrated: HashMap<Method, MethodConfig> = calibrated_configs(ctx, model, data, &methods)?.into_iter().collect();
    Ok(series
        .into_iter()
        .map(|s| match s {
            Series::Method(c) => Series::Method(calibrated.remove(&c.method()).unwrap_or(c)),
            other => other,
        })
        .collect())
}

pub struct Failure {
    pub series: String,
    pub item: String,
    pub error: String,
}

/// Curves and localization of one series over `bags`, reusing cache entries.
fn evaluate_series(
    model: &MilModel,
    bags: &[Bag],
    series: &Series,
    metrics: &[Metric],
    ctx: &Context,
    key: &str,
    provenance: &Provenance,
    cache: &Path,
) -> Vec<std::result::Result<CacheEntry, Failure>> {
    let need_curves = want(metrics, Metric::Insertion) || want(metrics, Metric::Deletion);
    let need_loc = want(metrics, Metric::Localization);
    bags.par_iter()
        .map(|bag| {
            if let Some(e) = read_cache(cache, series.name(), &bag.bag_id) {
                if e.key == key && (!need_curves || e.curves.is_some()) && (!need_loc || e.localization.is_some()) {
                    return Ok(e);
                }
            }
            let fail = |e: milx_core::Error| Failure { series: series.name().into(), item: bag.bag_id.clone(), error: e.to_string() };
            let maps = series.maps(model, bag).map_err(fail)?;
            let curves = if need_curves { Some(bag_curves(model, bag, &maps, &ctx.config.bench.curve).map_err(fail)?) } else { None };
            let localization = if need_loc { Some(localization_score(&maps, bag).map_err(fail)?) } else { None };
            let entry = CacheEntry {
                key: key.into(),
                provenance: provenance.clone(),
                series: series.name().into(),
                bag_id: bag.bag_id.clone(),
                curves,
                localization,
            };
            let path = cache_path(cache, series.name(), &bag.bag_id);
            let written = path.parent().map_or(Ok(()), create_dir).and_then(|_| write_json(&path, &entry));
            written.map_err(|e| Failure { series: series.name().into(), item: bag.bag_id.clone(), error: e.to_string() })?;
            Ok(entry)
        })
        .collect()
}

fn provenance_header(p: &Provenance) -> String {
    format!("# config_digest\t{}\n# checkpoint_digest\t{}\n", p.config_digest, p.checkpoint_digest)
}

/// Mean curve table: `fraction mean std bags`.
pub fn curve_table(curves: &[&BagCurves], mode: CurveMode, p: &Provenance) -> String {
    let mut out = provenance_header(p);
    out.push_str("fraction\tmean\tstd\tbags\n");
    let pick = |c: &BagCurves| match mode {
        CurveMode::Insertion => c.insertion.points.clone(),
        CurveMode::Deletion => c.deletion.points.clone(),
    };
    let all: Vec<Vec<(f64, f64)>> = curves.iter().map(|c| pick(c)).collect();
    if let Some(first) = all.first() {
        for (i, &(x, _)) in first.iter().enumerate() {
            let ys: Vec<f64> = all.iter().map(|pts| pts[i].1).collect();
            let (m, s) = mean_std(&ys).expect("non-empty");
            writeln!(out, "{x}\t{m}\t{s}\t{}", ys.len()).unwrap();
        }
    }
    out
}

pub fn mean_curve(curves: &[&BagCurves], mode: CurveMode) -> Vec<(f64, f64)> {
    let all: Vec<&Vec<(f64, f64)>> = curves
        .iter()
        .map(|c| match mode {
            CurveMode::Insertion => &c.insertion.points,
            CurveMode::Deletion => &c.deletion.points,
        })
        .collect();
    let Some(first) = all.first() else { return Vec::new() };
    (0..first.len()).map(|i| (first[i].0, all.iter().map(|p| p[i].1).sum::<f64>() / all.len() as f64)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_plot(path: &Path, lines: &[Line], x: (f64, f64), y: (f64, f64), p: &Provenance) -> Result<()> {
    let buf = render::line_plot(lines, x, y)?;
    write_png(path, render::PLOT_SIZE.0 as usize, render::PLOT_SIZE.1 as usize, png::ColorType::Rgb, &buf, p)
}

pub struct SummaryRow {
    pub series: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summary_table(rows: &[SummaryRow], p: &Provenance) -> String {
    let mut out = provenance_header(p);
    out.push_str("series\tmetric\tmean\tstd\tcount\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.series, r.metric, r.mean, r.std, r.count).unwrap();
    }
    out
}

/// Parses `summary.tsv` back into rows (comment lines skipped).
pub fn parse_summary(text: &str) -> Vec<SummaryRow> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() == 5).then(|| SummaryRow {
                series: f[0].into(),
                metric: f[1].into(),
                mean: f[2].parse().unwrap_or(f64::NAN),
                std: f[3].parse().unwrap_or(f64::NAN),
                count: f[4].parse().unwrap_or(0),
            })
        })
        .collect()
}

/// Trapezoid AUC recomputed from a cached curve.
pub fn recompute_auc(entry: &CacheEntry, mode: CurveMode) -> Option<f64> {
    let c = entry.curves.as_ref()?;
    Some(trapezoid(match mode {
        CurveMode::Insertion => &c.insertion.points,
        CurveMode::Deletion => &c.deletion.points,
    }))
}

fn roar_tables(report: &RoarReport, percentages: &[f64], p: &Provenance) -> (String, Vec<SummaryRow>, Vec<Line>) {
    let mut tsv = provenance_header(p);
    tsv.push_str("series\tpercentage\tmean\tstd\tseeds\terrors\n");
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let base = report.baseline_accuracy();
    let base_errors = report.baseline.iter().filter(|c| c.error.is_some()).count();
    if let Some((m, s)) = base {
        writeln!(tsv, "baseline\t0\t{m}\t{s}\t{}\t{base_errors}", report.baseline.len() - base_errors).unwrap();
        rows.push(SummaryRow { series: "baseline".into(), metric: "roar@0".into(), mean: m, std: s, count: report.baseline.len() - base_errors });
    }
    for (i, series) in report.series.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = base.map(|(m, _)| vec![(0.0, m)]).unwrap_or_default();
        for &pc in percentages {
            let cells: Vec<_> = series.cells.iter().filter(|c| c.percentage == pc).collect();
            let ok = cells.iter().filter(|c| c.accuracy.is_some()).count();
            let errors = cells.len() - ok;
            match series.accuracy_at(pc) {
                Some((m, s)) => {
                    writeln!(tsv, "{}\t{pc}\t{m}\t{s}\t{ok}\t{errors}", series.name).unwrap();
                    rows.push(SummaryRow { series: series.name.clone(), metric: format!("roar@{pc}"), mean: m, std: s, count: ok });
                    pts.push((pc, m));
                }
                None => writeln!(tsv, "{}\t{pc}\t\t\t0\t{errors}", series.name).unwrap(),
            }
        }
        lines.push(Line { points: pts, color_index: i });
    }
    (tsv, rows, lines)
}

fn run_roar(
    ctx: &Context,
    model: &MilModel,
    data: &DatasetDir,
    series: &[Series],
    failures: &mut Vec<Failure>,
) -> Result<RoarReport> {
    let train = data.split(SplitTag::Train);
    let val = data.split(SplitTag::Val);
    let test = data.split(SplitTag::Test);
    let every: Vec<&Bag> = train.bags.iter().chain(&val.bags).chain(&test.bags).collect();
    let mut providers_maps = Vec::new();
    for s in series.iter().filter(|s| !matches!(s, Series::Random(_))) {
        let maps: Vec<milx_core::Result<Vec<Tensor>>> = every.par_iter().map(|b| s.maps(model, b)).collect();
        let mut by_id = HashMap::new();
        for (b, m) in every.iter().zip(maps) {
            match m {
                Ok(m) => {
                    by_id.insert(b.bag_id.clone(), m);
                }
                Err(e) => return Err(Error::Runtime(format!("roar: {} maps for {} failed: {e}", s.name(), b.bag_id))),
            }
        }
        providers_maps.push((s.name().to_string(), by_id));
    }
    let mut closures: Vec<(String, Box<dyn FnMut(&Bag) -> milx_core::Result<Vec<Tensor>> + '_>)> = providers_maps
        .iter()
        .map(|(name, by_id)| {
            let f: Box<dyn FnMut(&Bag) -> milx_core::Result<Vec<Tensor>>> =
                Box::new(move |b: &Bag| by_id.get(&b.bag_id).cloned().ok_or_else(|| milx_core::Error::Data(format!("no maps for {}", b.bag_id))));
            (name.clone(), f)
        })
        .collect();
    let providers = closures.iter_mut().map(|(n, f)| (n.clone(), f.as_mut() as &mut dyn FnMut(&Bag) -> milx_core::Result<Vec<Tensor>>)).collect();
    let bench = &ctx.config.bench;
    let train_cfg = TrainConfig { max_epochs: bench.roar_max_epochs.unwrap_or(ctx.config.train.max_epochs), ..ctx.config.train.clone() };
    let plan = RoarPlan::new(&train, &val, &test, providers, ctx.config.model.clone(), train_cfg, bench.roar.clone())?;
    let results: Vec<_> = plan.cells().into_par_iter().map(|c| (c, plan.run_cell(c))).collect();
    let report = plan.assemble(results);
    for s in &report.series {
        for c in &s.cells {
            if let Some(e) = &c.error {
                failures.push(Failure { series: s.name.clone(), item: format!("roar p={} seed={}", c.percentage, c.seed), error: e.clone() });
            }
        }
    }
    for c in &report.baseline {
        if let Some(e) = &c.error {
            failures.push(Failure { series: "baseline".into(), item: format!("roar seed={}", c.seed), error: e.clone() });
        }
    }
    Ok(report)
}

pub fn run(ctx: &Context) -> Result<PathBuf> {
    let bench = &ctx.config.bench;
    if bench.metrics.is_empty() || bench.methods.is_empty() {
        return Err(Error::Config("`[bench]` needs at least one method and one metric".into()));
    }
    let data = ctx.dataset()?;
    if want(&bench.metrics, Metric::Roar) && data.split(SplitTag::Train).is_empty() {
        return Err(Error::Config("metric `roar` requires a dataset with a train split".into()));
    }
    let ckpt = checkpoint::load(&ctx.checkpoint_path()?)?;
    checkpoint::check_architecture(&ckpt, &ctx.config.model)?;
    let series = parse_series(ctx, &bench.methods)?;
    let bags = select(&data, &bench.selection())?;
    let stage = Staged::begin(&ctx.out_dir("bench")?, ctx.options.force)?;
    let out = stage.path();
    let cache = match &ctx.config.paths.cache {
        Some(c) => ctx.loaded.resolve(c),
        None => out.join("cache"),
    };
    create_dir(&cache)?;
    let provenance = ctx.provenance(&ckpt.digest);
    let series = calibrate(ctx, &ckpt.model, &data, series)?;
    let model = &ckpt.model;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let per_bag = [Metric::Insertion, Metric::Deletion, Metric::Localization].iter().any(|m| want(&bench.metrics, *m));
    let mut loc_tsv = provenance_header(&provenance);
    loc_tsv.push_str("series\thit_rate\tinstances\tskipped\tmean_mass_fraction\n");
    if per_bag {
        create_dir(&out.join("curves"))?;
        create_dir(&out.join("plots"))?;
    }
    for (si, s) in series.iter().enumerate().filter(|_| per_bag) {
        let key = of_json(&json!({
            "checkpoint": ckpt.digest,
            "series": s.describe(),
            "curve": bench.curve,
        }));
        let entries: Vec<CacheEntry> = evaluate_series(model, &bags, s, &bench.metrics, ctx, &key, &provenance, &cache)
            .into_iter()
            .filter_map(|r| r.map_err(|f| failures.push(f)).ok())
            .collect();
        for mode in [CurveMode::Insertion, CurveMode::Deletion] {
            let metric = if mode == CurveMode::Insertion { Metric::Insertion } else { Metric::Deletion };
            if !want(&bench.metrics, metric) {
                continue;
            }
            let curves: Vec<&BagCurves> = entries.iter().filter_map(|e| e.curves.as_ref()).collect();
            let name = format!("{}.{}", s.name(), mode.as_str());
            write_text(&out.join("curves").join(format!("{name}.tsv")), &curve_table(&curves, mode, &provenance))?;
            let line = Line { points: mean_curve(&curves, mode), color_index: si };
            write_plot(&out.join("plots").join(format!("{name}.png")), &[line], (0.0, 1.0), (0.0, 1.0), &provenance)?;
            let aucs: Vec<f64> = entries.iter().filter_map(|e| recompute_auc(e, mode)).collect();
            if let Some((mean, std)) = mean_std(&aucs) {
                rows.push(SummaryRow { series: s.name().into(), metric: mode.as_str().into(), mean, std, count: aucs.len() });
            }
        }
        if want(&bench.metrics, Metric::Localization) {
            let mut report = LocalizationReport::default();
            for e in &entries {
                if let Some(l) = &e.localization {
                    report.merge(l.clone());
                }
            }
            let fractions: Vec<f64> = report.scores.iter().filter_map(|s| s.mass_fraction).collect();
            let mass = mean_std(&fractions).map_or(String::new(), |(m, _)| m.to_string());
            let hit = report.hit_rate();
            writeln!(
                loc_tsv,
                "{}\t{}\t{}\t{}\t{mass}",
                s.name(),
                hit.map_or(String::new(), |h| h.to_string()),
                report.scores.len(),
                report.skipped
            )
            .unwrap();
            if let Some(h) = hit {
                rows.push(SummaryRow { series: s.name().into(), metric: "pointing".into(), mean: h, std: 0.0, count: report.scores.len() });
            }
        }
    }
    if want(&bench.metrics, Metric::Localization) {
        write_text(&out.join("localization.tsv"), &loc_tsv)?;
    }
    if want(&bench.metrics, Metric::Roar) {
        let report = run_roar(ctx, model, &data, &series, &mut failures)?;
        write_json(&out.join("roar.json"), &json!({ "provenance": provenance, "report": report }))?;
        let (tsv, roar_rows, lines) = roar_tables(&report, &bench.roar.percentages, &provenance);
        write_text(&out.join("roar.tsv"), &tsv)?;
        create_dir(&out.join("plots"))?;
        write_plot(&out.join("plots").join("roar.png"), &lines, (0.0, 100.0), (0.0, 1.0), &provenance)?;
        rows.extend(roar_rows);
    }
    write_text(&out.join("summary.tsv"), &summary_table(&rows, &provenance))?;
    if !failures.is_empty() {
        let mut t = String::from("series\titem\terror\n");
        for f in &failures {
            eprintln!("bench: {} failed on {}: {}", f.series, f.item, f.error);
            writeln!(t, "{}\t{}\t{}", f.series, f.item, f.error.replace(['\t', '\n'], " ")).unwrap();
        }
        write_text(&out.join("failures.tsv"), &t)?;
    }
    let target = stage.commit()?;
    println!("bench results in {} ({} summary rows, {} failures)", target.display(), rows.len(), failures.len());
    Ok(target)
}
