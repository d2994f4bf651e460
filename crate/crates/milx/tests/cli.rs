//! End-to-end checks of the four commands on a tiny model.

use std::path::{Path, PathBuf};

use milx::bench::{parse_summary, CacheEntry};
use milx::context::{Context, Options};
use milx::dataset_io::{read_dataset, read_png};
use milx::Error;
use milx_core::attributions::{AttributionResult, GradcamConfig, Method, MethodConfig};
use milx_core::bagdata::SplitTag;
use milx_core::Tensor;

const TINY: &str = r#"schema_version = 1
rng_seed = 3

[paths]
dataset = "data"
out = "out"

[synth]
num_bags = 18
bag_size = 3
image_size = 8

[split]
ratios = [0.5, 0.25, 0.25]

[model]
image_size = 8
backbone_channels = [3, 4]
backbone_pool = [true, false]
head_channels = [4, 3]
embed_dim = 5
attention_dim = 4
classifier_hidden = 6

[train]
max_epochs = 2

[methods.iba]
layer = "backbone.conv2"
steps = 3

[explain]
limit = 2
methods = ["gradcam", "lrp", "iba"]

[bench]
limit = 3
methods = ["gradcam"]
metrics = ["insertion"]

[bench.curve]
steps = 4
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    fn milx(&self, args: &[&str]) -> i32 {
        let cfg = self.config();
        let mut full = vec!["milx"];
        full.extend_from_slice(args);
        full.extend_from_slice(&["--config", cfg.to_str().unwrap()]);
        milx::cli::main_with(full)
    }

    fn context(&self) -> Context {
        Context::new(Options { config: self.config(), ..Options::default() }).unwrap()
    }
}

fn with(base: &str, extra: &str) -> String {
    format!("{base}\n{extra}")
}

#[test]
fn generate_is_idempotent_and_refuses_collisions() {
    let ws = Workspace::new(TINY);
    assert_eq!(ws.milx(&["generate", "--out", ws.path("a").to_str().unwrap()]), 0);
    assert_eq!(ws.milx(&["generate", "--out", ws.path("b").to_str().unwrap()]), 0);
    let a = std::fs::read(ws.path("a/manifest.json")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b/manifest.json")).unwrap());
    assert_eq!(std::fs::read(ws.path("a/images/bag-00004/001.png")).unwrap(), std::fs::read(ws.path("b/images/bag-00004/001.png")).unwrap());

    assert_eq!(ws.milx(&["generate", "--out", ws.path("a").to_str().unwrap()]), 1);
    assert_eq!(ws.milx(&["generate", "--force", "--out", ws.path("a").to_str().unwrap()]), 0);
    assert_eq!(ws.milx(&["generate", "--seed", "4", "--force", "--out", ws.path("a").to_str().unwrap()]), 0);
    assert_ne!(a, std::fs::read(ws.path("a/manifest.json")).unwrap());
}

#[test]
fn missing_field_names_field_and_line() {
    let ws = Workspace::new("# comment\n[synth]\nnum_bags = 4\n");
    let err = Context::new(Options { config: ws.config(), ..Options::default() }).err().unwrap();
    match &err {
        Error::ConfigAt { field, line, .. } => assert_eq!((field.as_str(), *line), ("schema_version", 1)),
        e => panic!("unexpected {e:?}"),
    }
    assert!(err.to_string().contains("run.toml:1: `schema_version`"), "{err}");
    assert_eq!(ws.milx(&["generate"]), 1);
}

/// Independent labelling rule: no solid 2x2 block of saturated pixels means
/// class 0, otherwise the hue of those blocks picks the nearest painted class.
/// Single saturated pixels are background speckle.
fn oracle_label(pixels: &Tensor, num_classes: usize) -> usize {
    let hw = pixels.spatial_len();
    let w = pixels.shape()[2];
    let d = pixels.data();
    let chroma = |p: usize| {
        let (r, g, b) = (d[p], d[hw + p], d[2 * hw + p]);
        r.max(g).max(b) - r.min(g).min(b)
    };
    let mut hues = Vec::new();
    for p in 0..hw {
        let (x, y) = (p % w, p / w);
        if x + 1 >= w || y + 1 >= hw / w || [p, p + 1, p + w, p + w + 1].iter().any(|&q| chroma(q) <= 0.5) {
            continue;
        }
        let (r, g, b) = (d[p], d[hw + p], d[2 * hw + p]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let c = max - min;
        let h = if max == r {
            ((g - b) / c).rem_euclid(6.0)
        } else if max == g {
            (b - r) / c + 2.0
        } else {
            (r - g) / c + 4.0
        } / 6.0;
        hues.push(h);
    }
    if hues.is_empty() {
        return 0;
    }
    let h = hues.iter().sum::<f64>() / hues.len() as f64;
    let painted = num_classes - 1;
    (1..num_classes)
        .min_by(|&a, &b| {
            let dist = |k: usize| {
                let t = (k - 1) as f64 / painted as f64;
                let d = (h - t).abs();
                d.min(1.0 - d)
            };
            dist(a).total_cmp(&dist(b))
        })
        .unwrap()
}

#[test]
fn generated_labels_are_decidable() {
    let ws = Workspace::new(&TINY.replace("num_bags = 18\nbag_size = 3\nimage_size = 8", "num_bags = 24\nbag_size = 4\nimage_size = 32\nnum_classes = 4"));
    assert_eq!(ws.milx(&["generate"]), 0);
    let data = read_dataset(&ws.path("data")).unwrap();
    for (bag, _) in &data.bags {
        let votes: Vec<usize> = bag.instances.iter().map(|i| oracle_label(&i.pixels, 4)).filter(|&l| l != 0).collect();
        let predicted = votes.first().copied().unwrap_or(0);
        assert!(votes.iter().all(|&v| v == predicted), "{}: mixed motifs {votes:?}", bag.bag_id);
        assert_eq!(predicted, bag.label, "{}", bag.bag_id);
    }
}

fn read_run_metric(dir: &Path, name: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    match name {
        "best_val_loss" | "best_epoch" => v[name].as_f64().unwrap(),
        n => v["metrics"][n].as_f64().unwrap(),
    }
}

fn summary_rows(path: &Path) -> Vec<(String, f64, f64, usize)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn multi_run_summary_is_the_mean_of_run_files() {
    let ws = Workspace::new(&TINY.replace("rng_seed = 3\n", "rng_seed = 3\nruns = 3\n"));
    assert_eq!(ws.milx(&["generate"]), 0);
    assert_eq!(ws.milx(&["train"]), 0);
    let rows = summary_rows(&ws.path("out/train/summary.tsv"));
    assert!(rows.iter().any(|r| r.0 == "accuracy"));
    for (name, mean, std, runs) in rows {
        assert_eq!(runs, 3);
        let vals: Vec<f64> = (0..3).map(|r| read_run_metric(&ws.path(&format!("out/train/run-{r}")), &name)).collect();
        let m = vals.iter().sum::<f64>() / 3.0;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((mean - m).abs() < 1e-12 && (std - s).abs() < 1e-12, "{name}: {mean} {std} vs {m} {s}");
    }
}

#[test]
fn single_run_reports_zero_std_and_is_reproducible() {
    let ws = Workspace::new(TINY);
    assert_eq!(ws.milx(&["generate"]), 0);
    assert_eq!(ws.milx(&["train"]), 0);
    assert_eq!(ws.milx(&["train", "--out", ws.path("again").to_str().unwrap()]), 0);
    for (_, _, std, runs) in summary_rows(&ws.path("out/train/summary.tsv")) {
        assert_eq!((std, runs), (0.0, 1));
    }
    for f in ["run-0/model.safetensors", "run-0/log.jsonl", "run-0/metrics.json", "summary.tsv"] {
        assert_eq!(std::fs::read(ws.path("out/train").join(f)).unwrap(), std::fs::read(ws.path("again").join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(ws.path("out/train/run-0/log.jsonl")).unwrap();
    assert!(log.lines().nth(1).unwrap().contains("\"timestamp\":null"));
}

fn trained(config: &str) -> Workspace {
    let ws = Workspace::new(config);
    assert_eq!(ws.milx(&["generate"]), 0);
    assert_eq!(ws.milx(&["train"]), 0);
    ws
}

#[test]
fn explain_writes_results_and_rerenders_identically() {
    let ws = trained(TINY);
    assert_eq!(ws.milx(&["explain"]), 0);
    let ctx = ws.context();
    let data = ctx.dataset().unwrap();
    let test = data.split(SplitTag::Test);
    for method in ["gradcam", "lrp", "iba"] {
        for bag in &test.bags[..2] {
            let file = ws.path(&format!("out/explain/attributions/{method}/{}.safetensors", bag.bag_id));
            let (meta, result) = milx::attribution_io::read(&file).unwrap();
            assert_eq!(meta.method.as_str(), method);
            assert_eq!(result.maps.len(), bag.len());
            assert_eq!(meta.provenance.config_digest, ctx.config_digest);
            let ckpt = std::fs::read(ws.path("out/train/run-0/model.safetensors")).unwrap();
            assert_eq!(meta.provenance.checkpoint_digest, milx::digest::sha256_hex(&ckpt));

            let again = ws.path(&format!("rerender/{method}/{}", bag.bag_id));
            milx::explain::render_file(&file, bag, ctx.config.explain.scale, &again).unwrap();
            for k in 0..bag.len() {
                let name = format!("{k:03}.png");
                let first = std::fs::read(ws.path(&format!("out/explain/overlays/{method}/{}/{name}", bag.bag_id))).unwrap();
                assert_eq!(first, std::fs::read(again.join(&name)).unwrap());
            }
        }
    }
}

#[test]
fn zero_map_overlay_is_the_grayscale_image() {
    let ws = Workspace::new(TINY);
    assert_eq!(ws.milx(&["generate"]), 0);
    let data = read_dataset(&ws.path("data")).unwrap();
    let bag = &data.bags[0].0;
    let result = AttributionResult {
        method: Method::Gradcam,
        bag_id: bag.bag_id.clone(),
        target_class: 0,
        maps: bag.instances.iter().map(|i| Tensor::zeros(&[i.height(), i.width()])).collect(),
        signed: false,
        metadata: MethodConfig::Gradcam(GradcamConfig::default()),
    };
    let out = ws.path("zero");
    milx::explain::render_overlays(&result, bag, 1, &Default::default(), &out).unwrap();
    for (k, inst) in bag.instances.iter().enumerate() {
        let png = read_png(&out.join(format!("{k:03}.png"))).unwrap();
        let hw = inst.pixels.spatial_len();
        let d = inst.pixels.data();
        for p in 0..hw {
            let gray = (0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p]) * 255.0;
            for c in 0..3 {
                assert!((png.data[p * 3 + c] as f64 - gray).abs() <= 0.5 + 1e-9);
            }
        }
    }
}

/// Trapezoid rule, written out independently of the library.
fn trapezoid(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    for i in 1..points.len() {
        area += (points[i].0 - points[i - 1].0) * (points[i].1 + points[i - 1].1) / 2.0;
    }
    area
}

#[test]
fn bench_single_method_and_metric_and_cache_recompute() {
    let ws = trained(TINY);
    assert_eq!(ws.milx(&["bench"]), 0);
    let out = ws.path("out/bench");
    let list = |d: &str| {
        let mut v: Vec<String> = std::fs::read_dir(out.join(d)).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(list("curves"), vec!["gradcam.insertion.tsv"]);
    assert_eq!(list("plots"), vec!["gradcam.insertion.png"]);
    assert!(!out.join("roar.json").exists() && !out.join("localization.tsv").exists());

    let rows = parse_summary(&std::fs::read_to_string(out.join("summary.tsv")).unwrap());
    assert_eq!(rows.len(), 1);
    let aucs: Vec<f64> = std::fs::read_dir(out.join("cache/gradcam"))
        .unwrap()
        .map(|e| {
            let entry: CacheEntry = serde_json::from_str(&std::fs::read_to_string(e.unwrap().path()).unwrap()).unwrap();
            trapezoid(&entry.curves.unwrap().insertion.points)
        })
        .collect();
    assert_eq!(aucs.len(), 3);
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((rows[0].mean - mean).abs() < 1e-9, "{} vs {mean}", rows[0].mean);
    assert_eq!((rows[0].series.as_str(), rows[0].metric.as_str(), rows[0].count), ("gradcam", "insertion", 3));
}

#[test]
fn roar_without_train_split_is_a_config_error() {
    let ws = Workspace::new(&with(
        &TINY.replace("ratios = [0.5, 0.25, 0.25]", "ratios = [0.0, 0.5, 0.5]").replace("metrics = [\"insertion\"]", "metrics = [\"roar\"]"),
        "",
    ));
    assert_eq!(ws.milx(&["generate"]), 0);
    match milx::bench::run(&ws.context()) {
        Err(Error::Config(m)) => assert!(m.contains("train split"), "{m}"),
        Err(e) => panic!("unexpected error {e:?}"),
        Ok(_) => panic!("roar without a train split must fail"),
    }
    assert_eq!(ws.milx(&["bench"]), 1);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new(TINY);
    assert_eq!(milx::cli::main_with(["milx", "frobnicate"]), 1);
    assert_eq!(milx::cli::main_with(["milx", "generate"]), 1);
    assert_eq!(ws.milx(&["train"]), 1, "missing dataset path is a config error");

    assert_eq!(ws.milx(&["generate"]), 0);
    std::fs::write(ws.path("data/manifest.json"), r#"{"schema_version": 7}"#).unwrap();
    assert_eq!(ws.milx(&["train"]), 2);

    std::fs::write(ws.path("blocker"), "").unwrap();
    assert_eq!(ws.milx(&["generate", "--out", ws.path("blocker/sub").to_str().unwrap()]), 3);
}

#[test]
fn checkpoint_architecture_mismatch_is_refused() {
    let ws = trained(TINY);
    std::fs::write(ws.config(), TINY.replace("classifier_hidden = 6", "classifier_hidden = 7")).unwrap();
    assert_eq!(ws.milx(&["explain"]), 1);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let ctx = Context::new(Options { config: path.clone(), ..Options::default() });
        assert!(ctx.is_ok(), "{}: {:?}", path.display(), ctx.err());
    }
}
