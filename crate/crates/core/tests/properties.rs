use milx_core::attributions::lrp::{lrp_dense_stack, DenseLayer};
use milx_core::attributions::{explain, GradcamConfig, IbaConfig, LrpConfig, Method, MethodConfig, NoiseStats, Rule};
use milx_core::bagdata::{generate_synthetic, stratified_split, Bag, Instance, SynthConfig};
use milx_core::evalbench::{
    deletion_curve, insertion_curve, rank_pixels, trapezoid, BagScorer, CurveConfig, RankingScope,
};
use milx_core::metrics::{accuracy_from_confusion, confusion_matrix};
use milx_core::milnet::{MilModel, ModelConfig};
use milx_core::nn::softmax;
use milx_core::trainer::{train, EarlyStopping, TrainConfig, Verdict};
use milx_core::{Result, Tensor};
use proptest::prelude::*;
use std::collections::HashSet;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        backbone_channels: vec![3, 4],
        backbone_pool: vec![true, false],
        head_channels: [4, 3],
        embed_dim: 5,
        attention_dim: 4,
        classifier_hidden: 6,
        ..ModelConfig::default()
    }
}

fn random_bag(n: usize, pixels: &[f64]) -> Bag {
    let per = 3 * 8 * 8;
    let instances = (0..n)
        .map(|k| {
            let px = Tensor::from_vec(&[3, 8, 8], pixels[k * per..(k + 1) * per].to_vec());
            Instance::new(format!("p/i{k:02}"), px, None).unwrap()
        })
        .collect();
    Bag::new("p", 0, instances).unwrap()
}

fn bag_strategy() -> impl Strategy<Value = Bag> {
    (1usize..5).prop_flat_map(|n| prop::collection::vec(0.0f64..1.0, n * 192).prop_map(move |px| random_bag(n, &px)))
}

fn chroma(bag_px: &Tensor, p: usize) -> f64 {
    let hw = bag_px.spatial_len();
    let c: Vec<f64> = (0..3).map(|ch| bag_px.data()[ch * hw + p]).collect();
    c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min)
}

/// Hue in [0, 1) computed straight from RGB.
fn hue(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h / 6.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_sums_to_one_and_pooling_is_order_free(seed in 0u64..1000, bag in bag_strategy(), rot in 0usize..5) {
        let model = MilModel::new(tiny_model_config(), seed).unwrap();
        let out = model.forward(&bag).unwrap();
        prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let n = bag.len();
        let mut permuted = bag.clone();
        permuted.instances.rotate_left(rot % n);
        let p = model.forward(&permuted).unwrap();
        for k in 0..n {
            prop_assert!((p.attention[k] - out.attention[(k + rot % n) % n]).abs() < 1e-9);
        }
        for (a, b) in p.logits.iter().zip(&out.logits) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_ignores_a_common_shift(scores in prop::collection::vec(-20.0f64..20.0, 1..10), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        for (a, b) in softmax(&scores).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradcam_and_lrp_maps_match_instances(seed in 0u64..1000, bag in bag_strategy(), target in 0usize..3) {
        let model = MilModel::new(tiny_model_config(), seed).unwrap();
        let gc = explain(&model, &bag, target, Method::Gradcam, &MethodConfig::Gradcam(GradcamConfig::default())).unwrap();
        prop_assert!(gc.maps.iter().flat_map(|m| m.data()).all(|v| *v >= 0.0));
        let lrp = explain(&model, &bag, target, Method::Lrp, &MethodConfig::Lrp(LrpConfig::default())).unwrap();
        for r in [&gc, &lrp] {
            prop_assert_eq!(r.maps.len(), bag.len());
            prop_assert!(r.maps.iter().all(|m| m.shape() == [8, 8]));
        }
    }

    #[test]
    fn lrp_basic_rule_conserves_on_bias_free_dense_nets(
        w1 in prop::collection::vec(-1.0f64..1.0, 24),
        w2 in prop::collection::vec(-1.0f64..1.0, 12),
        x in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let layers = [
            DenseLayer { weight: w1, bias: None, out_dim: 6, relu: true },
            DenseLayer { weight: w2, bias: None, out_dim: 2, relu: false },
        ];
        let (logit, r) = lrp_dense_stack(&layers, &x, 0, &Rule::Basic).unwrap();
        let total: f64 = r.iter().sum();
        prop_assert!((total - logit).abs() <= 1e-4 * logit.abs().max(1e-9));

        let (_, r) = lrp_dense_stack(&layers, &x, 0, &Rule::Epsilon { epsilon: 1e-9 }).unwrap();
        prop_assert!((r.iter().sum::<f64>() - logit).abs() <= 1e-6 * logit.abs().max(1e-3));
    }

    #[test]
    fn lrp_epsilon_absorbs_relevance(w in prop::collection::vec(-1.0f64..1.0, 4), x in prop::collection::vec(0.0f64..1.0, 4), eps in 1e-4f64..1.0) {
        let layer = [DenseLayer { weight: w, bias: None, out_dim: 1, relu: false }];
        let (logit, r) = lrp_dense_stack(&layer, &x, 0, &Rule::Epsilon { epsilon: eps }).unwrap();
        prop_assert!(r.iter().sum::<f64>().abs() <= logit.abs() + 1e-15);
    }

    #[test]
    fn generated_labels_follow_motif_colours(seed in 0u64..10_000) {
        let cfg = SynthConfig { num_bags: 6, bag_size: 4, num_classes: 4, rng_seed: seed, ..SynthConfig::default() };
        let data = generate_synthetic(&cfg).unwrap();
        for bag in &data.bags {
            let mut hues = Vec::new();
            for inst in &bag.instances {
                let mask = inst.ground_truth_mask.as_ref().unwrap();
                let hw = mask.len();
                for p in 0..hw {
                    let inside = mask.data()[p] > 0.0;
                    // Only motif pixels are strongly coloured.
                    prop_assert_eq!(inside, chroma(&inst.pixels, p) > 0.5, "pixel {} of {}", p, inst.instance_id);
                    if inside {
                        let d = inst.pixels.data();
                        hues.push(hue(d[p], d[hw + p], d[2 * hw + p]));
                    }
                }
            }
            let painted = (cfg.num_classes - 1) as f64;
            let decided = match hues.first() {
                None => 0,
                Some(h) => 1 + ((h * painted).round() as usize) % (cfg.num_classes - 1),
            };
            prop_assert!(hues.iter().all(|h| (h - hues[0]).abs() < 1e-2));
            prop_assert_eq!(decided, bag.label);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover(seed in 0u64..500, a in 0.2f64..0.7) {
        let data = generate_synthetic(&SynthConfig { num_bags: 30, bag_size: 1, image_size: 8, ..SynthConfig::default() }).unwrap();
        let b = (1.0 - a) / 2.0;
        let (tr, va, te) = stratified_split(&data, [a, b, 1.0 - a - b], seed).unwrap();
        let mut seen = HashSet::new();
        for bag in tr.bags.iter().chain(&va.bags).chain(&te.bags) {
            prop_assert!(seen.insert(bag.bag_id.clone()), "{} appears twice", bag.bag_id);
        }
        prop_assert_eq!(seen.len(), data.len());
    }

    #[test]
    fn early_stopping_never_overruns(losses in prop::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..8) {
        let mut stopper = EarlyStopping::new(patience);
        let mut ran = 0;
        for (i, &l) in losses.iter().enumerate() {
            ran = i + 1;
            if stopper.observe(ran, l) == Verdict::Stop {
                break;
            }
        }
        prop_assert!(ran <= stopper.best_epoch() + patience);
    }

    #[test]
    fn confusion_accuracy_matches_raw_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let raw = labels.iter().zip(&preds).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        prop_assert_eq!(accuracy_from_confusion(&confusion_matrix(&labels, &preds, 4)), raw);
    }
}

/// `f(x) = b + Σ w·x` over every pixel of the bag.
struct Affine {
    w: Vec<f64>,
    b: f64,
}

impl BagScorer for Affine {
    fn score(&self, bag: &Bag) -> Result<f64> {
        let px = bag.instances.iter().flat_map(|i| i.pixels.data());
        Ok(self.b + px.zip(&self.w).map(|(x, w)| x * w).sum::<f64>())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn curves_are_dual_under_an_affine_score(
        bag in bag_strategy(),
        w in prop::collection::vec(-1.0f64..1.0, 4 * 192),
        b in -1.0f64..1.0,
        seed in 0u64..100,
        steps in 1usize..12,
        per_instance in any::<bool>(),
    ) {
        let scorer = Affine { w, b };
        let maps = milx_core::evalbench::random_maps(&bag, seed);
        let scope = if per_instance { RankingScope::Instance } else { RankingScope::Bag };
        let cfg = CurveConfig { steps, scope };
        let ins = insertion_curve(&scorer, &bag, &maps, &cfg).unwrap();
        let del = deletion_curve(&scorer, &bag, &maps, &cfg).unwrap();
        let full = scorer.score(&bag).unwrap();
        for (i, d) in ins.points.iter().zip(&del.points) {
            prop_assert_eq!(i.0, d.0);
            prop_assert!((i.1 + d.1 - full - b).abs() < 1e-9);
        }
        for c in [&ins, &del] {
            let mut by_hand = 0.0;
            for k in 1..c.points.len() {
                by_hand += 0.5 * (c.points[k].0 - c.points[k - 1].0) * (c.points[k].1 + c.points[k - 1].1);
            }
            prop_assert!((c.auc - by_hand).abs() < 1e-9);
            prop_assert_eq!(c.auc, trapezoid(&c.points));
        }
        prop_assert_eq!(rank_pixels(&maps), rank_pixels(&maps.clone()));
    }
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let data = generate_synthetic(&SynthConfig { num_bags: 12, bag_size: 3, image_size: 8, ..SynthConfig::default() }).unwrap();
    let (tr, va, _) = stratified_split(&data, [0.6, 0.4, 0.0], 1).unwrap();
    let cfg = TrainConfig { max_epochs: 3, rng_seed: 5, ..TrainConfig::default() };
    let run = || train(MilModel::new(tiny_model_config(), 9).unwrap(), &tr, &va, &cfg).unwrap();
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1.params(), m2.params());
}

#[test]
fn iba_maps_match_instances() {
    let data = generate_synthetic(&SynthConfig { num_bags: 3, bag_size: 3, image_size: 8, ..SynthConfig::default() }).unwrap();
    let model = MilModel::new(tiny_model_config(), 4).unwrap();
    let layer = "backbone.conv2";
    let stats = NoiseStats::estimate(&model, layer, &data.bags).unwrap();
    let cfg = IbaConfig { layer: layer.into(), steps: 3, ..IbaConfig::default() }.calibrated(stats);
    for bag in &data.bags {
        let r = explain(&model, bag, 1, Method::Iba, &MethodConfig::Iba(cfg.clone())).unwrap();
        assert_eq!(r.maps.len(), bag.len());
        assert!(r.maps.iter().all(|m| m.shape() == [8, 8] && m.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
