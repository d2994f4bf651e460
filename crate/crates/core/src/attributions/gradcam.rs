//! GradCAM on the bag logit. The gradient flows through attention pooling,
//! so an instance's attention weight scales its map.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_target, AttributionResult, MethodConfig};
use crate::bagdata::Bag;
use crate::milnet::{BlockKind, MilModel};
use crate::tensor::resize_bilinear;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcamConfig {
    /// Registry name of a conv layer; the last conv layer when unset.
    #[serde(default)]
    pub layer: Option<String>,
}

/// `ReLU(Σ_c w_c A_c)` with `w_c` the spatial mean of `∂y/∂A_c`.
/// `activation` and `gradient` are `[C, H, W]`; the result is `[H, W]`.
pub fn gradcam_map(activation: &Tensor, gradient: &Tensor) -> Tensor {
    assert_eq!(activation.shape(), gradient.shape(), "activation and gradient shapes differ");
    let s = activation.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut map = vec![0.0; hw];
    for ch in 0..c {
        let a = &activation.data()[ch * hw..(ch + 1) * hw];
        let g = &gradient.data()[ch * hw..(ch + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        for (m, v) in map.iter_mut().zip(a) {
            *m += weight * v;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::from_vec(&[s[1], s[2]], map)
}

/// Activations of `layer` and the gradient of `target_class`'s logit with
/// respect to them, per instance.
pub fn layer_gradients(model: &MilModel, bag: &Bag, target_class: usize, layer: &str) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    model.check_instance(bag)?;
    let b = model.block_index(layer)?;
    if !matches!(model.blocks()[b].kind, BlockKind::Conv { .. }) {
        return Err(Error::UnsupportedLayer(alloc::format!("{layer} (GradCAM needs a convolutional layer)")));
    }
    let n_blocks = model.blocks().len();
    let acts: Vec<Tensor> = bag.instances.iter().map(|i| model.run_blocks(0..b + 1, i.pixels.clone())).collect();
    let traces: Vec<_> = acts.iter().map(|a| model.trace_blocks(b + 1..n_blocks, a.clone())).collect();
    let head = model.head_forward(traces.iter().map(|t| t.output().data().to_vec()).collect())?;
    let mut onehot = vec![0.0; model.num_classes()];
    onehot[target_class] = 1.0;
    let g_h = model.head_backward(&head, &onehot, None);
    let grads = traces
        .iter()
        .zip(g_h)
        .map(|(t, g)| model.backward_blocks(t, g, None, true).expect("input gradient requested"))
        .collect();
    Ok((acts, grads))
}

pub fn gradcam(model: &MilModel, bag: &Bag, target_class: usize, cfg: &GradcamConfig) -> Result<AttributionResult> {
    check_target(model, target_class)?;
    let layer = cfg.layer.as_deref().unwrap_or_else(|| model.last_conv_layer());
    let (acts, grads) = layer_gradients(model, bag, target_class, layer)?;
    let maps = acts
        .iter()
        .zip(&grads)
        .zip(&bag.instances)
        .map(|((a, g), inst)| resize_bilinear(&gradcam_map(a, g), inst.height(), inst.width()))
        .collect();
    let used = GradcamConfig { layer: Some(layer.into()) };
    Ok(AttributionResult::new(bag, target_class, maps, MethodConfig::Gradcam(used)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagdata::{generate_synthetic, SynthConfig};
    use crate::milnet::ModelConfig;

    #[test]
    fn mean_logit_gives_uniform_weight() {
        // y = mean(A) over one channel: ∂y/∂A = 1/(HW) everywhere.
        let act = Tensor::from_vec(&[1, 2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]);
        let grad = Tensor::filled(&[1, 2, 3], 1.0 / 6.0);
        let map = gradcam_map(&act, &grad);
        let expected: Vec<f64> = act.data().iter().map(|a| a.max(0.0) / 6.0).collect();
        for (m, e) in map.data().iter().zip(&expected) {
            assert!((m - e).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_weights_are_clipped() {
        let act = Tensor::filled(&[1, 2, 2], 1.0);
        let grad = Tensor::filled(&[1, 2, 2], -0.3);
        assert!(gradcam_map(&act, &grad).data().iter().all(|&v| v == 0.0));
    }

    fn small_model() -> (MilModel, Bag) {
        let model = MilModel::new(ModelConfig::default(), 3).unwrap();
        let data = generate_synthetic(&SynthConfig { num_bags: 1, bag_size: 4, ..SynthConfig::default() }).unwrap();
        (model, data.bags[0].clone())
    }

    #[test]
    fn zero_classifier_gives_zero_maps() {
        let (mut model, bag) = small_model();
        let idx = model.params().names().iter().position(|n| n == "classifier.fc2.weight").unwrap();
        model.params_mut().tensors_mut()[idx].fill(0.0);
        let r = gradcam(&model, &bag, 0, &GradcamConfig::default()).unwrap();
        assert!(r.maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn maps_match_instances_and_are_non_negative() {
        let (model, bag) = small_model();
        let r = gradcam(&model, &bag, 1, &GradcamConfig { layer: Some("backbone.conv2".into()) }).unwrap();
        r.check_alignment(&bag).unwrap();
        assert!(!r.signed);
        assert!(r.maps.iter().flat_map(|m| m.data()).all(|&v| v >= 0.0));
    }

    #[test]
    fn non_spatial_layers_are_rejected() {
        let (model, bag) = small_model();
        for layer in ["head.fc", "attention.v", "head.pool", "nope"] {
            let err = gradcam(&model, &bag, 0, &GradcamConfig { layer: Some(layer.into()) }).unwrap_err();
            assert!(matches!(err, Error::UnsupportedLayer(_)), "{layer}: {err}");
        }
    }
}
