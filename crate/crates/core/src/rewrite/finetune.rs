use serde::{Deserialize, Serialize};

use super::GridPoint;
use crate::error::{Error, Result};
use crate::nets::{batch_loss_and_grad, Model, ParamSelection, Sgd};
use crate::synthbench::Exemplar;
use crate::tensor::Tensor;

/// SGD learning rates and step counts tried for both fine-tuning baselines.
pub const DEFAULT_FINETUNE_GRID: [GridPoint; 5] = [
    GridPoint::new(1e-2, 500),
    GridPoint::new(1e-3, 500),
    GridPoint::new(1e-4, 500),
    GridPoint::new(1e-5, 800),
    GridPoint::new(1e-6, 800),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Conv weights and bias of layer `L` only.
    Local,
    /// Every trainable parameter of layers `L` and above.
    Global,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub scope: FinetuneScope,
    pub layer: usize,
    pub point: GridPoint,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean exemplar cross-entropy before each step, then after the last one.
    pub loss_trace: Vec<f64>,
}

/// Full-batch SGD on the cross-entropy of the transformed exemplars against
/// their (target) labels. Batch-norm statistics stay frozen.
pub fn finetune(
    model: &Model,
    exemplars: &[Exemplar],
    layer: usize,
    scope: FinetuneScope,
    point: GridPoint,
) -> Result<FinetuneOutcome> {
    if exemplars.is_empty() {
        return Err(Error::Empty("no exemplars to fine-tune on".into()));
    }
    model.check_editable(layer)?;
    let images: Vec<Tensor> = exemplars.iter().map(|e| e.x_prime.to_tensor()).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let labels: Vec<usize> = exemplars.iter().map(|e| e.label).collect();
    let (sel, layers) = match scope {
        FinetuneScope::Local => (ParamSelection::ConvWeightBias, vec![layer]),
        FinetuneScope::Global => (ParamSelection::AllTrainable, (layer..model.layers.len()).collect()),
    };
    let mut out = model.clone();
    let mut sgd = Sgd::new(point.lr, 0.0, sel, layers);
    let mut trace = Vec::with_capacity(point.steps + 1);
    for step in 0..point.steps {
        let (loss, grads) = batch_loss_and_grad(&out, &refs, &labels, layer)?;
        if !loss.is_finite() {
            return Err(Error::Optimization(format!("fine-tuning diverged at step {step}")));
        }
        trace.push(loss);
        sgd.step(&mut out, &grads);
    }
    let (final_loss, _) = batch_loss_and_grad(&out, &refs, &labels, model.layers.len())?;
    if !final_loss.is_finite() {
        return Err(Error::Optimization("fine-tuning diverged".into()));
    }
    trace.push(final_loss);
    Ok(FinetuneOutcome { model: out, scope, layer, point, initial_loss: trace[0], final_loss, loss_trace: trace })
}

pub fn finetune_local(
    model: &Model,
    exemplars: &[Exemplar],
    layer: usize,
    point: GridPoint,
) -> Result<FinetuneOutcome> {
    finetune(model, exemplars, layer, FinetuneScope::Local, point)
}

pub fn finetune_global(
    model: &Model,
    exemplars: &[Exemplar],
    layer: usize,
    point: GridPoint,
) -> Result<FinetuneOutcome> {
    finetune(model, exemplars, layer, FinetuneScope::Global, point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Architecture;
    use crate::synthbench::{Mask, RgbImage};

    fn exemplars() -> Vec<Exemplar> {
        (0..2u8)
            .map(|k| {
                let x =
                    RgbImage::from_bytes((0..3072u32).map(|i| ((i * 37 + u32::from(k) * 11) % 251) as u8).collect())
                        .unwrap();
                Exemplar {
                    x_prime: x.clone(),
                    x,
                    mask: Mask::full(),
                    label: 3,
                    concept: "c".into(),
                    style: "s".into(),
                    variant: 0,
                }
            })
            .collect()
    }

    #[test]
    fn zero_lr_is_identity() {
        let m = Architecture::Vgg.build(1);
        let out = finetune_local(&m, &exemplars(), 4, GridPoint::new(0.0, 3)).unwrap();
        assert_eq!(out.model, m);
    }

    #[test]
    fn local_touches_only_layer_weights_and_bias() {
        let m = Architecture::Vgg.build(1);
        let out = finetune_local(&m, &exemplars(), 4, GridPoint::new(1e-2, 5)).unwrap();
        for (i, (a, b)) in m.layers.iter().zip(&out.model.layers).enumerate() {
            if i == 4 {
                let (ca, cb) = (a.as_conv().unwrap(), b.as_conv().unwrap());
                assert_ne!(ca.weight, cb.weight);
                assert_eq!(ca.bn, cb.bn);
            } else {
                assert_eq!(a, b, "layer {i} changed");
            }
        }
        assert!(out.final_loss <= out.initial_loss);
    }

    #[test]
    fn global_leaves_prefix_alone_and_moves_suffix() {
        let m = Architecture::Vgg.build(1);
        let out = finetune_global(&m, &exemplars(), 4, GridPoint::new(1e-2, 5)).unwrap();
        for i in 0..4 {
            assert_eq!(m.layers[i], out.model.layers[i]);
        }
        assert_ne!(m.layers[5], out.model.layers[5]);
        assert_ne!(m.layers[8], out.model.layers[8]);
        // running statistics are frozen
        assert_eq!(m.layers[5].as_conv().unwrap().bn.mean, out.model.layers[5].as_conv().unwrap().bn.mean);
    }

    #[test]
    fn divergence_is_reported() {
        let m = Architecture::Vgg.build(1);
        let r = finetune_global(&m, &exemplars(), 2, GridPoint::new(1e200, 50));
        assert!(matches!(r, Err(Error::Optimization(_))), "{r:?}");
    }
}
