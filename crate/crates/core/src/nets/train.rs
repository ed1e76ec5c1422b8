use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    batch_loss_and_grad, grad_slices, param_slices_mut, Architecture, CheckpointMeta, Model, ModelCheckpoint,
    ParamSelection,
};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::{conv2d, LayerParams, ParamGrad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Images used for the batch-norm statistics pass.
    #[serde(default = "default_calibration")]
    pub calibration_images: usize,
    /// Re-estimate batch-norm statistics every this many epochs (0: only once, before training).
    #[serde(default = "one")]
    pub recalibrate_every: usize,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    32
}
fn default_calibration() -> usize {
    256
}
fn one() -> usize {
    1
}

/// Plain or momentum SGD over a chosen set of layers.
pub(crate) struct Sgd {
    lr: f64,
    momentum: f64,
    sel: ParamSelection,
    layers: Vec<usize>,
    velocity: Vec<Vec<Vec<f64>>>,
}

impl Sgd {
    pub(crate) fn new(lr: f64, momentum: f64, sel: ParamSelection, layers: Vec<usize>) -> Self {
        Self { lr, momentum, sel, layers, velocity: Vec::new() }
    }

    pub(crate) fn step(&mut self, model: &mut Model, grads: &[ParamGrad]) {
        if self.velocity.is_empty() {
            self.velocity = self
                .layers
                .iter()
                .map(|&i| grad_slices(&grads[i], self.sel).iter().map(|g| vec![0.0; g.len()]).collect())
                .collect();
        }
        for (slot, &i) in self.layers.iter().enumerate() {
            let gs = grad_slices(&grads[i], self.sel);
            let ps = param_slices_mut(&mut model.layers[i], self.sel);
            for ((p, g), v) in ps.into_iter().zip(gs).zip(self.velocity[slot].iter_mut()) {
                for ((w, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi + gi;
                    let step = self.lr * *vi;
                    // a zero step leaves the parameter bits untouched
                    if step != 0.0 {
                        *w -= step;
                    }
                }
            }
        }
    }
}

/// Sets every conv block's batch-norm mean/variance to the statistics of its
/// pre-activations over `images`, block by block from the input upward, so
/// each block sees already-normalized inputs.
pub fn calibrate_batchnorm(model: &mut Model, images: &[Tensor]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Empty("batch-norm calibration set".into()));
    }
    for i in 0..model.layers.len() {
        let Some(block) = model.layers[i].as_conv() else { continue };
        let block = block.clone();
        let pres: Vec<Tensor> = images
            .par_iter()
            .map(|x| {
                let st = model.forward_prefix(x, i)?;
                conv2d(&st.input, &block)
            })
            .collect::<Result<_>>()?;
        let (c, h, w) = pres[0].chw()?;
        let hw = h * w;
        let count = (pres.len() * hw) as f64;
        let mut mean = vec![0.0; c];
        for p in &pres {
            for ch in 0..c {
                mean[ch] += p.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for p in &pres {
            for ch in 0..c {
                var[ch] += p.data()[ch * hw..(ch + 1) * hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        if let LayerParams::Conv(cb) = &mut model.layers[i] {
            cb.bn.mean = mean;
            cb.bn.var = var;
        }
    }
    Ok(())
}

/// Evenly spaced subset of `count` images, so class-major inputs still give
/// every class a share of the calibration set.
fn calibration_subset(images: &[Tensor], count: usize) -> Vec<Tensor> {
    let count = count.clamp(1, images.len());
    (0..count).map(|k| images[k * images.len() / count].clone()).collect()
}

/// Trains a freshly initialized network with momentum SGD on softmax
/// cross-entropy. Batch-norm statistics are estimated from an evenly spaced
/// subset of `calibration_images` training images before training, again at
/// the start of every `recalibrate_every`-th epoch, and are frozen in between
/// and in the returned checkpoint. The shuffle of each epoch is derived from
/// `(seed, epoch)`.
pub fn train_base(
    arch: Architecture,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    dataset_fingerprint: &str,
) -> Result<ModelCheckpoint> {
    if images.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::dim("image and label counts differ"));
    }
    let mut model = arch.build(cfg.seed);
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes: model.num_classes });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let calib = calibration_subset(images, cfg.calibration_images);

    let all_layers: Vec<usize> = (0..model.layers.len()).collect();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, ParamSelection::AllTrainable, all_layers);
    let mut order: Vec<usize> = (0..images.len()).collect();
    calibrate_batchnorm(&mut model, &calib)?;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.recalibrate_every > 0 && epoch % cfg.recalibrate_every == 0 {
            calibrate_batchnorm(&mut model, &calib)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &images[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&model, &xs, &ys, 0)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            opt.step(&mut model, &grads);
        }
    }
    let sel = ParamSelection::AllTrainable;
    if !model.layers.iter_mut().all(|l| param_slices_mut(l, sel).iter().all(|p| p.iter().all(|v| v.is_finite()))) {
        return Err(Error::Training("non-finite parameters after training".into()));
    }
    Ok(ModelCheckpoint {
        model,
        meta: CheckpointMeta {
            training_seed: cfg.seed,
            dataset_fingerprint: dataset_fingerprint.to_string(),
            note: "base".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::INPUT_SHAPE;
    use rand_distr::{Distribution, Normal};

    fn toy_set(n: usize) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let imgs = (0..n)
            .map(|_| Tensor::new(INPUT_SHAPE.to_vec(), (0..3072).map(|_| normal.sample(&mut rng)).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|i| i % 8).collect();
        (imgs, labels)
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            seed: 4,
            epochs: 1,
            lr,
            momentum: 0.9,
            batch_size: 4,
            calibration_images: 8,
            recalibrate_every: 1,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let (x, y) = toy_set(8);
        let ck = train_base(Architecture::Vgg, &x, &y, &cfg(0.0), "fp").unwrap();
        let init = Architecture::Vgg.build(4);
        for (a, b) in ck.model.layers.iter().zip(&init.layers) {
            match (a, b) {
                (LayerParams::Conv(a), LayerParams::Conv(b)) => {
                    assert!(a.weight.bit_eq(&b.weight));
                    assert_eq!(a.bias, b.bias);
                    assert_eq!(a.bn.gamma, b.bn.gamma);
                }
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (x, y) = toy_set(8);
        let a = train_base(Architecture::Resnet, &x, &y, &cfg(0.01), "fp").unwrap();
        let b = train_base(Architecture::Resnet, &x, &y, &cfg(0.01), "fp").unwrap();
        assert_eq!(
            crate::nets::checkpoint::encode_checkpoint(&a).unwrap(),
            crate::nets::checkpoint::encode_checkpoint(&b).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = toy_set(8);
        let mut c = cfg(1e300);
        c.epochs = 3;
        let r = train_base(Architecture::Vgg, &x, &y, &c, "fp");
        assert!(matches!(r, Err(Error::Training(_))), "{:?}", r.map(|_| ()));
    }

    #[test]
    fn calibration_normalizes_first_block() {
        let (x, _) = toy_set(6);
        let mut m = Architecture::Vgg.build(0);
        calibrate_batchnorm(&mut m, &x).unwrap();
        let c0 = m.layers[0].as_conv().unwrap();
        assert!(c0.bn.var.iter().all(|&v| v > 0.0));
        assert!(calibrate_batchnorm(&mut m, &[]).is_err());
    }
}
