//! Networks assembled from editable conv blocks: forward passes with
//! activation caches, backpropagation, base training and checkpoints.

mod checkpoint;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, ModelCheckpoint,
    FORMAT_VERSION, MAGIC,
};
pub(crate) use train::Sgd;
pub use train::{calibrate_batchnorm, train_base, TrainConfig};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    softmax_xent, vjp, BatchNorm, ConvBlock, Dense, LayerCache, LayerParams, ParamGrad, Pool, PoolMode, Tensor,
};

pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];
pub const NUM_CLASSES: usize = 8;

/// Shipped network families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv-pool-conv-pool-conv-conv, global average pool, linear head.
    Vgg,
    /// Stem conv followed by two residual pairs, global average pool, linear head.
    Resnet,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg" => Ok(Self::Vgg),
            "resnet" => Ok(Self::Resnet),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// A network: ordered layers plus the indices of blocks that may be rewritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerParams>,
    pub editable: Vec<usize>,
}

/// Per-layer activations of one image. `blocks[i].output` of a skip block
/// already includes the skip addition.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub blocks: Vec<LayerCache>,
}

/// Activations needed to resume a forward pass at layer `start`.
#[derive(Clone, Debug)]
pub struct PrefixState {
    pub start: usize,
    pub input: Tensor,
    pub(crate) skips: BTreeMap<usize, Tensor>,
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, skip_from: Option<usize>) -> LayerParams {
    let fan_in = (cin * 9) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
    let mut bn = BatchNorm::identity(cout);
    bn.eps = 1e-5;
    LayerParams::Conv(ConvBlock {
        weight: Tensor::from_parts(vec![cout, cin, 3, 3], w),
        bias: vec![0.0; cout],
        bn,
        stride: 1,
        pad: 1,
        skip_from,
    })
}

fn head(rng: &mut ChaCha8Rng, n: usize, k: usize) -> LayerParams {
    let normal = Normal::new(0.0, (1.0 / n as f64).sqrt()).expect("valid std");
    let w: Vec<f64> = (0..k * n).map(|_| normal.sample(rng)).collect();
    LayerParams::Dense(Dense { weight: Tensor::from_parts(vec![k, n], w), bias: vec![0.0; k] })
}

fn max2() -> LayerParams {
    LayerParams::Pool(Pool { mode: PoolMode::Max, size: 2, stride: 2 })
}

/// A small randomized network around one editable conv block, for checks
/// that need a realistic block with non-trivial batch-norm statistics.
/// Plain: `conv, avg-pool, flatten, dense`. Residual: `conv, conv, conv+skip,
/// avg-pool, flatten, dense`. Returns the model and the editable block index.
pub fn block_probe(seed: u64, channels: usize, width: usize, side: usize, residual: bool) -> (Model, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let randomize = |l: &mut LayerParams, rng: &mut ChaCha8Rng| {
        if let LayerParams::Conv(c) = l {
            for o in 0..c.out_channels() {
                c.bias[o] = rng.random_range(-0.1..0.1);
                c.bn.gamma[o] = rng.random_range(0.5..1.5);
                c.bn.beta[o] = rng.random_range(-0.2..0.2);
                c.bn.mean[o] = rng.random_range(-0.2..0.2);
                c.bn.var[o] = rng.random_range(0.5..2.0);
            }
        }
    };
    let mut layers = vec![conv(&mut rng, channels, width, None)];
    if residual {
        layers.push(conv(&mut rng, width, width, None));
        layers.push(conv(&mut rng, width, width, Some(1)));
    }
    for l in &mut layers {
        randomize(l, &mut rng);
    }
    let edit = layers.len() - 1;
    layers.push(LayerParams::Pool(Pool { mode: PoolMode::Avg, size: side, stride: side }));
    layers.push(LayerParams::Flatten);
    layers.push(head(&mut rng, width, 3));
    let model = Model { input_shape: [channels, side, side], num_classes: 3, layers, editable: vec![edit] };
    (model, edit)
}

impl Architecture {
    /// Freshly initialized network (He-normal convs, pass-through batch-norm).
    pub fn build(self, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = LayerParams::Pool(Pool { mode: PoolMode::Avg, size: 8, stride: 8 });
        let (layers, editable) = match self {
            Architecture::Vgg => (
                vec![
                    conv(&mut rng, 3, 8, None),
                    max2(),
                    conv(&mut rng, 8, 16, None),
                    max2(),
                    conv(&mut rng, 16, 16, None),
                    conv(&mut rng, 16, 16, None),
                    gap,
                    LayerParams::Flatten,
                    head(&mut rng, 16, NUM_CLASSES),
                ],
                vec![2, 4, 5],
            ),
            Architecture::Resnet => (
                vec![
                    conv(&mut rng, 3, 12, None),
                    max2(),
                    conv(&mut rng, 12, 12, None),
                    conv(&mut rng, 12, 12, Some(2)),
                    max2(),
                    conv(&mut rng, 12, 12, None),
                    conv(&mut rng, 12, 12, Some(5)),
                    gap,
                    LayerParams::Flatten,
                    head(&mut rng, 12, NUM_CLASSES),
                ],
                vec![0, 3, 6],
            ),
        };
        Model { input_shape: INPUT_SHAPE, num_classes: NUM_CLASSES, layers, editable }
    }
}

impl Model {
    /// Checks that shapes chain to `num_classes` logits and that every
    /// editable index is a conv block outside any residual pair except the
    /// block that closes it.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.to_vec();
        let mut inputs: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(shape.clone());
            shape = match layer {
                LayerParams::Conv(c) => {
                    c.validate()?;
                    let [cin, h, w] = shape3(&shape, i)?;
                    if cin != c.in_channels() {
                        return Err(Error::dim(format!("layer {i}: expects {} channels, gets {cin}", c.in_channels())));
                    }
                    let (kh, kw) = c.kernel();
                    let (oh, ow) = crate::tensor::output_hw(h, w, kh, kw, c.stride, c.pad)?;
                    let out = vec![c.out_channels(), oh, ow];
                    if let Some(s) = c.skip_from {
                        if s >= i || inputs[s] != out {
                            return Err(Error::dim(format!("layer {i}: skip from {s} does not match output {out:?}")));
                        }
                    }
                    out
                }
                LayerParams::Pool(p) => {
                    let [c, h, w] = shape3(&shape, i)?;
                    if p.size > h || p.size > w {
                        return Err(Error::dim(format!("layer {i}: pool window too large")));
                    }
                    let (oh, ow) = crate::tensor::output_hw(h, w, p.size, p.size, p.stride, 0)?;
                    vec![c, oh, ow]
                }
                LayerParams::Flatten => vec![shape.iter().product()],
                LayerParams::Dense(d) => {
                    let n: usize = shape.iter().product();
                    if shape.len() != 1 || d.weight.shape() != [d.bias.len(), n] {
                        return Err(Error::dim(format!("layer {i}: dense shape mismatch")));
                    }
                    vec![d.bias.len()]
                }
            };
        }
        if shape != [self.num_classes] {
            return Err(Error::dim(format!("network emits {shape:?}, expected [{}]", self.num_classes)));
        }
        for &e in &self.editable {
            self.check_editable(e)?;
        }
        Ok(())
    }

    pub fn check_editable(&self, layer: usize) -> Result<&ConvBlock> {
        let c = self
            .layers
            .get(layer)
            .and_then(LayerParams::as_conv)
            .ok_or_else(|| Error::Config(format!("layer {layer} is not a conv block")))?;
        let inside_pair = self.layers.iter().enumerate().any(|(j, l)| match l {
            LayerParams::Conv(cj) => cj.skip_from.is_some_and(|s| s <= layer && layer < j),
            _ => false,
        });
        if inside_pair {
            return Err(Error::Config(format!(
                "layer {layer} sits inside a residual pair; only the block closing the pair is editable"
            )));
        }
        Ok(c)
    }

    pub fn conv(&self, layer: usize) -> Result<&ConvBlock> {
        self.layers
            .get(layer)
            .and_then(LayerParams::as_conv)
            .ok_or_else(|| Error::Config(format!("layer {layer} is not a conv block")))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::dim(format!("input {:?}, model expects {:?}", x.shape(), self.input_shape)));
        }
        Ok(())
    }

    fn skip_sources(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.layers.iter().filter_map(|l| l.as_conv().and_then(|c| c.skip_from)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Logits and per-layer activations for one image.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ActivationCache)> {
        self.check_input(x)?;
        let mut blocks: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut c = layer.forward(&cur)?;
            if let Some(s) = layer.as_conv().and_then(|c| c.skip_from) {
                c.output = c.output.add(&blocks[s].input)?;
            }
            cur = c.output.clone();
            blocks.push(c);
        }
        Ok((cur, ActivationCache { blocks }))
    }

    /// Logits only; keeps just the activations that later skips need.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let state = PrefixState { start: 0, input: x.clone(), skips: BTreeMap::new() };
        self.forward_suffix(&state)
    }

    /// Runs layers `< start` and returns what is needed to continue.
    pub fn forward_prefix(&self, x: &Tensor, start: usize) -> Result<PrefixState> {
        self.check_input(x)?;
        let needed: Vec<usize> = self
            .layers
            .iter()
            .skip(start)
            .filter_map(|l| l.as_conv().and_then(|c| c.skip_from))
            .filter(|&s| s < start)
            .collect();
        let sources = self.skip_sources();
        let mut saved: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate().take(start) {
            if sources.contains(&i) {
                saved.insert(i, cur.clone());
            }
            cur = self.apply_layer(i, layer, &cur, &saved)?;
        }
        saved.retain(|k, _| needed.contains(k));
        Ok(PrefixState { start, input: cur, skips: saved })
    }

    /// Finishes a forward pass from a [`PrefixState`].
    pub fn forward_suffix(&self, state: &PrefixState) -> Result<Tensor> {
        let sources = self.skip_sources();
        let mut saved = state.skips.clone();
        let mut cur = state.input.clone();
        for (i, layer) in self.layers.iter().enumerate().skip(state.start) {
            if sources.contains(&i) {
                saved.insert(i, cur.clone());
            }
            cur = self.apply_layer(i, layer, &cur, &saved)?;
        }
        Ok(cur)
    }

    fn apply_layer(
        &self,
        i: usize,
        layer: &LayerParams,
        x: &Tensor,
        saved: &BTreeMap<usize, Tensor>,
    ) -> Result<Tensor> {
        let out = layer.forward(x)?.output;
        match layer.as_conv().and_then(|c| c.skip_from) {
            Some(s) => {
                let skip =
                    saved.get(&s).ok_or_else(|| Error::CacheMismatch(format!("layer {i}: skip source {s} missing")))?;
                out.add(skip)
            }
            None => Ok(out),
        }
    }

    /// Gradients of all layers `>= stop_at` given the gradient of the loss
    /// with respect to the logits. Layers below `stop_at` get `ParamGrad::None`.
    pub fn backward(&self, cache: &ActivationCache, dlogits: &Tensor, stop_at: usize) -> Result<Gradients> {
        if cache.blocks.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} blocks, model has {}",
                cache.blocks.len(),
                self.layers.len()
            )));
        }
        let n = self.layers.len();
        let mut per_layer = vec![ParamGrad::None; n];
        let mut extra: Vec<Option<Tensor>> = vec![None; n];
        let mut g = dlogits.clone();
        for i in (stop_at..n).rev() {
            let layer = &self.layers[i];
            let (gin, pg) = vjp(layer, &cache.blocks[i], &g)?;
            if let Some(s) = layer.as_conv().and_then(|c| c.skip_from) {
                extra[s] = Some(match extra[s].take() {
                    Some(t) => t.add(&g)?,
                    None => g.clone(),
                });
            }
            per_layer[i] = pg;
            g = match extra[i].take() {
                Some(t) => gin.add(&t)?,
                None => gin,
            };
        }
        Ok(Gradients { per_layer, input: if stop_at == 0 { Some(g) } else { None } })
    }

    /// Cross-entropy loss and gradients for one labeled image.
    pub fn loss_and_grad(&self, x: &Tensor, label: usize, stop_at: usize) -> Result<(f64, Gradients)> {
        let (logits, cache) = self.forward_cached(x)?;
        let (loss, dlogits) = softmax_xent(&logits, label)?;
        Ok((loss, self.backward(&cache, &dlogits, stop_at)?))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.forward(x)?.data()))
    }
}

fn shape3(shape: &[usize], i: usize) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::dim(format!("layer {i}: expected [c, h, w] input, got {s:?}"))),
    }
}

/// Parameter gradients per layer, plus the input gradient when requested.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub per_layer: Vec<ParamGrad>,
    pub input: Option<Tensor>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Which parameters of a layer an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSelection {
    /// Conv weights and bias only.
    ConvWeightBias,
    /// Every trainable parameter (weights, biases, batch-norm affine terms).
    AllTrainable,
}

/// Mutable views of a layer's trainable parameters, in the fixed order
/// `[weight, bias, gamma, beta]` for conv blocks and `[weight, bias]` for dense.
pub(crate) fn param_slices_mut(layer: &mut LayerParams, sel: ParamSelection) -> Vec<&mut [f64]> {
    match layer {
        LayerParams::Conv(c) => {
            let mut v: Vec<&mut [f64]> = vec![c.weight.data_mut(), c.bias.as_mut_slice()];
            if sel == ParamSelection::AllTrainable {
                v.push(c.bn.gamma.as_mut_slice());
                v.push(c.bn.beta.as_mut_slice());
            }
            v
        }
        LayerParams::Dense(d) if sel == ParamSelection::AllTrainable => {
            vec![d.weight.data_mut(), d.bias.as_mut_slice()]
        }
        _ => Vec::new(),
    }
}

/// Gradient views matching [`param_slices_mut`].
pub(crate) fn grad_slices(g: &ParamGrad, sel: ParamSelection) -> Vec<&[f64]> {
    match g {
        ParamGrad::Conv { weight, bias, gamma, beta } => {
            let mut v: Vec<&[f64]> = vec![weight.data(), bias.as_slice()];
            if sel == ParamSelection::AllTrainable {
                v.push(gamma.as_slice());
                v.push(beta.as_slice());
            }
            v
        }
        ParamGrad::Dense { weight, bias } if sel == ParamSelection::AllTrainable => {
            vec![weight.data(), bias.as_slice()]
        }
        _ => Vec::new(),
    }
}

/// Mean cross-entropy and mean gradients over a batch. Per-image work runs in
/// parallel; the reduction is a sequential sum in input order.
pub(crate) fn batch_loss_and_grad(
    model: &Model,
    images: &[&Tensor],
    labels: &[usize],
    stop_at: usize,
) -> Result<(f64, Vec<ParamGrad>)> {
    let results: Vec<Result<(f64, Gradients)>> =
        images.par_iter().zip(labels.par_iter()).map(|(x, &y)| model.loss_and_grad(x, y, stop_at)).collect();
    let mut total = 0.0;
    let mut acc: Option<Vec<ParamGrad>> = None;
    for r in results {
        let (loss, g) = r?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(g.per_layer),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(&g.per_layer) {
                    add_grad(dst, src);
                }
            }
        }
    }
    let n = images.len() as f64;
    let mut acc = acc.ok_or_else(|| Error::Empty("gradient batch".into()))?;
    for g in &mut acc {
        scale_grad(g, 1.0 / n);
    }
    Ok((total / n, acc))
}

fn add_grad(dst: &mut ParamGrad, src: &ParamGrad) {
    let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    match (dst, src) {
        (
            ParamGrad::Conv { weight, bias, gamma, beta },
            ParamGrad::Conv { weight: w2, bias: b2, gamma: g2, beta: be2 },
        ) => {
            add(weight.data_mut(), w2.data());
            add(bias, b2);
            add(gamma, g2);
            add(beta, be2);
        }
        (ParamGrad::Dense { weight, bias }, ParamGrad::Dense { weight: w2, bias: b2 }) => {
            add(weight.data_mut(), w2.data());
            add(bias, b2);
        }
        _ => {}
    }
}

fn scale_grad(g: &mut ParamGrad, s: f64) {
    let sc = |a: &mut [f64]| a.iter_mut().for_each(|x| *x *= s);
    match g {
        ParamGrad::Conv { weight, bias, gamma, beta } => {
            sc(weight.data_mut());
            sc(bias);
            sc(gamma);
            sc(beta);
        }
        ParamGrad::Dense { weight, bias } => {
            sc(weight.data_mut());
            sc(bias);
        }
        ParamGrad::None => {}
    }
}

/// Predictions for a set of images, evaluated in parallel, returned in input order.
pub fn predict_all(model: &Model, images: &[Tensor]) -> Result<Vec<usize>> {
    images.par_iter().map(|x| model.predict(x)).collect()
}

/// Fraction of correctly classified images.
pub fn accuracy(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("accuracy over an empty image set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::dim("image and label counts differ"));
    }
    let preds = predict_all(model, images)?;
    Ok(fraction_correct(&preds, labels))
}

pub fn fraction_correct(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net() -> Model {
        // 1x1 conv with weight 1 per channel, pass-through bn, global mean, identity head
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        Model {
            input_shape: [3, 4, 4],
            num_classes: 3,
            layers: vec![
                LayerParams::Conv(ConvBlock {
                    weight: Tensor::from_parts(vec![3, 3, 1, 1], w),
                    bias: vec![0.0; 3],
                    bn: BatchNorm::identity(3),
                    stride: 1,
                    pad: 0,
                    skip_from: None,
                }),
                LayerParams::Pool(Pool { mode: PoolMode::Avg, size: 4, stride: 4 }),
                LayerParams::Flatten,
                LayerParams::Dense(Dense { weight: Tensor::identity(3), bias: vec![0.0; 3] }),
            ],
            editable: vec![0],
        }
    }

    #[test]
    fn identity_network_reproduces_channel_means() {
        let m = identity_net();
        m.validate().unwrap();
        let data: Vec<f64> = (0..48).map(|i| (i % 16) as f64 + 16.0 * (i / 16) as f64 * 0.5).collect();
        let x = Tensor::new(vec![3, 4, 4], data.clone()).unwrap();
        let (logits, cache) = m.forward_cached(&x).unwrap();
        for c in 0..3 {
            let mean: f64 = data[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((logits.data()[c] - mean).abs() < 1e-12);
        }
        assert_eq!(cache.blocks.len(), m.layers.len());
        assert!(m.forward(&x).unwrap().bit_eq(&logits));
    }

    #[test]
    fn shipped_architectures_validate() {
        for arch in [Architecture::Vgg, Architecture::Resnet] {
            let m = arch.build(3);
            m.validate().unwrap();
            let x = Tensor::zeros(&INPUT_SHAPE);
            let (logits, cache) = m.forward_cached(&x).unwrap();
            assert_eq!(logits.len(), NUM_CLASSES);
            assert_eq!(cache.blocks.len(), m.layers.len());
        }
        assert_eq!(Architecture::Vgg.build(0).editable, vec![2, 4, 5]);
    }

    #[test]
    fn editable_rule_rejects_first_block_of_a_pair() {
        let m = Architecture::Resnet.build(0);
        assert!(m.check_editable(2).is_err());
        assert!(m.check_editable(3).is_ok());
        assert!(m.check_editable(1).is_err());
        let mut bad = m.clone();
        bad.editable.push(5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 0.0]), 1);
        let v = [0.3, -1.0, 2.5, 2.4];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.0).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
    }

    #[test]
    fn residual_output_is_block_plus_skip() {
        let m = Architecture::Resnet.build(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Tensor::new(INPUT_SHAPE.to_vec(), (0..3072).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let (_, cache) = m.forward_cached(&x).unwrap();
        // hand-composed: conv-bn-relu of layer 3 on its input, plus layer 2's input
        let c3 = m.layers[3].as_conv().unwrap();
        let pre = crate::tensor::conv2d(&cache.blocks[3].input, c3).unwrap();
        let path = crate::tensor::bn_relu(&pre, &c3.bn).unwrap();
        let expect = path.add(&cache.blocks[2].input).unwrap();
        assert!(expect.bit_eq(&cache.blocks[3].output));
    }

    #[test]
    fn prefix_suffix_matches_full_forward() {
        let m = Architecture::Resnet.build(2);
        let x = Tensor::new(INPUT_SHAPE.to_vec(), (0..3072).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()).unwrap();
        let full = m.forward(&x).unwrap();
        for start in 0..m.layers.len() {
            let st = m.forward_prefix(&x, start).unwrap();
            assert!(m.forward_suffix(&st).unwrap().bit_eq(&full), "start {start}");
        }
    }

    #[test]
    fn accuracy_edge_cases() {
        let m = identity_net();
        assert!(matches!(accuracy(&m, &[], &[]), Err(Error::Empty(_))));
        // constant-ish inputs: channel 0 brightest -> always class 0
        let x = Tensor::new(vec![3, 4, 4], [vec![1.0; 16], vec![0.0; 32]].concat()).unwrap();
        let imgs = vec![x.clone(), x.clone(), x.clone()];
        assert_eq!(accuracy(&m, &imgs, &[0, 0, 0]).unwrap(), 1.0);
        assert!((accuracy(&m, &imgs, &[0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
