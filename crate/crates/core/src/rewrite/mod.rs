//! Rank-one rewriting of a conv block, its ablations, and the fine-tuning
//! baselines it is compared against.
//!
//! The block at layer `L` maps unfolded receptive fields of its input (keys,
//! `n = in_ch*kh*kw`) to its post-ReLU outputs (values, `m = out_channels`).
//! An edit collects keys from transformed exemplars and values from the
//! originals at the concept locations, then solves for `W' = W + Λ uᵀ` with
//! `u = C⁻¹d`.

mod edit;
mod finetune;

pub use edit::{
    edit, weight_change_spectrum, CovarianceSource, EditConfig, EditNorm, EditOutcome, EditProblem, GridPoint,
    DEFAULT_EDIT_GRID,
};
pub use finetune::{finetune, finetune_global, finetune_local, FinetuneOutcome, FinetuneScope, DEFAULT_FINETUNE_GRID};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::synthbench::{Exemplar, Mask};
use crate::tensor::{output_hw, power_iteration, solve_spd, unfold, Tensor};

/// Area-averages a row-major `sh x sw` binary grid down to `th x tw` and keeps
/// the cells whose covered fraction is at least one half. When no cell
/// qualifies the single best-covered cell is returned (ties go to the lowest
/// row-major index). Cells may straddle source pixels; partial overlaps are
/// weighted by area.
pub fn downsample_grid(bits: &[bool], sh: usize, sw: usize, th: usize, tw: usize) -> Result<Vec<(usize, usize)>> {
    if bits.len() != sh * sw || th == 0 || tw == 0 || th > sh || tw > sw {
        return Err(Error::dim(format!("cannot downsample {sh}x{sw} mask to {th}x{tw}")));
    }
    if !bits.iter().any(|&b| b) {
        return Err(Error::Empty("mask has no pixels set".into()));
    }
    // overlap of source interval [p, p+1) with target cell t, in source units
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|t| {
                let (lo, hi) = (t as f64 * scale, (t + 1) as f64 * scale);
                (lo.floor() as usize..(hi.ceil() as usize).min(src))
                    .map(|p| (p, (hi.min(p as f64 + 1.0) - lo.max(p as f64)) / scale))
                    .filter(|&(_, w)| w > 0.0)
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(sh, th), weights(sw, tw));
    let mut avg = vec![0.0; th * tw];
    for i in 0..th {
        for j in 0..tw {
            let mut s = 0.0;
            for &(p, a) in &wy[i] {
                for &(q, b) in &wx[j] {
                    if bits[p * sw + q] {
                        s += a * b;
                    }
                }
            }
            avg[i * tw + j] = s;
        }
    }
    let picked: Vec<(usize, usize)> = (0..th * tw).filter(|&c| avg[c] >= 0.5).map(|c| (c / tw, c % tw)).collect();
    if !picked.is_empty() {
        return Ok(picked);
    }
    let best = crate::nets::argmax(&avg);
    Ok(vec![(best / tw, best % tw)])
}

/// [`downsample_grid`] for a 32x32 concept mask.
pub fn downsample_mask(mask: &Mask, th: usize, tw: usize) -> Result<Vec<(usize, usize)>> {
    let bits: Vec<bool> = mask.to_bytes().into_iter().map(|b| b == 1).collect();
    downsample_grid(&bits, mask.side(), mask.side(), th, tw)
}

/// Input activation shape of layer `L` and its output spatial size.
pub fn block_geometry(model: &Model, layer: usize) -> Result<([usize; 3], (usize, usize))> {
    let conv = model.conv(layer)?;
    let probe = model.forward_prefix(&Tensor::zeros(&model.input_shape), layer)?;
    let (c, h, w) = probe.input.chw()?;
    let (kh, kw) = conv.kernel();
    Ok(([c, h, w], output_hw(h, w, kh, kw, conv.stride, conv.pad)?))
}

fn check_locations(locs: &[(usize, usize)], oh: usize, ow: usize) -> Result<()> {
    match locs.iter().find(|&&(i, j)| i >= oh || j >= ow) {
        Some(&(i, j)) => Err(Error::dim(format!("location ({i}, {j}) outside {oh}x{ow} output"))),
        None => Ok(()),
    }
}

/// Activations of one image around block `L`.
struct BlockTrace {
    /// Unfolded input, `[locs, n]`.
    keys: Tensor,
    /// Conv output before batch-norm, `[m, oh, ow]`.
    pre: Tensor,
    /// Block output including any skip addition, `[m, oh, ow]`.
    output: Tensor,
    /// Skip tensor added after the ReLU, if the block closes a residual pair.
    skip: Option<Tensor>,
}

fn trace_block(model: &Model, layer: usize, x: &Tensor) -> Result<BlockTrace> {
    let conv = model.conv(layer)?;
    let state = model.forward_prefix(x, layer)?;
    let cache = model.layers[layer].forward(&state.input)?;
    let skip = match conv.skip_from {
        Some(s) => Some(
            state
                .skips
                .get(&s)
                .cloned()
                .ok_or_else(|| Error::CacheMismatch(format!("skip source {s} of layer {layer} missing")))?,
        ),
        None => None,
    };
    let output = match &skip {
        Some(t) => cache.output.add(t)?,
        None => cache.output,
    };
    let (kh, kw) = conv.kernel();
    let pre = cache.pre_activation.ok_or_else(|| Error::CacheMismatch("conv cache without pre-activation".into()))?;
    Ok(BlockTrace { keys: unfold(&state.input, kh, kw, conv.stride, conv.pad)?, pre, output, skip })
}

fn gather_channels(t: &Tensor, locs: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (m, h, w) = (s[0], s[1], s[2]);
    locs.iter().map(|&(i, j)| (0..m).map(|o| t.data()[o * h * w + i * w + j]).collect()).collect()
}

/// Keys of `x_prime` at locations `S` of layer `L`'s output: rows of the
/// unfolded input activation, `[|S|, n]`.
pub fn extract_keys(model: &Model, layer: usize, x_prime: &Tensor, locs: &[(usize, usize)]) -> Result<Tensor> {
    let (_, (oh, ow)) = block_geometry(model, layer)?;
    check_locations(locs, oh, ow)?;
    let t = trace_block(model, layer, x_prime)?;
    let n = t.keys.shape()[1];
    let data = locs.iter().flat_map(|&(i, j)| t.keys.row(i * ow + j).to_vec()).collect();
    Ok(Tensor::from_parts(vec![locs.len(), n], data))
}

/// Block outputs of `x` at locations `S` of layer `L`, `[|S|, m]`.
pub fn extract_values(model: &Model, layer: usize, x: &Tensor, locs: &[(usize, usize)]) -> Result<Tensor> {
    let (_, (oh, ow)) = block_geometry(model, layer)?;
    check_locations(locs, oh, ow)?;
    let t = trace_block(model, layer, x)?;
    let m = t.output.shape()[0];
    Ok(Tensor::from_parts(vec![locs.len(), m], gather_channels(&t.output, locs).concat()))
}

/// Key/value pairs gathered from a set of exemplars, together with what the
/// edit objective needs to evaluate the block at the transformed keys.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValueSet {
    /// `[|S|, n]` keys from the transformed images.
    pub keys: Tensor,
    /// `[|S|, m]` target values from the original images.
    pub values: Tensor,
    /// `(exemplar, i, j)` for every row.
    pub locations: Vec<(usize, usize, usize)>,
    /// `[|S|, m]` pre-normalization conv outputs of the transformed images.
    pub base: Tensor,
    /// `[|S|, m]` skip terms of the transformed images, for residual blocks.
    pub skip: Option<Tensor>,
}

impl KeyValueSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Builds `S` as the union of each exemplar's concept locations (or every
/// location when `use_mask` is off) and collects keys and values there.
pub fn collect_key_values(model: &Model, layer: usize, exemplars: &[Exemplar], use_mask: bool) -> Result<KeyValueSet> {
    if exemplars.is_empty() {
        return Err(Error::Empty("no exemplars".into()));
    }
    let (_, (oh, ow)) = block_geometry(model, layer)?;
    let per: Vec<Result<_>> = exemplars
        .par_iter()
        .map(|e| {
            let locs = if use_mask {
                downsample_mask(&e.mask, oh, ow)?
            } else {
                (0..oh * ow).map(|c| (c / ow, c % ow)).collect()
            };
            let orig = trace_block(model, layer, &e.x.to_tensor())?;
            let tr = trace_block(model, layer, &e.x_prime.to_tensor())?;
            let keys: Vec<Vec<f64>> = locs.iter().map(|&(i, j)| tr.keys.row(i * ow + j).to_vec()).collect();
            let values = gather_channels(&orig.output, &locs);
            let base = gather_channels(&tr.pre, &locs);
            let skip = tr.skip.as_ref().map(|s| gather_channels(s, &locs));
            Ok((locs, keys, values, base, skip))
        })
        .collect();
    let conv = model.conv(layer)?;
    let (n, m) = (conv.key_dim(), conv.out_channels());
    let (mut locations, mut keys, mut values, mut base, mut skip) = (vec![], vec![], vec![], vec![], vec![]);
    for (e, r) in per.into_iter().enumerate() {
        let (locs, k, v, b, s) = r?;
        locations.extend(locs.iter().map(|&(i, j)| (e, i, j)));
        keys.extend(k.concat());
        values.extend(v.concat());
        base.extend(b.concat());
        if let Some(s) = s {
            skip.extend(s.concat());
        }
    }
    let rows = locations.len();
    Ok(KeyValueSet {
        keys: Tensor::from_parts(vec![rows, n], keys),
        values: Tensor::from_parts(vec![rows, m], values),
        base: Tensor::from_parts(vec![rows, m], base),
        skip: conv.skip_from.map(|_| Tensor::from_parts(vec![rows, m], skip)),
        locations,
    })
}

/// Second-moment matrix of layer-`L` keys over every location of every
/// reference image: `C = (1/N) Σ k kᵀ`.
pub fn concept_covariance(model: &Model, layer: usize, images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Empty("covariance reference set".into()));
    }
    let conv = model.conv(layer)?;
    let (kh, kw) = conv.kernel();
    let n = conv.key_dim();
    let partial: Vec<Result<(Vec<f64>, usize)>> = images
        .par_iter()
        .map(|x| {
            let state = model.forward_prefix(x, layer)?;
            let keys = unfold(&state.input, kh, kw, conv.stride, conv.pad)?;
            let locs = keys.shape()[0];
            let mut acc = vec![0.0; n * n];
            for r in 0..locs {
                let k = keys.row(r);
                for a in 0..n {
                    if k[a] == 0.0 {
                        continue;
                    }
                    let row = &mut acc[a * n..(a + 1) * n];
                    for (dst, &kb) in row.iter_mut().zip(k) {
                        *dst += k[a] * kb;
                    }
                }
            }
            Ok((acc, locs))
        })
        .collect();
    let mut total = vec![0.0; n * n];
    let mut count = 0usize;
    for p in partial {
        let (acc, locs) = p?;
        total.iter_mut().zip(&acc).for_each(|(t, a)| *t += a);
        count += locs;
    }
    let inv = 1.0 / count as f64;
    // symmetrize exactly; the accumulation already is up to rounding
    let mut c = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            c[a * n + b] = 0.5 * (total[a * n + b] + total[b * n + a]) * inv;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], c))
}

/// Unit top eigenvector of `(1/|S|) Σ k kᵀ` over the key rows, with the
/// sign fixed so that its first nonzero component is positive.
pub fn exemplar_direction(keys: &Tensor) -> Result<Tensor> {
    if keys.ndim() != 2 || keys.shape()[0] == 0 {
        return Err(Error::Empty("exemplar keys".into()));
    }
    let (rows, n) = (keys.shape()[0], keys.shape()[1]);
    let mut m = vec![0.0; n * n];
    for r in 0..rows {
        let k = keys.row(r);
        for a in 0..n {
            for b in 0..n {
                m[a * n + b] += k[a] * k[b];
            }
        }
    }
    m.iter_mut().for_each(|v| *v /= rows as f64);
    power_iteration(&Tensor::from_parts(vec![n, n], m), 1e-11, 200_000)
}

/// The key-space direction of a rank-one edit.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub d: Tensor,
    pub c: Tensor,
    pub u: Tensor,
    pub eps: f64,
}

impl EditDirection {
    /// `u` solves `(C + eps I) u = d` with `eps = damping * trace(C) / n`.
    pub fn new(d: Tensor, c: Tensor, damping: f64) -> Result<Self> {
        let n = d.len();
        if c.shape() != [n, n] {
            return Err(Error::dim(format!("covariance {:?} does not match direction length {n}", c.shape())));
        }
        let trace: f64 = (0..n).map(|i| c.at2(i, i)).sum();
        let eps = damping * trace / n as f64;
        let u = solve_spd(&c, &d, eps)?;
        Ok(Self { d, c, u, eps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Architecture;

    fn grid(side: usize, f: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        (0..side * side).map(|p| f(p / side, p % side)).collect()
    }

    #[test]
    fn downsample_examples() {
        let all = downsample_grid(&grid(8, |_, _| true), 8, 8, 4, 4).unwrap();
        assert_eq!(all.len(), 16);
        let one = downsample_grid(&grid(8, |r, c| r == 0 && c == 0), 8, 8, 4, 4).unwrap();
        assert_eq!(one, vec![(0, 0)]);
        let half = downsample_grid(&grid(8, |_, c| c < 4), 8, 8, 4, 4).unwrap();
        assert_eq!(half, (0..4).flat_map(|i| (0..2).map(move |j| (i, j))).collect::<Vec<_>>());
        assert!(downsample_grid(&grid(8, |_, _| false), 8, 8, 4, 4).is_err());
        // non-integer ratio: 3 of 5 source columns set, 2 target columns
        let odd = downsample_grid(&grid(5, |_, c| c < 3), 5, 5, 1, 2).unwrap();
        assert_eq!(odd, vec![(0, 0)]);
    }

    #[test]
    fn first_layer_keys_are_unfolded_pixels() {
        let model = Architecture::Vgg.build(1);
        let x = Tensor::new(vec![3, 32, 32], (0..3072).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
        let locs = [(0, 0), (5, 9), (31, 31)];
        let keys = extract_keys(&model, 0, &x, &locs).unwrap();
        let u = unfold(&x, 3, 3, 1, 1).unwrap();
        for (r, &(i, j)) in locs.iter().enumerate() {
            assert_eq!(keys.row(r), u.row(i * 32 + j));
        }
        assert!(extract_keys(&model, 0, &x, &[(32, 0)]).is_err());
    }

    #[test]
    fn residual_values_include_skip() {
        let model = Architecture::Resnet.build(2);
        let x = Tensor::new(vec![3, 32, 32], (0..3072).map(|i| ((i * 7) % 31) as f64 / 31.0).collect()).unwrap();
        let (_, cache) = model.forward_cached(&x).unwrap();
        let v = extract_values(&model, 3, &x, &[(2, 3)]).unwrap();
        let out = &cache.blocks[3].output;
        for o in 0..12 {
            assert_eq!(v.at2(0, o), out.data()[o * 256 + 2 * 16 + 3]);
        }
        let s = model.conv(3).unwrap().skip_from.unwrap();
        let conv_only = model.layers[3].forward(&cache.blocks[3].input).unwrap().output;
        assert_eq!(v.at2(0, 0), conv_only.data()[2 * 16 + 3] + cache.blocks[s].input.data()[2 * 16 + 3]);
    }

    #[test]
    fn covariance_small_cases() {
        // one location, key [1, 0]: a 1x1 conv over a 2x1x1 input
        let (mut model, _) = crate::nets::block_probe(0, 2, 2, 1, false);
        if let crate::tensor::LayerParams::Conv(c) = &mut model.layers[0] {
            c.weight = Tensor::zeros(&[2, 2, 1, 1]);
            c.pad = 0;
        }
        let x = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let c = concept_covariance(&model, 0, &[x]).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0]);
        let e1 = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        let c = concept_covariance(&model, 0, &[e1, e2]).unwrap();
        assert_eq!(c.data(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(concept_covariance(&model, 0, &[]).is_err());
    }

    #[test]
    fn direction_examples() {
        let k = Tensor::new(vec![3, 2], vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
        let d = exemplar_direction(&k).unwrap();
        assert!((d.data()[0] - 0.6).abs() < 1e-12 && (d.data()[1] - 0.8).abs() < 1e-12);
        let mut rows = vec![3.0, 0.0].repeat(5);
        rows.extend([0.0, 1.0]);
        let d = exemplar_direction(&Tensor::new(vec![6, 2], rows).unwrap()).unwrap();
        assert!((d.data()[0] - 1.0).abs() < 1e-12 && d.data()[1].abs() < 1e-12);
        assert!(exemplar_direction(&Tensor::zeros(&[2, 2])).is_err());
    }
}
