use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ruleedit::evalkit::{
    choose_candidate, evaluate_case, percent_errors_corrected, selection_from_runs, CandidateResult, CandidateRun,
    CleanSet, Correction,
};
use ruleedit::nets::{block_probe, Model};
use ruleedit::rewrite::{edit, finetune_local, EditConfig, GridPoint};
use ruleedit::synthbench::{BenchmarkCase, EvalItem, Exemplar, Mask, RgbImage};
use ruleedit::tensor::{
    conv2d, frobenius_norm, matvec, power_iteration, solve_spd, unfold, vjp, BatchNorm, ConvBlock, Dense, LayerParams,
    ParamGrad, Pool, PoolMode, Tensor,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), uniform(r, shape.iter().product())).unwrap()
}

fn image(r: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_bytes((0..3072).map(|_| r.random::<u8>()).collect()).unwrap()
}

fn random_bn(r: &mut ChaCha8Rng, m: usize) -> BatchNorm {
    let mut bn = BatchNorm::identity(m);
    for o in 0..m {
        bn.gamma[o] = r.random_range(0.5..1.5);
        bn.beta[o] = r.random_range(-0.3..0.3);
        bn.mean[o] = r.random_range(-0.3..0.3);
        bn.var[o] = r.random_range(0.5..2.0);
    }
    bn.eps = 1e-5;
    bn
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normwise relative error between an analytic gradient and central
/// differences of `f` along every coordinate of `at`.
fn fd_error(at: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let fd: Vec<f64> = (0..at.len())
        .map(|i| {
            let (mut a, mut b) = (at.to_vec(), at.to_vec());
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = fd.iter().zip(analytic).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = dot(&fd, &fd).sqrt().max(dot(analytic, analytic).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_is_weight_matrix_times_unfolded_input(
        seed in any::<u64>(), c in 1usize..4, m in 1usize..5, h in 3usize..9, w in 3usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut r = rng(seed);
        let x = tensor(&mut r, &[c, h, w]);
        let block = ConvBlock {
            weight: tensor(&mut r, &[m, c, k, k]),
            bias: uniform(&mut r, m),
            bn: BatchNorm::identity(m),
            stride,
            pad,
            skip_from: None,
        };
        let y = conv2d(&x, &block).unwrap();
        let keys = unfold(&x, k, k, stride, pad).unwrap();
        let locs = keys.shape()[0];
        let n = c * k * k;
        prop_assert_eq!(y.len(), m * locs);
        for o in 0..m {
            for l in 0..locs {
                let mut s = 0.0;
                for i in 0..n {
                    s += block.weight.data()[o * n + i] * keys.row(l)[i];
                }
                prop_assert_eq!((s + block.bias[o]).to_bits(), y.data()[o * locs + l].to_bits());
            }
        }
        prop_assert!(conv2d(&x, &block).unwrap().bit_eq(&y));
    }

    #[test]
    fn conv_block_gradients_match_finite_differences(seed in any::<u64>(), c in 1usize..4, m in 1usize..4, stride in 1usize..3) {
        let mut r = rng(seed);
        let (h, w) = (5, 6);
        let layer = LayerParams::Conv(ConvBlock {
            weight: tensor(&mut r, &[m, c, 3, 3]),
            bias: uniform(&mut r, m),
            bn: random_bn(&mut r, m),
            stride,
            pad: 1,
            skip_from: None,
        });
        let x = tensor(&mut r, &[c, h, w]);
        let cache = layer.forward(&x).unwrap();
        let up = tensor(&mut r, cache.output.shape());
        let (gx, gp) = vjp(&layer, &cache, &up).unwrap();
        let loss = |l: &LayerParams, x: &Tensor| dot(l.forward(x).unwrap().output.data(), up.data());
        let (layer_ref, x_ref, loss_ref) = (&layer, &x, &loss);
        let perturbed = |set: fn(&mut ConvBlock, &[f64])| {
            move |v: &[f64]| {
                let mut l = layer_ref.clone();
                set(l.as_conv_mut().unwrap(), v);
                loss_ref(&l, x_ref)
            }
        };
        let ParamGrad::Conv { weight, bias, gamma, beta } = gp else { panic!("conv gradient expected") };
        let conv = layer.as_conv().unwrap();
        let errs = [
            fd_error(x.data(), gx.data(), |v| loss(&layer, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap())),
            fd_error(conv.weight.data(), weight.data(), perturbed(|b, v| b.weight.data_mut().copy_from_slice(v))),
            fd_error(&conv.bias, &bias, perturbed(|b, v| b.bias.copy_from_slice(v))),
            fd_error(&conv.bn.gamma, &gamma, perturbed(|b, v| b.bn.gamma.copy_from_slice(v))),
            fd_error(&conv.bn.beta, &beta, perturbed(|b, v| b.bn.beta.copy_from_slice(v))),
        ];
        prop_assert!(errs.iter().all(|&e| e < 1e-6), "{:?}", errs);
    }

    #[test]
    fn dense_and_pool_gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..12, k in 1usize..6, max in any::<bool>()) {
        let mut r = rng(seed);
        let dense = LayerParams::Dense(Dense { weight: tensor(&mut r, &[k, n]), bias: uniform(&mut r, k) });
        let x = tensor(&mut r, &[n]);
        let up = tensor(&mut r, &[k]);
        let cache = dense.forward(&x).unwrap();
        let (gx, gp) = vjp(&dense, &cache, &up).unwrap();
        let ParamGrad::Dense { weight, .. } = gp else { panic!("dense gradient expected") };
        let e1 = fd_error(x.data(), gx.data(), |v| dot(dense.forward(&Tensor::from_vec(v.to_vec()).unwrap()).unwrap().output.data(), up.data()));
        let LayerParams::Dense(d) = &dense else { unreachable!() };
        let e2 = fd_error(d.weight.data(), weight.data(), |v| {
            let mut l = d.clone();
            l.weight.data_mut().copy_from_slice(v);
            dot(LayerParams::Dense(l).forward(&x).unwrap().output.data(), up.data())
        });

        let pool = LayerParams::Pool(Pool { mode: if max { PoolMode::Max } else { PoolMode::Avg }, size: 2, stride: 2 });
        let xp = tensor(&mut r, &[2, 4, 6]);
        let cache = pool.forward(&xp).unwrap();
        let upp = tensor(&mut r, cache.output.shape());
        let (gxp, _) = vjp(&pool, &cache, &upp).unwrap();
        let e3 = fd_error(xp.data(), gxp.data(), |v| {
            dot(pool.forward(&Tensor::new(xp.shape().to_vec(), v.to_vec()).unwrap()).unwrap().output.data(), upp.data())
        });
        prop_assert!(e1 < 1e-6 && e2 < 1e-6 && e3 < 1e-6, "{} {} {}", e1, e2, e3);
    }

    #[test]
    fn power_iteration_is_a_unit_eigenvector(seed in any::<u64>(), n in 1usize..16) {
        let mut r = rng(seed);
        let rows = n + r.random_range(0..8);
        let a = uniform(&mut r, rows * n);
        let mut g = vec![0.0; n * n];
        for s in 0..rows {
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] += a[s * n + i] * a[s * n + j];
                }
            }
        }
        let mt = Tensor::new(vec![n, n], g).unwrap();
        let tol = 1e-10;
        let v = power_iteration(&mt, tol, 1_000_000).unwrap();
        let norm = dot(v.data(), v.data()).sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let mv = matvec(&mt, v.data());
        let q = dot(v.data(), &mv);
        let resid: f64 = mv.iter().zip(v.data()).map(|(a, b)| (a - q * b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(resid < tol * frobenius_norm(&mt));
        let first = v.data().iter().find(|x| **x != 0.0).copied().unwrap_or(1.0);
        prop_assert!(first > 0.0);
        prop_assert!(power_iteration(&mt, tol, 1_000_000).unwrap().bit_eq(&v));
    }

    #[test]
    fn percent_corrected_is_bounded(seed in any::<u64>(), n in 0usize..40) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let pre: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let post: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let in_d: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let c = percent_errors_corrected(&pre, &post, &labels, &in_d).unwrap();
        prop_assert!(c.n_pre <= c.d_size && c.n_post <= c.d_size);
        match c.percent() {
            Some(p) => prop_assert!(p <= 100.0 && c.n_pre > 0),
            None => prop_assert_eq!(c.n_pre, 0),
        }
    }

    #[test]
    fn selection_never_violates_the_gate(
        cands in prop::collection::vec((prop::option::of((0usize..20, 0usize..20)), -2.0f64..3.0, any::<bool>()), 0..12),
        threshold in prop_oneof![Just(0.25), 0.0f64..2.0, Just(f64::INFINITY)],
    ) {
        let results: Vec<CandidateResult> = cands
            .iter()
            .enumerate()
            .map(|(i, &(score, drop, failed))| CandidateResult {
                method: "edit".into(),
                layer: 0,
                point: GridPoint::new(1e-3, i),
                validation: score.map(|(p, q)| Correction { d_size: 40, n_pre: p, n_post: q }),
                clean_correct: 0,
                accuracy_drop: drop,
                initial_loss: 1.0,
                final_loss: 1.0,
                error: failed.then(|| "failed".to_string()),
            })
            .collect();
        let admissible: Vec<usize> =
            (0..results.len()).filter(|&i| results[i].error.is_none() && results[i].accuracy_drop <= threshold).collect();
        let score = |i: usize| results[i].validation.and_then(|c| c.percent()).unwrap_or(f64::NEG_INFINITY);
        match choose_candidate(&results, threshold) {
            None => prop_assert!(admissible.is_empty()),
            Some(i) => {
                prop_assert!(admissible.contains(&i));
                prop_assert!(admissible.iter().all(|&j| score(j) < score(i) || (score(j) == score(i) && j >= i)));
            }
        }

        let (base, layer) = block_probe(1, 3, 4, 32, false);
        let mut other = base.clone();
        other.layers[layer].as_conv_mut().unwrap().weight.data_mut()[0] += 1.0;
        let runs = results.iter().map(|c| CandidateRun { result: c.clone(), model: Some(other.clone()) }).collect();
        let sel = selection_from_runs(&base, runs, threshold);
        prop_assert_eq!(sel.is_no_edit(), admissible.is_empty());
        prop_assert_eq!(sel.model == base, admissible.is_empty());
    }
}

fn exemplars(r: &mut ChaCha8Rng, count: usize) -> Vec<Exemplar> {
    (0..count)
        .map(|_| {
            let x = image(r);
            let other = image(r);
            let mask = Mask::from_fn(|row, col| (8..24).contains(&row) && col < 20);
            let mut b = x.bytes().to_vec();
            for p in (0..1024).filter(|&p| mask.contains(p)) {
                for ch in 0..3 {
                    b[ch * 1024 + p] = other.get(ch, p);
                }
            }
            Exemplar {
                x,
                x_prime: RgbImage::from_bytes(b).unwrap(),
                mask,
                label: 0,
                concept: "c".into(),
                style: "s".into(),
                variant: 0,
            }
        })
        .collect()
}

fn prefix_outputs(model: &Model, x: &Tensor, layer: usize) -> Vec<Tensor> {
    let (_, cache) = model.forward_cached(x).unwrap();
    cache.blocks[..layer].iter().map(|b| b.output.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rewrites_leave_earlier_blocks_untouched(seed in any::<u64>(), steps in 1usize..20) {
        let mut r = rng(seed);
        let (model, layer) = block_probe(seed, 3, 4, 32, true);
        prop_assert!(layer > 0);
        let ex = exemplars(&mut r, 2);
        let refs: Vec<Tensor> = (0..3).map(|_| image(&mut r).to_tensor()).collect();
        let edited = edit(&model, &ex, &refs, &EditConfig::new(layer), GridPoint::new(1e-2, steps)).unwrap().model;
        let tuned = finetune_local(&model, &ex, layer, GridPoint::new(1e-2, steps)).unwrap().model;
        prop_assert!(edited != model);
        for _ in 0..3 {
            let x = image(&mut r).to_tensor();
            let before = prefix_outputs(&model, &x, layer);
            for after in [prefix_outputs(&edited, &x, layer), prefix_outputs(&tuned, &x, layer)] {
                prop_assert!(before.iter().zip(&after).all(|(a, b)| a.bit_eq(b)));
            }
        }
        for (i, (a, b)) in model.layers.iter().zip(&edited.layers).enumerate() {
            prop_assert_eq!(a == b, i != layer);
        }
    }

    #[test]
    fn reports_do_not_depend_on_item_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (model, layer) = block_probe(seed ^ 7, 3, 4, 32, false);
        let mut after = model.clone();
        for w in after.layers[layer].as_conv_mut().unwrap().weight.data_mut() {
            *w += r.random_range(-0.3..0.3);
        }
        let mut items = |count: usize, variant: usize| -> Vec<EvalItem> {
            (0..count)
                .map(|k| EvalItem { source: k, label: r.random_range(0..3), variant, clean: image(&mut r), transformed: image(&mut r) })
                .collect()
        };
        let case = BenchmarkCase {
            concept: "c".into(),
            style: "s".into(),
            train_variant: 0,
            target_class: 0,
            exemplars: Vec::new(),
            validation: items(4, 0),
            test: items(12, 0),
            held_out: items(12, 1),
            covariance_ref: Vec::new(),
        };
        let clean = CleanSet {
            images: case.test.iter().map(|i| i.clean.to_tensor()).collect(),
            labels: case.test.iter().map(|i| i.label).collect(),
        };
        let report = evaluate_case(&model, &after, &case, &clean, "m", "c").unwrap();

        let mut shuffled = case.clone();
        shuffled.test.reverse();
        shuffled.held_out.rotate_left(5);
        shuffled.validation.swap(0, 3);
        let mut order: Vec<usize> = (0..clean.images.len()).collect();
        order.rotate_left(3);
        let clean2 = CleanSet {
            images: order.iter().map(|&i| clean.images[i].clone()).collect(),
            labels: order.iter().map(|&i| clean.labels[i]).collect(),
        };
        prop_assert_eq!(report, evaluate_case(&model, &after, &shuffled, &clean2, "m", "c").unwrap());
    }
}

#[test]
fn solve_spd_residual_on_random_systems() {
    let mut r = rng(99);
    for trial in 0..1000 {
        let n = r.random_range(1..=64);
        let rows = 2 * n + r.random_range(0..8);
        let a = uniform(&mut r, rows * n);
        let mut c = vec![0.0; n * n];
        for s in 0..rows {
            for i in 0..n {
                for j in 0..n {
                    c[i * n + j] += a[s * n + i] * a[s * n + j];
                }
            }
        }
        let eps = if trial % 2 == 0 { 0.0 } else { r.random_range(1e-6..1.0) };
        let d = uniform(&mut r, n);
        let ct = Tensor::new(vec![n, n], c.clone()).unwrap();
        let u = solve_spd(&ct, &Tensor::from_vec(d.clone()).unwrap(), eps).unwrap();
        let mut shifted = matvec(&ct, u.data());
        shifted.iter_mut().zip(u.data()).for_each(|(s, ui)| *s += eps * ui);
        let resid: f64 = shifted.iter().zip(&d).map(|(s, di)| (s - di).powi(2)).sum::<f64>().sqrt();
        assert!(resid < 1e-10 * (1.0 + dot(&d, &d).sqrt()), "trial {trial}: n {n}, residual {resid:e}");
    }
}
