//! Self-check suite: numerical kernels against brute-force oracles, and the
//! structural guarantees of edits, metrics and selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::evalkit::select::selection_from_runs;
use crate::evalkit::{evaluate_case, percent_errors_corrected, CandidateResult, CandidateRun, CleanSet, Correction};
use crate::nets::{block_probe, predict_all, Model};
use crate::rewrite::{concept_covariance, edit, weight_change_spectrum, EditConfig, EditProblem, GridPoint};
use crate::synthbench::{BenchmarkCase, EvalItem, Exemplar, Mask, RgbImage};
use crate::tensor::{conv2d, power_iteration, solve_spd, unfold, BatchNorm, ConvBlock, Tensor};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

/// Runs every check. Deterministic; takes a few seconds.
pub fn run_suite() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Outcome); 10] = [
        ("conv2d matches nested loops", conv_vs_loops),
        ("power iteration matches Jacobi", power_vs_jacobi),
        ("solve_spd residual", spd_residual),
        ("covariance matches double loop", covariance_vs_loops),
        ("errors corrected matches recount", correction_vs_recount),
        ("rank-one edits have rank one", rank_one_edits),
        ("edit gradient matches finite differences", gradient_vs_differences),
        ("identity exemplar is a no-op", identity_no_op),
        ("zero-step edit returns its input", zero_steps),
        ("accuracy gate falls back to no edit", gate_no_edit),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Check { name, passed, detail }
        })
        .collect()
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv_vs_loops() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let (c, h, w, m, k) = (2, 5, 5, 3, 3);
        let x = Tensor::new(vec![c, h, w], random_vec(&mut rng, c * h * w)).map_err(err)?;
        let block = ConvBlock {
            weight: Tensor::new(vec![m, c, k, k], random_vec(&mut rng, m * c * k * k)).map_err(err)?,
            bias: random_vec(&mut rng, m),
            bn: BatchNorm::identity(m),
            stride,
            pad,
            skip_from: None,
        };
        let y = conv2d(&x, &block).map_err(err)?;
        let (_, oh, ow) = y.chw().map_err(err)?;
        for o in 0..m {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = block.bias[o];
                    for ch in 0..c {
                        for p in 0..k {
                            for q in 0..k {
                                let (r, col) = (
                                    (i * stride + p) as isize - pad as isize,
                                    (j * stride + q) as isize - pad as isize,
                                );
                                if r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w {
                                    s += block.weight.data()[((o * c + ch) * k + p) * k + q]
                                        * x.data()[(ch * h + r as usize) * w + col as usize];
                                }
                            }
                        }
                    }
                    worst = worst.max((s - y.data()[(o * oh + i) * ow + j]).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, format!("max abs error {worst:e}"))
}

/// Eigenvalues and eigenvectors (columns of the returned row-major matrix)
/// of a symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn gram(keys: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for r in 0..rows {
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] += keys[r * n + a] * keys[r * n + b] / rows as f64;
            }
        }
    }
    g
}

fn power_vs_jacobi() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 1.0f64;
    for _ in 0..5 {
        let (rows, n) = (20, 8);
        let g = gram(&random_vec(&mut rng, rows * n), rows, n);
        let got = power_iteration(&Tensor::new(vec![n, n], g.clone()).map_err(err)?, 1e-11, 200_000).map_err(err)?;
        let (vals, vecs) = jacobi_eigen(g, n);
        let top = (0..n).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
        let cos: f64 = (0..n).map(|i| vecs[i * n + top] * got.data()[i]).sum();
        worst = worst.min(cos.abs());
    }
    ensure(worst > 1.0 - 1e-8, format!("min |cos| {worst:.15}"))
}

fn spd_residual() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for eps in [0.0, 1e-3] {
        let n = 10;
        let c = gram(&random_vec(&mut rng, 30 * n), 30, n);
        let d = random_vec(&mut rng, n);
        let u = solve_spd(
            &Tensor::new(vec![n, n], c.clone()).map_err(err)?,
            &Tensor::from_vec(d.clone()).map_err(err)?,
            eps,
        )
        .map_err(err)?;
        let mut r2 = 0.0;
        for i in 0..n {
            let ci: f64 = (0..n).map(|j| c[i * n + j] * u.data()[j]).sum::<f64>() + eps * u.data()[i];
            r2 += (ci - d[i]).powi(2);
        }
        let dn: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(r2.sqrt() / dn);
    }
    ensure(worst < 1e-10, format!("max relative residual {worst:e}"))
}

fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_bytes((0..3072).map(|_| rng.random::<u8>()).collect()).expect("3072 bytes")
}

fn covariance_vs_loops() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (model, layer) = block_probe(3, 3, 4, 32, true);
    let images: Vec<Tensor> = (0..3).map(|_| random_image(&mut rng).to_tensor()).collect();
    let got = concept_covariance(&model, layer, &images).map_err(err)?;
    let conv = model.conv(layer).map_err(err)?;
    let n = conv.key_dim();
    let mut sum = vec![0.0; n * n];
    let mut count = 0usize;
    for x in &images {
        let st = model.forward_prefix(x, layer).map_err(err)?;
        let (kh, kw) = conv.kernel();
        let keys = unfold(&st.input, kh, kw, conv.stride, conv.pad).map_err(err)?;
        for r in 0..keys.shape()[0] {
            for a in 0..n {
                for b in 0..n {
                    sum[a * n + b] += keys.row(r)[a] * keys.row(r)[b];
                }
            }
            count += 1;
        }
    }
    let worst = sum.iter().zip(got.data()).map(|(s, g)| (s / count as f64 - g).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-12, format!("max abs error {worst:e} over {count} locations"))
}

fn correction_vs_recount() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut negative, mut undefined) = (0, 0);
    for t in 0..1000 {
        let n = rng.random_range(0..25);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pre: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let post: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let in_d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let c = percent_errors_corrected(&pre, &post, &labels, &in_d).map_err(err)?;
        let d: Vec<usize> = (0..n).filter(|&i| in_d[i]).collect();
        let np = d.iter().filter(|&&i| pre[i] != labels[i]).count();
        let nq = d.iter().filter(|&&i| post[i] != labels[i]).count();
        let want = (np > 0).then(|| 100.0 * (np as f64 - nq as f64) / np as f64);
        if c != (Correction { d_size: d.len(), n_pre: np, n_post: nq }) || c.percent() != want {
            return Err(format!("instance {t}: {c:?} vs recount ({np}, {nq})"));
        }
        negative += usize::from(want.is_some_and(|p| p < 0.0));
        undefined += usize::from(want.is_none());
    }
    Ok(format!("1000 instances, {negative} negative, {undefined} undefined"))
}

/// Exemplars for a 3x32x32 probe; `x'` differs from `x` inside the mask.
fn exemplars(seed: u64, count: usize, identity: bool) -> Vec<Exemplar> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = random_image(&mut rng);
            let mask = Mask::from_fn(|r, c| r < 12 && c >= 8);
            let x_prime = if identity {
                x.clone()
            } else {
                let other = random_image(&mut rng);
                let mut b = x.bytes().to_vec();
                for p in (0..1024).filter(|&p| mask.contains(p)) {
                    for ch in 0..3 {
                        b[ch * 1024 + p] = other.get(ch, p);
                    }
                }
                RgbImage::from_bytes(b).expect("3072 bytes")
            };
            Exemplar { x, x_prime, mask, label: 0, concept: "c".into(), style: "s".into(), variant: 0 }
        })
        .collect()
}

fn references(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4).map(|_| random_image(&mut rng).to_tensor()).collect()
}

fn rank_one_edits() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..6u64 {
        let (model, layer) = block_probe(seed, 3, 4, 32, seed % 2 == 1);
        let cfg = EditConfig::new(layer);
        let out = edit(&model, &exemplars(100 + seed, 2, false), &references(seed), &cfg, GridPoint::new(1e-2, 20))
            .map_err(err)?;
        let [s1, s2] = weight_change_spectrum(&model, &out.model, layer).map_err(err)?;
        if s1 > 0.0 {
            worst = worst.max(s2 / s1);
        }
    }
    ensure(worst < 1e-8, format!("max sigma2/sigma1 {worst:e}"))
}

fn gradient_vs_differences() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..6u64 {
        let (model, layer) = block_probe(200 + seed, 3, 4, 32, seed % 3 == 0);
        let p =
            EditProblem::prepare(&model, &exemplars(300 + seed, 2, false), &references(seed), &EditConfig::new(layer))
                .map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = random_vec(&mut rng, p.dim());
        let (_, g) = p.objective_lambda(&lambda).map_err(err)?;
        let h = 1e-5;
        for o in 0..g.len() {
            let (mut a, mut b) = (lambda.clone(), lambda.clone());
            a[o] += h;
            b[o] -= h;
            let fd = (p.objective_lambda(&a).map_err(err)?.0 - p.objective_lambda(&b).map_err(err)?.0) / (2.0 * h);
            worst = worst.max((fd - g[o]).abs() / g[o].abs().max(fd.abs()).max(1e-9));
        }
    }
    ensure(worst < 1e-6, format!("max relative error {worst:e}"))
}

/// A small case around the probe network: every item uses random images.
fn probe_case(model: &Model, ex: Vec<Exemplar>) -> std::result::Result<(BenchmarkCase, CleanSet), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut items = |count: usize, variant: usize| -> std::result::Result<Vec<EvalItem>, String> {
        (0..count)
            .map(|k| {
                let clean = random_image(&mut rng);
                let transformed = random_image(&mut rng);
                let label = predict_all(model, &[clean.to_tensor()]).map_err(err)?[0];
                // alternate correct and incorrect labels so D is a strict subset
                let label = if k % 3 == 2 { (label + 1) % model.num_classes } else { label };
                Ok(EvalItem { source: k, label, variant, clean, transformed })
            })
            .collect()
    };
    let case = BenchmarkCase {
        concept: "c".into(),
        style: "s".into(),
        train_variant: 0,
        target_class: 0,
        exemplars: ex,
        validation: items(4, 0)?,
        test: items(6, 0)?,
        held_out: items(6, 1)?,
        covariance_ref: vec![random_image(&mut rng)],
    };
    let clean = CleanSet {
        images: case.test.iter().map(|i| i.clean.to_tensor()).collect(),
        labels: case.test.iter().map(|i| i.label).collect(),
    };
    Ok((case, clean))
}

fn identity_no_op() -> Outcome {
    let (model, layer) = block_probe(7, 3, 4, 32, false);
    let out = edit(&model, &exemplars(8, 3, true), &references(9), &EditConfig::new(layer), GridPoint::new(1e-2, 30))
        .map_err(err)?;
    if out.initial_loss >= 1e-18 || out.model != model {
        return Err(format!("initial objective {:e}, model changed: {}", out.initial_loss, out.model != model));
    }
    let (case, clean) = probe_case(&model, exemplars(8, 3, true))?;
    let r = evaluate_case(&model, &out.model, &case, &clean, "edit", "identity").map_err(err)?;
    let nonzero = r.groups.iter().filter(|g| g.correction.percent().is_some_and(|p| p != 0.0)).count();
    ensure(nonzero == 0 && r.accuracy_drop() == 0.0, format!("initial objective {:e}, all groups 0%", out.initial_loss))
}

fn zero_steps() -> Outcome {
    let (model, layer) = block_probe(10, 3, 4, 32, true);
    let out = edit(&model, &exemplars(11, 2, false), &references(12), &EditConfig::new(layer), GridPoint::new(1e-2, 0))
        .map_err(err)?;
    ensure(out.model == model, "model unchanged".into())
}

fn gate_no_edit() -> Outcome {
    let (model, layer) = block_probe(13, 3, 4, 32, false);
    let mut changed = model.clone();
    if let Some(c) = changed.layers[layer].as_conv_mut() {
        c.weight.data_mut()[0] += 1.0;
    }
    let runs: Vec<CandidateRun> = [0.5, 1.0, 3.0]
        .iter()
        .map(|&drop| CandidateRun {
            result: CandidateResult {
                method: "edit".into(),
                layer,
                point: GridPoint::new(1e-3, 10),
                validation: Some(Correction { d_size: 10, n_pre: 10, n_post: 0 }),
                clean_correct: 0,
                accuracy_drop: drop,
                initial_loss: 1.0,
                final_loss: 0.5,
                error: None,
            },
            model: Some(changed.clone()),
        })
        .collect();
    let sel = selection_from_runs(&model, runs, 0.25);
    ensure(sel.is_no_edit() && sel.model == model, "every candidate gated, model returned unchanged".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn jacobi_diagonalizes() {
        let (vals, v) = jacobi_eigen(vec![2.0, 1.0, 1.0, 2.0], 2);
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] - 1.0).abs() < 1e-14 && (sorted[1] - 3.0).abs() < 1e-14);
        let top = if vals[0] > vals[1] { 0 } else { 1 };
        assert!((v[top].abs() - 0.5f64.sqrt()).abs() < 1e-14);
    }
}
