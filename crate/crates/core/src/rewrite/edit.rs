use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{collect_key_values, concept_covariance, exemplar_direction, EditDirection, KeyValueSet};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::synthbench::Exemplar;
use crate::tensor::{bn_apply, singular_values, BatchNorm, LayerParams, Tensor};

/// One learning-rate / step-count pair of an optimizer grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub lr: f64,
    pub steps: usize,
}

impl GridPoint {
    pub const fn new(lr: f64, steps: usize) -> Self {
        Self { lr, steps }
    }

    /// Step count divided by `divisor`, never below one step unless it was zero.
    pub fn scaled(self, divisor: usize) -> Self {
        let steps = if self.steps == 0 { 0 } else { (self.steps / divisor.max(1)).max(1) };
        Self { lr: self.lr, steps }
    }
}

/// Adam learning rates and step counts tried for every edit.
pub const DEFAULT_EDIT_GRID: [GridPoint; 5] = [
    GridPoint::new(1e-3, 10_000),
    GridPoint::new(1e-4, 20_000),
    GridPoint::new(1e-5, 40_000),
    GridPoint::new(1e-6, 80_000),
    GridPoint::new(1e-7, 80_000),
];

/// Distance between target values and block outputs at each location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditNorm {
    /// Mean squared Euclidean distance.
    #[default]
    Squared,
    /// Mean (unsquared) Euclidean distance; the gradient is taken as zero at
    /// locations that already match exactly.
    Euclidean,
}

/// Where the key second-moment matrix `C` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Keys of the reference images supplied with the case.
    #[default]
    ConceptImages,
    /// `C = I`, so the edit direction is the exemplar direction itself.
    Identity,
}

fn default_grid() -> Vec<GridPoint> {
    DEFAULT_EDIT_GRID.to_vec()
}
fn yes() -> bool {
    true
}
fn default_damping() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub layer: usize,
    #[serde(default = "default_grid")]
    pub grid: Vec<GridPoint>,
    /// Restrict the constraints to the concept locations.
    #[serde(default = "yes")]
    pub use_mask: bool,
    /// Constrain the update to `Λ uᵀ`; otherwise optimize the full `ΔW`.
    #[serde(default = "yes")]
    pub rank_one: bool,
    /// Ridge added to `C` as a fraction of its mean eigenvalue.
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub covariance: CovarianceSource,
    #[serde(default)]
    pub norm: EditNorm,
}

impl EditConfig {
    pub fn new(layer: usize) -> Self {
        Self {
            layer,
            grid: default_grid(),
            use_mask: true,
            rank_one: true,
            damping: default_damping(),
            covariance: CovarianceSource::default(),
            norm: EditNorm::default(),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("edit grid is empty".into()));
        }
        if self.grid.iter().any(|p| !(p.lr.is_finite() && p.lr >= 0.0)) {
            return Err(Error::Config("edit learning rates must be finite and non-negative".into()));
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(Error::Config("edit damping must be finite and non-negative".into()));
        }
        if !model.editable.contains(&self.layer) {
            return Err(Error::Config(format!(
                "layer {} is not editable (editable: {:?})",
                self.layer, model.editable
            )));
        }
        model.check_editable(self.layer)?;
        Ok(())
    }
}

/// Result of one edit run.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub model: Model,
    pub config: EditConfig,
    pub point: GridPoint,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, objective)` samples, always including step 0 and the last step.
    pub loss_trace: Vec<(usize, f64)>,
    /// Two largest singular values of `W' - W`.
    pub sigma: [f64; 2],
    pub wall_clock: Duration,
}

/// Everything about an edit that does not depend on the grid point: the
/// key/value set, the edit direction and the frozen block parameters.
#[derive(Clone, Debug)]
pub struct EditProblem {
    pub config: EditConfig,
    pub kv: KeyValueSet,
    /// Present for rank-one edits.
    pub direction: Option<EditDirection>,
    /// `u · k` for every key row.
    proj: Vec<f64>,
    /// Per-parameter step units for the optimizer (see [`EditProblem::step_units`]).
    units: Vec<f64>,
    bn: BatchNorm,
    m: usize,
    n: usize,
}

impl EditProblem {
    /// Extracts keys and values with the current weights and, for rank-one
    /// edits, computes `d`, `C` (from `reference`) and `u`.
    pub fn prepare(model: &Model, exemplars: &[Exemplar], reference: &[Tensor], config: &EditConfig) -> Result<Self> {
        config.validate(model)?;
        let conv = model.conv(config.layer)?;
        let (m, n) = (conv.out_channels(), conv.key_dim());
        let kv = collect_key_values(model, config.layer, exemplars, config.use_mask)?;
        let direction = if config.rank_one {
            let d = exemplar_direction(&kv.keys)?;
            let c = match config.covariance {
                CovarianceSource::ConceptImages => concept_covariance(model, config.layer, reference)?,
                CovarianceSource::Identity => Tensor::identity(n),
            };
            Some(EditDirection::new(d, c, config.damping)?)
        } else {
            None
        };
        let proj = match &direction {
            Some(dir) => (0..kv.len()).map(|s| dot(kv.keys.row(s), dir.u.data())).collect(),
            None => Vec::new(),
        };
        let rms = |v: &mut dyn Iterator<Item = f64>| {
            let (sum, count) = v.fold((0.0, 0usize), |(s, c), x| (s + x * x, c + 1));
            let r = (sum / count.max(1) as f64).sqrt();
            if r.is_finite() && r > 0.0 {
                r
            } else {
                1.0
            }
        };
        let bn = conv.bn.clone();
        let units = if config.rank_one {
            let rho = rms(&mut proj.iter().copied());
            (0..m).map(|o| 1.0 / (bn.inv_std(o) * rho)).collect()
        } else {
            let rho = rms(&mut (0..kv.len()).map(|s| dot(kv.keys.row(s), kv.keys.row(s)).sqrt()));
            (0..m * n).map(|i| 1.0 / (bn.inv_std(i / n) * rho)).collect()
        };
        Ok(Self { config: config.clone(), kv, direction, proj, units, bn, m, n })
    }

    /// Scale between the optimizer's variables and `Λ` (or `ΔW`): Adam runs
    /// on `θ` with `Λ = units ∘ θ`. A unit step in `θ_o` shifts channel `o`'s
    /// batch-normalized pre-activation by about one at a typical exemplar
    /// location, so learning rates mean the same thing at every layer. The
    /// reachable set of updates is unchanged.
    pub fn step_units(&self) -> &[f64] {
        &self.units
    }

    /// Number of free parameters: `m` for rank-one edits, `m * n` otherwise.
    pub fn dim(&self) -> usize {
        if self.config.rank_one {
            self.m
        } else {
            self.m * self.n
        }
    }

    /// Objective and its gradient with respect to the pre-normalization
    /// outputs `y` (`[|S|, m]`).
    fn loss_and_dy(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let (rows, m) = (self.kv.len(), self.m);
        let values = self.kv.values.data();
        let skip = self.kv.skip.as_ref().map(Tensor::data);
        let mut loss = 0.0;
        let mut dy = vec![0.0; rows * m];
        let mut r = vec![0.0; m];
        for s in 0..rows {
            for o in 0..m {
                let idx = s * m + o;
                let mut f = bn_apply(&self.bn, o, y[idx]).max(0.0);
                if let Some(sk) = skip {
                    f += sk[idx];
                }
                r[o] = f - values[idx];
            }
            let sq: f64 = r.iter().map(|v| v * v).sum();
            let (contrib, scale) = match self.config.norm {
                EditNorm::Squared => (sq, 2.0),
                EditNorm::Euclidean => {
                    let norm = sq.sqrt();
                    (norm, if norm > 0.0 { 1.0 / norm } else { 0.0 })
                }
            };
            loss += contrib;
            for o in 0..m {
                let idx = s * m + o;
                if bn_apply(&self.bn, o, y[idx]) > 0.0 {
                    dy[idx] = scale * r[o] * self.bn.gamma[o] * self.bn.inv_std(o);
                }
            }
        }
        let inv = 1.0 / rows as f64;
        dy.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, dy)
    }

    /// Objective and gradient with respect to `Λ` for a rank-one edit.
    pub fn objective_lambda(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>)> {
        if self.direction.is_none() || lambda.len() != self.m {
            return Err(Error::dim(format!("Λ needs {} entries on a rank-one problem", self.m)));
        }
        let m = self.m;
        let base = self.kv.base.data();
        let y: Vec<f64> = (0..self.kv.len() * m).map(|i| base[i] + lambda[i % m] * self.proj[i / m]).collect();
        let (loss, dy) = self.loss_and_dy(&y);
        let mut g = vec![0.0; m];
        for (s, &a) in self.proj.iter().enumerate() {
            for o in 0..m {
                g[o] += dy[s * m + o] * a;
            }
        }
        Ok((loss, g))
    }

    /// Objective and gradient with respect to an unconstrained `ΔW`
    /// (`[m, n]`, row-major). For a rank-one `ΔW = Λ uᵀ` the `Λ` gradient is
    /// this gradient applied to `u`.
    pub fn objective_delta(&self, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (m, n) = (self.m, self.n);
        if delta.len() != m * n {
            return Err(Error::dim(format!("ΔW needs {} entries", m * n)));
        }
        let rows = self.kv.len();
        let base = self.kv.base.data();
        let mut y = vec![0.0; rows * m];
        for s in 0..rows {
            let k = self.kv.keys.row(s);
            for o in 0..m {
                y[s * m + o] = base[s * m + o] + dot(&delta[o * n..(o + 1) * n], k);
            }
        }
        let (loss, dy) = self.loss_and_dy(&y);
        let mut g = vec![0.0; m * n];
        for s in 0..rows {
            let k = self.kv.keys.row(s);
            for o in 0..m {
                let d = dy[s * m + o];
                if d != 0.0 {
                    g[o * n..(o + 1) * n].iter_mut().zip(k).for_each(|(gi, &ki)| *gi += d * ki);
                }
            }
        }
        Ok((loss, g))
    }

    fn objective(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if self.config.rank_one {
            self.objective_lambda(theta)
        } else {
            self.objective_delta(theta)
        }
    }

    /// `ΔW` (`[m, n]`) for a parameter vector.
    pub fn delta(&self, theta: &[f64]) -> Vec<f64> {
        match &self.direction {
            Some(dir) => {
                let u = dir.u.data();
                theta.iter().flat_map(|&l| u.iter().map(move |&ui| l * ui)).collect()
            }
            None => theta.to_vec(),
        }
    }

    /// Adam on `θ` (see [`EditProblem::step_units`]) from `Λ = 0` (or
    /// `ΔW = 0`) at a fixed learning rate, then writes the
    /// update into a copy of `model`. Only layer `L`'s conv weights change.
    pub fn run(&self, model: &Model, point: GridPoint) -> Result<EditOutcome> {
        let start = Instant::now();
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let dim = self.dim();
        let mut theta = vec![0.0; dim];
        let (mut mom, mut vel) = (vec![0.0; dim], vec![0.0; dim]);
        let every = (point.steps / 200).max(1);
        let mut trace = Vec::new();
        let to_params = |theta: &[f64]| -> Vec<f64> { theta.iter().zip(&self.units).map(|(t, u)| t * u).collect() };
        let (initial_loss, _) = self.objective(&to_params(&theta))?;
        for t in 1..=point.steps {
            let (loss, mut g) = self.objective(&to_params(&theta))?;
            g.iter_mut().zip(&self.units).for_each(|(gi, u)| *gi *= u);
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Optimization(format!("non-finite edit objective at step {t}")));
            }
            if (t - 1) % every == 0 {
                trace.push((t - 1, loss));
            }
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            for i in 0..dim {
                mom[i] = b1 * mom[i] + (1.0 - b1) * g[i];
                vel[i] = b2 * vel[i] + (1.0 - b2) * g[i] * g[i];
                theta[i] -= point.lr * (mom[i] / c1) / ((vel[i] / c2).sqrt() + eps);
            }
        }
        let params = to_params(&theta);
        let (final_loss, _) = self.objective(&params)?;
        if !final_loss.is_finite() {
            return Err(Error::Optimization("non-finite edit objective after the last step".into()));
        }
        trace.push((point.steps, final_loss));

        let mut out = model.clone();
        let delta = self.delta(&params);
        if let Some(LayerParams::Conv(c)) = out.layers.get_mut(self.config.layer) {
            for (w, &d) in c.weight.data_mut().iter_mut().zip(&delta) {
                // zero entries leave the stored bits alone
                if d != 0.0 {
                    *w += d;
                }
            }
        }
        let sigma = weight_change_spectrum(model, &out, self.config.layer)?;
        Ok(EditOutcome {
            model: out,
            config: self.config.clone(),
            point,
            initial_loss,
            final_loss,
            loss_trace: trace,
            sigma,
            wall_clock: start.elapsed(),
        })
    }
}

/// Two largest singular values of the change in layer `L`'s weight matrix.
pub fn weight_change_spectrum(before: &Model, after: &Model, layer: usize) -> Result<[f64; 2]> {
    let (a, b) = (before.conv(layer)?, after.conv(layer)?);
    let (m, n) = (a.out_channels(), a.key_dim());
    let diff: Vec<f64> = b.weight.data().iter().zip(a.weight.data()).map(|(x, y)| x - y).collect();
    let sv = singular_values(&Tensor::from_parts(vec![m, n], diff))?;
    Ok([sv.first().copied().unwrap_or(0.0), sv.get(1).copied().unwrap_or(0.0)])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Prepares and runs a single edit at one grid point.
pub fn edit(
    model: &Model,
    exemplars: &[Exemplar],
    reference: &[Tensor],
    config: &EditConfig,
    point: GridPoint,
) -> Result<EditOutcome> {
    EditProblem::prepare(model, exemplars, reference, config)?.run(model, point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::block_probe;
    use crate::synthbench::{Mask, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
        RgbImage::from_bytes((0..3072).map(|_| rng.random::<u8>()).collect()).unwrap()
    }

    /// Exemplars for a 3x32x32 probe; x' differs from x inside the mask.
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
                    for p in 0..1024 {
                        if mask.contains(p) {
                            for ch in 0..3 {
                                b[ch * 1024 + p] = other.get(ch, p);
                            }
                        }
                    }
                    RgbImage::from_bytes(b).unwrap()
                };
                Exemplar { x, x_prime, mask, label: 0, concept: "c".into(), style: "s".into(), variant: 0 }
            })
            .collect()
    }

    fn refs(seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4).map(|_| random_image(&mut rng).to_tensor()).collect()
    }

    fn probe(residual: bool) -> (Model, EditConfig) {
        let (model, layer) = block_probe(5, 3, 4, 32, residual);
        let mut cfg = EditConfig::new(layer);
        cfg.grid = vec![GridPoint::new(1e-2, 60)];
        (model, cfg)
    }

    #[test]
    fn identity_exemplar_is_a_no_op() {
        for residual in [false, true] {
            let (model, cfg) = probe(residual);
            let out = edit(&model, &exemplars(1, 2, true), &refs(2), &cfg, cfg.grid[0]).unwrap();
            assert!(out.initial_loss < 1e-18);
            assert_eq!(out.model, model);
            assert_eq!(out.sigma, [0.0, 0.0]);
        }
    }

    #[test]
    fn zero_steps_returns_input() {
        let (model, cfg) = probe(false);
        let out = edit(&model, &exemplars(3, 2, false), &refs(2), &cfg, GridPoint::new(1e-2, 0)).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn rank_one_edit_reduces_loss_and_stays_rank_one() {
        for residual in [false, true] {
            let (model, cfg) = probe(residual);
            let out = edit(&model, &exemplars(4, 3, false), &refs(2), &cfg, cfg.grid[0]).unwrap();
            assert!(out.final_loss < out.initial_loss, "{} !< {}", out.final_loss, out.initial_loss);
            assert!(out.sigma[0] > 0.0 && out.sigma[1] < 1e-8 * out.sigma[0], "{:?}", out.sigma);
            // only layer L's weights moved
            for (i, (a, b)) in model.layers.iter().zip(&out.model.layers).enumerate() {
                if i != cfg.layer {
                    assert_eq!(a, b);
                } else {
                    let (ca, cb) = (a.as_conv().unwrap(), b.as_conv().unwrap());
                    assert_eq!((&ca.bias, &ca.bn), (&cb.bias, &cb.bn));
                }
            }
        }
    }

    #[test]
    fn full_rank_variant_moves_more_than_one_direction() {
        let (model, mut cfg) = probe(false);
        cfg.rank_one = false;
        let out = edit(&model, &exemplars(4, 3, false), &refs(2), &cfg, cfg.grid[0]).unwrap();
        assert!(out.final_loss < out.initial_loss);
        assert!(out.sigma[1] > 1e-6 * out.sigma[0]);
    }

    #[test]
    fn lambda_gradient_matches_weight_gradient_and_finite_differences() {
        for residual in [false, true] {
            let (model, cfg) = probe(residual);
            let p = EditProblem::prepare(&model, &exemplars(6, 2, false), &refs(2), &cfg).unwrap();
            let lambda: Vec<f64> = (0..p.dim()).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
            let (_, g) = p.objective_lambda(&lambda).unwrap();
            let mut q = p.clone();
            q.config.rank_one = false;
            let (_, gw) = q.objective_delta(&p.delta(&lambda)).unwrap();
            let u = p.direction.as_ref().unwrap().u.data();
            let n = u.len();
            for o in 0..g.len() {
                let via_w = dot(&gw[o * n..(o + 1) * n], u);
                assert!((via_w - g[o]).abs() <= 1e-10 * g[o].abs().max(1e-12), "{via_w} vs {}", g[o]);
            }
            let h = 1e-5;
            for o in 0..g.len() {
                let (mut a, mut b) = (lambda.clone(), lambda.clone());
                a[o] += h;
                b[o] -= h;
                let fd = (p.objective_lambda(&a).unwrap().0 - p.objective_lambda(&b).unwrap().0) / (2.0 * h);
                assert!((fd - g[o]).abs() <= 1e-6 * g[o].abs().max(fd.abs()).max(1e-9), "{fd} vs {}", g[o]);
            }
        }
    }

    #[test]
    fn mask_covering_everything_matches_unmasked() {
        let (model, mut cfg) = probe(false);
        let mut ex = exemplars(7, 2, false);
        for e in &mut ex {
            e.mask = Mask::full();
        }
        let a = edit(&model, &ex, &refs(2), &cfg, cfg.grid[0]).unwrap();
        cfg.use_mask = false;
        let b = edit(&model, &ex, &refs(2), &cfg, cfg.grid[0]).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn config_errors() {
        let (model, mut cfg) = probe(false);
        cfg.layer = 1;
        assert!(matches!(cfg.validate(&model), Err(Error::Config(_))));
        let (_, mut cfg) = probe(false);
        cfg.grid.clear();
        assert!(cfg.validate(&model).is_err());
        let mut ms = model.clone();
        ms.editable.clear();
        assert!(EditConfig::new(0).validate(&ms).is_err());
    }

    #[test]
    fn grid_scaling() {
        assert_eq!(DEFAULT_EDIT_GRID[0].scaled(100).steps, 100);
        assert_eq!(GridPoint::new(1.0, 5).scaled(100).steps, 1);
        assert_eq!(GridPoint::new(1.0, 0).scaled(100).steps, 0);
    }

    #[test]
    fn euclidean_norm_variant_runs() {
        let (model, mut cfg) = probe(false);
        cfg.norm = EditNorm::Euclidean;
        let out = edit(&model, &exemplars(8, 2, false), &refs(2), &cfg, cfg.grid[0]).unwrap();
        assert!(out.final_loss < out.initial_loss);
    }
}
