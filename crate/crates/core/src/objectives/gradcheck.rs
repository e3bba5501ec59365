//! Finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{grad, loss, AdapterGrad, LossConfig, Method, WeightFn};
use crate::error::Result;
use crate::linalg::{normalized, Matrix};
use crate::model::{predict_probs, AdapterParams, ClassHead, ModelState, DEFAULT_TAU};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted per-coordinate relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true value is
/// zero are judged by their absolute error instead.
const REL_FLOOR: f64 = 1e-6;

pub type GradFn = fn(&LossConfig, &ModelState, &Matrix, &[f64]) -> Result<AdapterGrad>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub method: Method,
    pub weight_fn: WeightFn,
    pub trial: usize,
    pub n: usize,
    pub classes: usize,
    pub d: usize,
    pub max_rel_error: f64,
    /// `group[index]` of the worst coordinate.
    pub worst: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < GRAD_TOLERANCE
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_error < GRAD_TOLERANCE))
    }
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Instance {
    state: ModelState,
    batch: Matrix,
    weights: Vec<f64>,
    oracle: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            sigma * z
        })
        .collect()
}

/// Small random problem whose logits are spread over a few units, so the
/// softmax is neither saturated nor flat.
fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(1..=8);
    let classes = rng.random_range(2..=5);
    let d = rng.random_range(2..=16);
    let m = rng.random_range(0..=4usize);
    let k = if m == 0 {
        0
    } else {
        rng.random_range(1..=(d / m).clamp(1, 4))
    };
    let (m, k) = if m * k > d { (0, 0) } else { (m, k) };

    let anchor = gaussian(rng, d, 1.0);
    let around = |rng: &mut ChaCha8Rng, spread: f64| -> Vec<f64> {
        let v: Vec<f64> = anchor
            .iter()
            .zip(gaussian(rng, d, spread))
            .map(|(a, e)| a + e)
            .collect();
        normalized(&v)
            .map(|(u, _)| u)
            .unwrap_or_else(|| anchor.clone())
    };
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| around(rng, 0.15)).collect();
    let xs: Vec<Vec<f64>> = (0..n).map(|_| around(rng, 0.15)).collect();
    let seed_u = rng.random();
    let head = ClassHead::new(
        Matrix::from_rows(&protos)?,
        (0..classes as u32).collect(),
        m,
        k,
        seed_u,
        DEFAULT_TAU,
    )?;
    let mut adapter = AdapterParams::identity(d, m, k, seed_u);
    adapter.scale = gaussian(rng, d, 0.1).into_iter().map(|v| 1.0 + v).collect();
    adapter.shift = gaussian(rng, d, 0.02);
    let ctx = gaussian(rng, m * k, 0.02);
    adapter.set_context_flat(&ctx);
    let weights = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let oracle = (0..n)
        .map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 })
        .collect();
    Ok(Instance {
        state: ModelState::with_adapter(head, adapter)?,
        batch: Matrix::from_rows(&xs)?,
        weights,
        oracle,
    })
}

fn loss_at(cfg: &LossConfig, state: &ModelState, batch: &Matrix, w: &[f64]) -> Result<f64> {
    loss(&predict_probs(state, batch)?, w, cfg)
}

/// Coordinate-wise central differences over every adapter parameter.
fn numeric_grad(
    cfg: &LossConfig,
    state: &ModelState,
    batch: &Matrix,
    w: &[f64],
) -> Result<AdapterGrad> {
    let base = state.adapter().clone();
    let head = state.head().clone();
    let eval = |a: AdapterParams| -> Result<f64> {
        loss_at(cfg, &ModelState::with_adapter(head.clone(), a)?, batch, w)
    };
    let diff = |perturb: &dyn Fn(&mut AdapterParams, f64)| -> Result<f64> {
        let mut plus = base.clone();
        perturb(&mut plus, FD_STEP);
        let mut minus = base.clone();
        perturb(&mut minus, -FD_STEP);
        Ok((eval(plus)? - eval(minus)?) / (2.0 * FD_STEP))
    };
    let d = base.d();
    let mut out = AdapterGrad {
        scale: Vec::with_capacity(d),
        shift: Vec::with_capacity(d),
        context: Vec::with_capacity(base.m * base.k),
    };
    for j in 0..d {
        out.scale.push(diff(&|a, h| a.scale[j] += h)?);
        out.shift.push(diff(&|a, h| a.shift[j] += h)?);
    }
    for r in 0..base.m {
        for c in 0..base.k {
            out.context.push(diff(&|a, h| a.context[r][c] += h)?);
        }
    }
    Ok(out)
}

fn compare(analytic: &AdapterGrad, numeric: &AdapterGrad) -> (f64, String) {
    let mut worst = (0.0, String::from("-"));
    for (group, a, b) in [
        ("scale", &analytic.scale, &numeric.scale),
        ("shift", &analytic.shift, &numeric.shift),
        ("context", &analytic.context, &numeric.context),
    ] {
        for (j, (x, y)) in a.iter().zip(b).enumerate() {
            let e = relative_error(*x, *y);
            if !(e <= worst.0) {
                worst = (e, format!("{group}[{j}]"));
            }
        }
    }
    worst
}

/// Runs the analytic gradient against finite differences on `trials` random
/// instances for every method and weight function.
pub fn check_gradients(seed: u64, trials: usize) -> Result<GradCheckReport> {
    check_gradients_with(seed, trials, grad)
}

/// Same as [`check_gradients`] with an injectable gradient routine.
pub fn check_gradients_with(seed: u64, trials: usize, grad_fn: GradFn) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for trial in 0..trials {
        let inst = random_instance(&mut rng)?;
        for method in Method::ALL {
            for weight_fn in WeightFn::ALL {
                let cfg = LossConfig {
                    method,
                    weight_fn,
                    beta: 1.0,
                    ..LossConfig::default()
                };
                let w = if method == Method::UeoOracle {
                    &inst.oracle
                } else {
                    &inst.weights
                };
                let analytic = grad_fn(&cfg, &inst.state, &inst.batch, w)?;
                let numeric = numeric_grad(&cfg, &inst.state, &inst.batch, w)?;
                let (max_rel_error, worst) = compare(&analytic, &numeric);
                report.entries.push(GradCheckEntry {
                    method,
                    weight_fn,
                    trial,
                    n: inst.batch.rows(),
                    classes: inst.state.head().num_classes(),
                    d: inst.batch.cols(),
                    max_rel_error,
                    worst,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_is_empty() {
        let r = check_gradients(0, 0).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let r = check_gradients(1, 4).unwrap();
        assert_eq!(r.entries.len(), 4 * 30);
        assert!(r.passed(), "max rel error {}", r.max_rel_error());
    }

    fn corrupted(cfg: &LossConfig, s: &ModelState, b: &Matrix, w: &[f64]) -> Result<AdapterGrad> {
        let mut g = grad(cfg, s, b, w)?;
        g.shift[0] += 1e-2 * (1.0 + g.shift[0].abs());
        Ok(g)
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let r = check_gradients_with(1, 2, corrupted).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures().count(), r.entries.len());
    }
}
