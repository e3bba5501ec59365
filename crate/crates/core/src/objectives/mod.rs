//! Entropy objectives over class-probability batches.
//!
//! Every method is one of two shapes built from per-sample entropies `H(p_i)`:
//!
//! * marginal: `Σ a_i H(p_i) − β H(Σ b_i p_i)`
//! * per-sample: `Σ (a_i − β b_i) H(p_i)`
//!
//! with `a` the normalized confidence weights and `b` the normalized reverse
//! weights `Φ(w)`. EntMin and InfoMax are the uniform-weight cases.

mod grad;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use grad::{grad, loss_and_grad, AdapterGrad, LossAndGrad};
pub use gradcheck::{
    check_gradients, check_gradients_with, relative_error, GradCheckEntry, GradCheckReport, GradFn,
    FD_STEP, GRAD_TOLERANCE,
};

/// Monotonically decreasing map from confidence to OOD emphasis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    /// `1 / w`
    #[default]
    Inv,
    /// `sqrt(1 / w)`
    InvSqrt,
    /// `(1 / w)^2`
    InvSq,
    /// `1 - w`
    OneMinus,
    /// `sqrt(1 - w)`
    OneMinusSqrt,
    /// `(1 - w)^2`
    OneMinusSq,
}

impl WeightFn {
    pub const ALL: [WeightFn; 6] = [
        WeightFn::Inv,
        WeightFn::InvSqrt,
        WeightFn::InvSq,
        WeightFn::OneMinus,
        WeightFn::OneMinusSqrt,
        WeightFn::OneMinusSq,
    ];

    pub fn apply(self, w: f64) -> f64 {
        match self {
            WeightFn::Inv => 1.0 / w,
            WeightFn::InvSqrt => (1.0 / w).sqrt(),
            WeightFn::InvSq => (1.0 / w).powi(2),
            WeightFn::OneMinus => 1.0 - w,
            WeightFn::OneMinusSqrt => (1.0 - w).max(0.0).sqrt(),
            WeightFn::OneMinusSq => (1.0 - w).powi(2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightFn::Inv => "inv",
            WeightFn::InvSqrt => "inv_sqrt",
            WeightFn::InvSq => "inv_sq",
            WeightFn::OneMinus => "one_minus",
            WeightFn::OneMinusSqrt => "one_minus_sqrt",
            WeightFn::OneMinusSq => "one_minus_sq",
        }
    }

    /// `Φ(c w) ∝ Φ(w)` for the reciprocal family.
    pub fn is_homogeneous(self) -> bool {
        matches!(self, WeightFn::Inv | WeightFn::InvSqrt | WeightFn::InvSq)
    }
}

impl fmt::Display for WeightFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        WeightFn::ALL
            .into_iter()
            .find(|f| f.as_str() == key)
            .ok_or_else(|| Error::invalid("weight function", format!("unknown `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Weighted entropy minimization plus marginal entropy maximization.
    #[default]
    Ueo,
    /// Both entropy terms taken per sample.
    UeoSample,
    Entmin,
    Infomax,
    /// UEO with ground-truth ID membership as the weights.
    #[serde(alias = "ueo_o")]
    UeoOracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ueo,
        Method::UeoSample,
        Method::Entmin,
        Method::Infomax,
        Method::UeoOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ueo => "ueo",
            Method::UeoSample => "ueo_sample",
            Method::Entmin => "entmin",
            Method::Infomax => "infomax",
            Method::UeoOracle => "ueo_oracle",
        }
    }

    /// Whether the method consumes per-sample weights at all.
    pub fn uses_weights(self) -> bool {
        matches!(self, Method::Ueo | Method::UeoSample | Method::UeoOracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ueo" => Ok(Method::Ueo),
            "ueo_sample" => Ok(Method::UeoSample),
            "entmin" => Ok(Method::Entmin),
            "infomax" => Ok(Method::Infomax),
            "ueo_oracle" | "ueo_o" | "ueo(o)" => Ok(Method::UeoOracle),
            other => Err(Error::invalid("method", format!("unknown `{other}`"))),
        }
    }
}

pub const DEFAULT_EPS_W: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub method: Method,
    pub weight_fn: WeightFn,
    /// Trade-off on the maximization term.
    pub beta: f64,
    /// Floor applied to weights before `Φ`.
    pub eps_w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            method: Method::Ueo,
            weight_fn: WeightFn::Inv,
            beta: 1.0,
            eps_w: DEFAULT_EPS_W,
        }
    }
}

impl LossConfig {
    pub fn with_method(method: Method) -> Self {
        LossConfig {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(
                "loss config",
                format!("beta {} must be >= 0", self.beta),
            ));
        }
        let cap = 1.0 / num_classes.max(1) as f64;
        if !(self.eps_w > 0.0 && self.eps_w <= cap) {
            return Err(Error::invalid(
                "loss config",
                format!("eps_w {} must lie in (0, {cap}]", self.eps_w),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `w / Σ w`
    Forward,
    /// `Φ(w) / Σ Φ(w)`
    Reverse,
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid(
            "distribution",
            "entries must be non-negative",
        ));
    }
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>())
}

fn row_entropies(probs: &Matrix) -> Result<Vec<f64>> {
    probs.iter_rows().map(entropy).collect()
}

/// Clips every weight into `[eps_w, 1]`.
pub fn clip_weights(w: &[f64], eps_w: f64) -> Vec<f64> {
    w.iter().map(|&v| v.clamp(eps_w, 1.0)).collect()
}

/// Batch-normalized weights. Raw weights are clipped into `[eps_w, 1]` and
/// reverse weights `Φ(w)` are floored at `eps_w` so that the sum never vanishes.
pub fn normalized_weights(
    w: &[f64],
    weight_fn: WeightFn,
    direction: Direction,
    eps_w: f64,
) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::invalid("weights", "empty batch"));
    }
    if w.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("weights", "NaN weight"));
    }
    let clipped = clip_weights(w, eps_w);
    let raw: Vec<f64> = match direction {
        Direction::Forward => clipped,
        Direction::Reverse => clipped
            .iter()
            .map(|&v| weight_fn.apply(v).max(eps_w))
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| v / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Form {
    Marginal,
    PerSample,
}

/// Per-sample coefficients of the two entropy terms.
#[derive(Clone, Debug)]
pub(crate) struct Coefficients {
    pub min_w: Vec<f64>,
    pub max_w: Vec<f64>,
    pub beta: f64,
    pub form: Form,
}

pub(crate) fn coefficients(cfg: &LossConfig, w: &[f64], n: usize) -> Result<Coefficients> {
    if n == 0 {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let uniform = vec![1.0 / n as f64; n];
    let weighted = |form| -> Result<Coefficients> {
        if w.len() != n {
            return Err(Error::Dimension {
                context: "sample weights",
                expected: n,
                actual: w.len(),
            });
        }
        Ok(Coefficients {
            min_w: normalized_weights(w, cfg.weight_fn, Direction::Forward, cfg.eps_w)?,
            max_w: normalized_weights(w, cfg.weight_fn, Direction::Reverse, cfg.eps_w)?,
            beta: cfg.beta,
            form,
        })
    };
    match cfg.method {
        Method::Ueo | Method::UeoOracle => weighted(Form::Marginal),
        Method::UeoSample => weighted(Form::PerSample),
        Method::Entmin => Ok(Coefficients {
            min_w: uniform.clone(),
            max_w: uniform,
            beta: 0.0,
            form: Form::PerSample,
        }),
        Method::Infomax => Ok(Coefficients {
            min_w: uniform.clone(),
            max_w: uniform,
            beta: 1.0,
            form: Form::Marginal,
        }),
    }
}

/// `Σ b_i p_i`
pub(crate) fn weighted_mean(probs: &Matrix, b: &[f64]) -> Vec<f64> {
    probs.tr_mul_vec(b)
}

pub(crate) fn evaluate(probs: &Matrix, coef: &Coefficients) -> Result<f64> {
    let h = row_entropies(probs)?;
    let min_term: f64 = coef.min_w.iter().zip(&h).map(|(a, h)| a * h).sum();
    let max_term = match coef.form {
        Form::Marginal => entropy(&weighted_mean(probs, &coef.max_w))?,
        Form::PerSample => coef.max_w.iter().zip(&h).map(|(b, h)| b * h).sum(),
    };
    Ok(min_term - coef.beta * max_term)
}

/// Loss selected by `cfg.method`. `w` is ignored by unweighted methods.
pub fn loss(probs: &Matrix, w: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate(probs.cols())?;
    evaluate(probs, &coefficients(cfg, w, probs.rows())?)
}

/// `Σ w̃ H(p) − β H(p̄)` with `p̄ = Σ Φ̃(w) p`.
pub fn loss_ueo(probs: &Matrix, w: &[f64], cfg: &LossConfig) -> Result<f64> {
    loss(
        probs,
        w,
        &LossConfig {
            method: Method::Ueo,
            ..*cfg
        },
    )
}

/// `Σ w̃ H(p) − β Σ Φ̃(w) H(p)`
pub fn loss_ueo_sample(probs: &Matrix, w: &[f64], cfg: &LossConfig) -> Result<f64> {
    loss(
        probs,
        w,
        &LossConfig {
            method: Method::UeoSample,
            ..*cfg
        },
    )
}

/// Mean per-sample entropy.
pub fn loss_entmin(probs: &Matrix) -> Result<f64> {
    loss(probs, &[], &LossConfig::with_method(Method::Entmin))
}

/// Mean per-sample entropy minus the entropy of the mean prediction.
pub fn loss_infomax(probs: &Matrix) -> Result<f64> {
    loss(probs, &[], &LossConfig::with_method(Method::Infomax))
}

/// 1 for samples whose label is in the predefined list, 0 otherwise.
pub fn oracle_weights(labels: &[u32], predefined: &[u32]) -> Vec<f64> {
    labels
        .iter()
        .map(|l| if predefined.contains(l) { 1.0 } else { 0.0 })
        .collect()
}
