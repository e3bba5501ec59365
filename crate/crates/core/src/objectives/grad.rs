//! Analytic gradients of the objectives with respect to the adapter.
//!
//! The chain runs loss -> probabilities -> logits (softmax) -> cosine
//! similarities -> normalized image / class embeddings -> affine adapter and
//! prompt projection. Weights are constants: no gradient flows into them.

use std::sync::Once;

use serde::{Deserialize, Serialize};

use super::{coefficients, evaluate, weighted_mean, Form, LossConfig};
use crate::error::{Error, Result};
use crate::linalg::{axpy, normalize_backward, Matrix};
use crate::model::{forward, ModelState};
use crate::par;

/// Gradient with the same layout as the adapter; `context` is row-major `m x k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterGrad {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub context: Vec<f64>,
}

impl AdapterGrad {
    pub fn norm(&self) -> f64 {
        self.scale
            .iter()
            .chain(&self.shift)
            .chain(&self.context)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        for (group, values) in [
            ("scale", &self.scale),
            ("shift", &self.shift),
            ("context", &self.context),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { group });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: AdapterGrad,
    /// Predictions of the current state on the batch.
    pub probs: Matrix,
}

static SINGLE_SAMPLE_WARNING: Once = Once::new();

/// Loss value and its gradient with respect to every adapter parameter.
pub fn loss_and_grad(
    cfg: &LossConfig,
    state: &ModelState,
    batch: &Matrix,
    w: &[f64],
) -> Result<LossAndGrad> {
    let head = state.head();
    cfg.validate(head.num_classes())?;
    let n = batch.rows();
    if n == 1 && cfg.method.uses_weights() {
        SINGLE_SAMPLE_WARNING.call_once(|| {
            log::warn!("single-sample batch: both normalized weights collapse to 1");
        });
    }
    let coef = coefficients(cfg, w, n)?;
    let fwd = forward(state, batch)?;
    let loss = evaluate(&fwd.probs, &coef)?;

    let num_classes = head.num_classes();
    let inv_tau = 1.0 / head.tau();

    // log of the weighted mean prediction, only needed for the marginal form
    let log_bar: Option<Vec<f64>> = match coef.form {
        Form::Marginal => Some(
            weighted_mean(&fwd.probs, &coef.max_w)
                .iter()
                .map(|v| v.ln())
                .collect(),
        ),
        Form::PerSample => None,
    };

    // dL/ds_ic. Per-row constants in dL/dp cancel in the softmax backward pass,
    // so the `+1` of d(-p ln p)/dp is dropped.
    let dsim: Vec<Vec<f64>> = par::map_range(n, |i| {
        let p = fwd.probs.row(i);
        let lp = fwd.log_probs.row(i);
        let g: Vec<f64> = (0..num_classes)
            .map(|c| match &log_bar {
                Some(lb) => -coef.min_w[i] * lp[c] + coef.beta * coef.max_w[i] * lb[c],
                None => -(coef.min_w[i] - coef.beta * coef.max_w[i]) * lp[c],
            })
            .collect();
        let mean_g: f64 = p.iter().zip(&g).map(|(pc, gc)| pc * gc).sum();
        p.iter()
            .zip(&g)
            .map(|(pc, gc)| pc * (gc - mean_g) * inv_tau)
            .collect()
    });

    // image side: per-sample contributions, reduced in index order
    let adapter = state.adapter();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |i| {
        let mut d_img = vec![0.0; head.dim()];
        for (c, &ds) in dsim[i].iter().enumerate() {
            axpy(ds, fwd.protos.row(c), &mut d_img);
        }
        let dz = normalize_backward(fwd.images.row(i), fwd.image_norms[i], &d_img);
        let ds: Vec<f64> = dz.iter().zip(batch.row(i)).map(|(g, x)| g * x).collect();
        (ds, dz)
    });
    let mut scale = vec![0.0; head.dim()];
    let mut shift = vec![0.0; head.dim()];
    for (ds, dz) in &per_sample {
        axpy(1.0, ds, &mut scale);
        axpy(1.0, dz, &mut shift);
    }

    // text side: every class receives the same additive offset U v
    let (m, k) = head.prompt_shape();
    let context = if m * k == 0 {
        Vec::new()
    } else {
        let per_class: Vec<Vec<f64>> = par::map_range(num_classes, |c| {
            let mut d_proto = vec![0.0; head.dim()];
            for (i, row) in dsim.iter().enumerate() {
                axpy(row[c], fwd.images.row(i), &mut d_proto);
            }
            normalize_backward(fwd.protos.row(c), fwd.proto_norms[c], &d_proto)
        });
        let mut d_offset = vec![0.0; head.dim()];
        for g in &per_class {
            axpy(1.0, g, &mut d_offset);
        }
        head.projection().tr_mul_vec(&d_offset)
    };
    debug_assert_eq!(adapter.context_flat().len(), context.len());

    let grad = AdapterGrad {
        scale,
        shift,
        context,
    };
    grad.check_finite()?;
    Ok(LossAndGrad {
        loss,
        grad,
        probs: fwd.probs,
    })
}

/// Gradient of the selected loss with respect to the adapter.
pub fn grad(
    cfg: &LossConfig,
    state: &ModelState,
    batch: &Matrix,
    w: &[f64],
) -> Result<AdapterGrad> {
    Ok(loss_and_grad(cfg, state, batch, w)?.grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict_probs;
    use crate::model::{ClassHead, DEFAULT_TAU};
    use crate::objectives::{loss, Method, WeightFn};

    fn state(base: Vec<Vec<f64>>, m: usize, k: usize) -> ModelState {
        let labels = (0..base.len() as u32).collect();
        let head = ClassHead::new(
            Matrix::from_rows(&base).unwrap(),
            labels,
            m,
            k,
            11,
            DEFAULT_TAU,
        )
        .unwrap();
        ModelState::new(head)
    }

    #[test]
    fn stationary_single_sample_entmin() {
        // the image coincides with one prototype and the other is antipodal
        let st = state(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 1, 1);
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let g = grad(&LossConfig::with_method(Method::Entmin), &st, &x, &[1.0]).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn uniform_weight_ueo_matches_infomax_gradient() {
        let st = state(
            vec![
                vec![0.9, 0.1, 0.2, 0.0],
                vec![0.8, 0.3, -0.1, 0.1],
                vec![0.85, -0.2, 0.1, 0.2],
            ],
            2,
            2,
        );
        let mut st = st;
        {
            let a = st.adapter_mut().unwrap();
            a.scale = vec![1.1, 0.9, 1.0, 1.2];
            a.shift = vec![0.01, -0.02, 0.03, 0.0];
            a.context = vec![vec![0.02, -0.01], vec![0.0, 0.03]];
        }
        let x = Matrix::from_rows(&[
            vec![1.0, 0.1, 0.1, 0.0],
            vec![0.9, 0.2, -0.1, 0.1],
            vec![0.8, -0.1, 0.1, 0.2],
        ])
        .unwrap();
        let a = grad(&LossConfig::default(), &st, &x, &[0.37; 3]).unwrap();
        let b = grad(&LossConfig::with_method(Method::Infomax), &st, &x, &[]).unwrap();
        for (u, v) in a
            .scale
            .iter()
            .chain(&a.shift)
            .chain(&a.context)
            .zip(b.scale.iter().chain(&b.shift).chain(&b.context))
        {
            assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn reported_loss_matches_standalone_loss() {
        let st = state(vec![vec![1.0, 0.2, 0.0], vec![0.9, -0.2, 0.1]], 1, 2);
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.1], vec![0.95, 0.1, 0.0]]).unwrap();
        let w = [0.6, 0.9];
        for f in WeightFn::ALL {
            let cfg = LossConfig {
                weight_fn: f,
                ..LossConfig::default()
            };
            let lg = loss_and_grad(&cfg, &st, &x, &w).unwrap();
            let p = predict_probs(&st, &x).unwrap();
            assert_eq!(lg.loss, loss(&p, &w, &cfg).unwrap());
        }
    }

    #[test]
    fn weight_length_checked() {
        let st = state(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0, 0);
        let x = Matrix::from_rows(&[vec![1.0, 0.5]]).unwrap();
        assert!(grad(&LossConfig::default(), &st, &x, &[0.5, 0.5]).is_err());
    }
}
