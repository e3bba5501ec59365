//! The adapted dual-encoder head.
//!
//! Image side: a frozen embedding `x` goes through a channel-wise affine map
//! and is normalized, `I = normalize(scale ⊙ x + shift)`.
//!
//! Text side: each frozen base prototype `b_c` is offset by the shared prompt
//! context pushed through a frozen projection `U` with orthonormal columns,
//! `T_c = normalize(b_c + U · vec(context))`.
//!
//! Class probabilities are a softmax over cosine similarities divided by the
//! temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingCache, ShiftSpec};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalized, Matrix};
use crate::par;

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_PROMPT_LENGTH: usize = 4;

/// The whole trainable state: a per-channel affine map on image embeddings
/// and `m` prompt-context vectors of width `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub context: Vec<Vec<f64>>,
    pub m: usize,
    pub k: usize,
    /// Seed of the frozen projection. The projection itself is never stored.
    #[serde(rename = "seed_U")]
    pub seed_u: u64,
}

impl AdapterParams {
    /// Identity adapter: unit scale, zero shift, zero context.
    pub fn identity(d: usize, m: usize, k: usize, seed_u: u64) -> Self {
        AdapterParams {
            scale: vec![1.0; d],
            shift: vec![0.0; d],
            context: vec![vec![0.0; k]; m],
            m,
            k,
            seed_u,
        }
    }

    pub fn d(&self) -> usize {
        self.scale.len()
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|&s| s == 1.0)
            && self.shift.iter().all(|&t| t == 0.0)
            && self.context.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn context_flat(&self) -> Vec<f64> {
        self.context.iter().flatten().copied().collect()
    }

    pub fn set_context_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.m * self.k);
        for (row, chunk) in self.context.iter_mut().zip(flat.chunks(self.k.max(1))) {
            row.copy_from_slice(chunk);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift.len() != self.scale.len() {
            return Err(Error::Dimension {
                context: "adapter shift",
                expected: self.scale.len(),
                actual: self.shift.len(),
            });
        }
        if self.context.len() != self.m || self.context.iter().any(|r| r.len() != self.k) {
            return Err(Error::invalid(
                "adapter",
                format!("context must be {}x{}", self.m, self.k),
            ));
        }
        let finite = self
            .scale
            .iter()
            .chain(&self.shift)
            .chain(self.context.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("adapter", "non-finite parameter"));
        }
        Ok(())
    }
}

/// Frozen class prototypes, the frozen context projection and the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead {
    base: Matrix,
    labels: Vec<u32>,
    projection: Matrix,
    m: usize,
    k: usize,
    seed_u: u64,
    tau: f64,
}

/// Draws a `d x cols` matrix with orthonormal columns (modified Gram-Schmidt
/// on seeded Gaussian columns).
pub fn orthonormal_projection(d: usize, cols: usize, seed: u64) -> Result<Matrix> {
    if cols > d {
        return Err(Error::invalid(
            "projection",
            format!("{cols} context coordinates exceed embedding dimension {d}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for q in &columns {
            let c = dot(q, &v);
            axpy(-c, q, &mut v);
        }
        // a near-dependent draw is simply redrawn
        if let Some((u, n)) = normalized(&v) {
            if n > 1e-6 {
                columns.push(u);
            }
        }
    }
    let mut out = Matrix::zeros(d, cols);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

impl ClassHead {
    /// `base` holds one prototype per row; `labels[c]` is the dataset label of row `c`.
    pub fn new(
        base: Matrix,
        labels: Vec<u32>,
        m: usize,
        k: usize,
        seed_u: u64,
        tau: f64,
    ) -> Result<Self> {
        if base.rows() < 2 {
            return Err(Error::invalid("class head", "need at least two classes"));
        }
        if labels.len() != base.rows() {
            return Err(Error::Dimension {
                context: "class head labels",
                expected: base.rows(),
                actual: labels.len(),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(
                "class head",
                format!("temperature {tau} must be positive"),
            ));
        }
        if !base.is_finite() {
            return Err(Error::invalid("class head", "non-finite prototype"));
        }
        let projection = orthonormal_projection(base.cols(), m * k, seed_u)?;
        Ok(ClassHead {
            base,
            labels,
            projection,
            m,
            k,
            seed_u,
            tau,
        })
    }

    /// Picks the prototype rows whose label is in `L_p`, ordered by label.
    pub fn from_prototypes(
        prototypes: &EmbeddingCache,
        spec: &ShiftSpec,
        m: usize,
        k: usize,
        seed_u: u64,
        tau: f64,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(spec.predefined().len());
        for &label in spec.predefined() {
            let row = prototypes
                .labels()
                .iter()
                .position(|&l| l == label)
                .ok_or_else(|| {
                    Error::invalid(
                        "prototypes",
                        format!("no prototype for predefined class {label}"),
                    )
                })?;
            rows.push(row);
        }
        let base = prototypes.features().select_rows(&rows);
        Self::new(base, spec.predefined().to_vec(), m, k, seed_u, tau)
    }

    pub fn num_classes(&self) -> usize {
        self.base.rows()
    }

    pub fn dim(&self) -> usize {
        self.base.cols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn prompt_shape(&self) -> (usize, usize) {
        (self.m, self.k)
    }

    pub fn seed_u(&self) -> u64 {
        self.seed_u
    }

    pub fn identity_adapter(&self) -> AdapterParams {
        AdapterParams::identity(self.dim(), self.m, self.k, self.seed_u)
    }

    fn check_adapter(&self, adapter: &AdapterParams) -> Result<()> {
        adapter.validate()?;
        if adapter.d() != self.dim() {
            return Err(Error::Dimension {
                context: "adapter width",
                expected: self.dim(),
                actual: adapter.d(),
            });
        }
        if (adapter.m, adapter.k) != (self.m, self.k) || adapter.seed_u != self.seed_u {
            return Err(Error::invalid(
                "adapter",
                "prompt shape or projection seed differs from the class head",
            ));
        }
        Ok(())
    }
}

/// Head plus adapter. A frozen reference always carries the identity adapter
/// and rejects updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    head: ClassHead,
    adapter: AdapterParams,
    frozen_reference: bool,
}

impl ModelState {
    /// Trainable state at initialization.
    pub fn new(head: ClassHead) -> Self {
        let adapter = head.identity_adapter();
        ModelState {
            head,
            adapter,
            frozen_reference: false,
        }
    }

    pub fn with_adapter(head: ClassHead, adapter: AdapterParams) -> Result<Self> {
        head.check_adapter(&adapter)?;
        Ok(ModelState {
            head,
            adapter,
            frozen_reference: false,
        })
    }

    /// Snapshot of the original, unadapted model.
    pub fn frozen_reference(head: ClassHead) -> Self {
        ModelState {
            frozen_reference: true,
            ..Self::new(head)
        }
    }

    pub fn reference(&self) -> ModelState {
        Self::frozen_reference(self.head.clone())
    }

    pub fn is_frozen_reference(&self) -> bool {
        self.frozen_reference
    }

    pub fn head(&self) -> &ClassHead {
        &self.head
    }

    pub fn adapter(&self) -> &AdapterParams {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> Result<&mut AdapterParams> {
        if self.frozen_reference {
            return Err(Error::invalid(
                "model state",
                "the frozen reference cannot be updated",
            ));
        }
        Ok(&mut self.adapter)
    }

    pub fn into_adapter(self) -> AdapterParams {
        self.adapter
    }
}

/// Unnormalized prompt offsets `b_c + U v` for every class.
fn offset_prototypes(head: &ClassHead, adapter: &AdapterParams) -> Matrix {
    let mut g = head.base.clone();
    if head.m * head.k > 0 {
        let u = head.projection.mul_vec(&adapter.context_flat());
        for c in 0..g.rows() {
            axpy(1.0, &u, g.row_mut(c));
        }
    }
    g
}

/// Normalized class prototypes `T_c`, one per row.
pub fn text_prototypes(head: &ClassHead, adapter: &AdapterParams) -> Result<Matrix> {
    Ok(text_prototypes_with_norms(head, adapter)?.0)
}

pub(crate) fn text_prototypes_with_norms(
    head: &ClassHead,
    adapter: &AdapterParams,
) -> Result<(Matrix, Vec<f64>)> {
    head.check_adapter(adapter)?;
    let mut g = offset_prototypes(head, adapter);
    let mut norms = Vec::with_capacity(g.rows());
    for c in 0..g.rows() {
        let (t, n) = normalized(g.row(c)).ok_or(Error::Degenerate("prototype"))?;
        g.row_mut(c).copy_from_slice(&t);
        norms.push(n);
    }
    Ok((g, norms))
}

fn image_forward_with_norm(adapter: &AdapterParams, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.len() != adapter.d() {
        return Err(Error::Dimension {
            context: "image embedding",
            expected: adapter.d(),
            actual: x.len(),
        });
    }
    let z: Vec<f64> = x
        .iter()
        .zip(&adapter.scale)
        .zip(&adapter.shift)
        .map(|((xi, s), t)| s * xi + t)
        .collect();
    normalized(&z).ok_or(Error::Degenerate("image embedding"))
}

/// `normalize(scale ⊙ x + shift)`
pub fn image_forward(adapter: &AdapterParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(image_forward_with_norm(adapter, x)?.0)
}

/// Numerically stable softmax of `logits`, also returning log-probabilities.
pub(crate) fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| l - max).collect();
    let sum: f64 = shifted.iter().map(|v| v.exp()).sum();
    let log_sum = sum.ln();
    let log_p: Vec<f64> = shifted.iter().map(|v| v - log_sum).collect();
    let p = shifted.iter().map(|v| v.exp() / sum).collect();
    (p, log_p)
}

/// Intermediate values of a forward pass, kept for backpropagation.
pub(crate) struct ForwardCache {
    pub images: Matrix,
    pub image_norms: Vec<f64>,
    pub protos: Matrix,
    pub proto_norms: Vec<f64>,
    pub probs: Matrix,
    pub log_probs: Matrix,
}

pub(crate) fn forward(state: &ModelState, batch: &Matrix) -> Result<ForwardCache> {
    let head = &state.head;
    if batch.cols() != head.dim() {
        return Err(Error::Dimension {
            context: "batch width",
            expected: head.dim(),
            actual: batch.cols(),
        });
    }
    let (protos, proto_norms) = text_prototypes_with_norms(head, &state.adapter)?;
    let inv_tau = 1.0 / head.tau;
    let rows = par::try_map_range(batch.rows(), |i| {
        let (img, n) = image_forward_with_norm(&state.adapter, batch.row(i))?;
        let logits: Vec<f64> = protos.iter_rows().map(|t| dot(&img, t) * inv_tau).collect();
        let (p, lp) = log_softmax(&logits);
        Ok::<_, Error>((img, n, p, lp))
    })?;
    let n = batch.rows();
    let c = head.num_classes();
    let mut images = Matrix::zeros(n, head.dim());
    let mut image_norms = Vec::with_capacity(n);
    let mut probs = Matrix::zeros(n, c);
    let mut log_probs = Matrix::zeros(n, c);
    for (i, (img, nrm, p, lp)) in rows.into_iter().enumerate() {
        images.row_mut(i).copy_from_slice(&img);
        image_norms.push(nrm);
        probs.row_mut(i).copy_from_slice(&p);
        log_probs.row_mut(i).copy_from_slice(&lp);
    }
    Ok(ForwardCache {
        images,
        image_norms,
        protos,
        proto_norms,
        probs,
        log_probs,
    })
}

/// Class probabilities for each row of `batch`.
pub fn predict_probs(state: &ModelState, batch: &Matrix) -> Result<Matrix> {
    Ok(forward(state, batch)?.probs)
}

/// Maximum class probability per row.
pub fn mcm_score(probs: &Matrix) -> Vec<f64> {
    probs
        .iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Argmax per row; ties go to the lowest index.
pub fn predict_class(probs: &Matrix) -> Vec<usize> {
    probs
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            for (c, &p) in r.iter().enumerate().skip(1) {
                if p > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(base: Vec<Vec<f64>>, m: usize, k: usize) -> ClassHead {
        let labels = (0..base.len() as u32).collect();
        ClassHead::new(
            Matrix::from_rows(&base).unwrap(),
            labels,
            m,
            k,
            7,
            DEFAULT_TAU,
        )
        .unwrap()
    }

    #[test]
    fn projection_has_orthonormal_columns() {
        let u = orthonormal_projection(12, 8, 3).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let d: f64 = (0..12).map(|i| u.get(i, a) * u.get(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12, "{a} {b} {d}");
            }
        }
        assert!(orthonormal_projection(4, 5, 0).is_err());
        assert_eq!(
            orthonormal_projection(6, 3, 9).unwrap(),
            orthonormal_projection(6, 3, 9).unwrap()
        );
    }

    #[test]
    fn zero_context_normalizes_base() {
        let h = head(
            vec![vec![3.0, 4.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]],
            1,
            2,
        );
        let t = text_prototypes(&h, &h.identity_adapter()).unwrap();
        assert_eq!(t.row(0), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(t.row(1), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn random_context_matches_direct_recomputation() {
        let h = head(
            vec![
                vec![1.0, 0.5, -0.2, 0.3, 0.0],
                vec![-0.4, 0.1, 0.9, 0.0, 0.2],
            ],
            2,
            2,
        );
        let mut a = h.identity_adapter();
        a.context = vec![vec![0.3, -0.7], vec![0.2, 0.5]];
        let t = text_prototypes(&h, &a).unwrap();
        // second path: explicit column sums of U weighted by the flattened context
        let v = [0.3, -0.7, 0.2, 0.5];
        for c in 0..2 {
            let mut g: Vec<f64> = h.base().row(c).to_vec();
            for (j, vj) in v.iter().enumerate() {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += h.projection().get(i, j) * vj;
                }
            }
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..5 {
                assert!((t.get(c, i) - g[i] / n).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_prototype() {
        let h = head(vec![vec![0.0, 0.0], vec![0.0, 1.0]], 0, 0);
        assert!(matches!(
            text_prototypes(&h, &h.identity_adapter()),
            Err(Error::Degenerate("prototype"))
        ));
    }

    #[test]
    fn image_forward_cases() {
        let a = AdapterParams::identity(2, 0, 0, 0);
        assert_eq!(image_forward(&a, &[0.6, 0.8]).unwrap(), vec![0.6, 0.8]);
        let mut b = a.clone();
        b.scale = vec![2.0, 2.0];
        let out = image_forward(&b, &[0.6, 0.8]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        let mut c = a.clone();
        c.scale = vec![1.0, 2.0];
        c.shift = vec![0.1, 0.0];
        assert_eq!(image_forward(&c, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        c.shift = vec![-1.0, 0.0];
        assert!(matches!(
            image_forward(&c, &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(image_forward(&c, &[1.0]).is_err());
    }

    #[test]
    fn two_class_softmax_value() {
        // similarities 0.2 and 0.1 with unit image (1, 0)
        let s1: f64 = 0.2;
        let s2: f64 = 0.1;
        let h = head(
            vec![
                vec![s1, (1.0 - s1 * s1).sqrt()],
                vec![s2, -(1.0 - s2 * s2).sqrt()],
            ],
            0,
            0,
        );
        let st = ModelState::new(h);
        let p = predict_probs(&st, &Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let want = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p.get(0, 0) - want).abs() < 1e-12);
        assert!((p.get(0, 0) - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn equal_similarities_give_uniform_rows() {
        let h = head(vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![1.0, 0.0]], 0, 0);
        let st = ModelState::new(h);
        let p = predict_probs(&st, &Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        assert!(p.is_err());
        let h = head(vec![vec![0.0, 1.0], vec![0.0, -1.0]], 0, 0);
        let st = ModelState::new(h);
        let p = predict_probs(&st, &Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn mcm_and_argmax() {
        let p = Matrix::from_rows(&[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.7, 0.2, 0.1, 0.0],
            vec![0.1, 0.8, 0.1, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(mcm_score(&p), vec![0.25, 0.7, 0.8, 0.5]);
        assert_eq!(predict_class(&p), vec![0, 0, 1, 0]);
    }

    #[test]
    fn frozen_reference_rejects_updates() {
        let h = head(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0, 0);
        let mut r = ModelState::frozen_reference(h.clone());
        assert!(r.is_frozen_reference());
        assert!(r.adapter().is_identity());
        assert!(r.adapter_mut().is_err());
        let mut s = ModelState::new(h);
        assert!(s.adapter_mut().is_ok());
    }

    #[test]
    fn adapter_json_shape() {
        let a = AdapterParams::identity(2, 1, 2, 5);
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        assert_eq!(v["seed_U"], 5);
        assert_eq!(v["context"], serde_json::json!([[0.0, 0.0]]));
        let back: AdapterParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }
}
