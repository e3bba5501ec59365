//! ID accuracy and OOD detection metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingCache, ShiftSpec};
use crate::error::{Error, Result};
use crate::model::{mcm_score, predict_class, predict_probs, ModelState};
use crate::par;

pub const DEFAULT_CURVE_POINTS: usize = 101;

/// Row indices of the evaluation set, split by membership in the predefined list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSplit {
    /// Labels in `L_e ∩ L_p`.
    pub id: Vec<usize>,
    /// Labels in `L_e \ L_p`.
    pub ood: Vec<usize>,
}

pub fn split_eval(cache: &EmbeddingCache, spec: &ShiftSpec) -> EvalSplit {
    let mut split = EvalSplit {
        id: Vec::new(),
        ood: Vec::new(),
    };
    for (i, &l) in cache.labels().iter().enumerate() {
        if !spec.is_eval(l) {
            continue;
        }
        if spec.is_predefined(l) {
            split.id.push(i);
        } else {
            split.ood.push(i);
        }
    }
    split
}

/// Per-class accuracy over samples whose label is in `classes`, and the
/// unweighted mean over classes that have at least one sample.
pub fn per_class_accuracy(
    preds: &[u32],
    labels: &[u32],
    classes: &[u32],
) -> Result<(BTreeMap<u32, f64>, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            context: "predictions",
            expected: labels.len(),
            actual: preds.len(),
        });
    }
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        if classes.contains(&l) {
            let e = tally.entry(l).or_default();
            e.1 += 1;
            if p == l {
                e.0 += 1;
            }
        }
    }
    if tally.is_empty() {
        return Err(Error::invalid(
            "accuracy",
            "no samples from the requested classes",
        ));
    }
    let per_class: BTreeMap<u32, f64> = tally
        .into_iter()
        .map(|(c, (hit, total))| (c, hit as f64 / total as f64))
        .collect();
    let macro_mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((per_class, macro_mean))
}

/// Fraction of correct predictions over all samples.
pub fn global_accuracy(preds: &[u32], labels: &[u32]) -> f64 {
    let hit = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hit as f64 / labels.len().max(1) as f64
}

/// Exact Mann-Whitney AUC: the probability that an ID score exceeds an OOD
/// score, ties counted one half. Computed from mid-ranks in `O(n log n)`.
pub fn auc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::invalid("scores", "AUC undefined with an empty side"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::invalid("scores", "NaN score"));
    }
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of mid-ranks (1-based) of the ID scores; always a multiple of 1/2
    let mut id_rank_sum = 0.0;
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start + 1;
        while end < pooled.len() && pooled[end].0 == pooled[start].0 {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let id_in_group = pooled[start..end].iter().filter(|e| e.1).count();
        id_rank_sum += mid_rank * id_in_group as f64;
        start = end;
    }
    let n_id = id_scores.len() as f64;
    let u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * ood_scores.len() as f64))
}

/// `true` marks a sample detected as ID (`score >= lambda`).
pub fn detect(scores: &[f64], lambda: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= lambda).collect()
}

/// `count` evenly spaced quantiles (linear interpolation) of `scores`, ascending.
pub fn lambda_grid(scores: &[f64], count: usize) -> Vec<f64> {
    if scores.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    (0..count)
        .map(|i| {
            let q = if count == 1 {
                0.0
            } else {
                i as f64 / (count - 1) as f64
            };
            let pos = q * last;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsHosPoint {
    pub lambda: f64,
    pub os: f64,
    pub hos: f64,
    pub known_acc: f64,
    pub unknown_acc: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Open-set scores along a threshold sweep. Samples scoring below `λ` are
/// assigned to an extra "unknown" class. OS averages the accuracies of the
/// known classes present and the unknown class; HOS is the harmonic mean of
/// the known-class average and the unknown accuracy.
pub fn os_hos_curve(
    preds: &[u32],
    labels: &[u32],
    scores: &[f64],
    spec: &ShiftSpec,
    lambdas: &[f64],
) -> Result<Vec<OsHosPoint>> {
    if preds.len() != labels.len() || scores.len() != labels.len() {
        return Err(Error::Dimension {
            context: "open-set inputs",
            expected: labels.len(),
            actual: preds.len().min(scores.len()),
        });
    }
    let mut known: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut unknown = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if spec.is_predefined(l) {
            known.entry(l).or_default().push(i);
        } else {
            unknown.push(i);
        }
    }
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::invalid(
            "open-set scores",
            "OS/HOS need both known-class and unknown samples",
        ));
    }
    let classes = known.len() as f64;
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    Ok(par::map_slice(&lambdas, |&lambda| {
        let known_sum: f64 = known
            .iter()
            .map(|(&c, rows)| {
                let hit = rows
                    .iter()
                    .filter(|&&i| scores[i] >= lambda && preds[i] == c)
                    .count();
                hit as f64 / rows.len() as f64
            })
            .sum();
        let rejected = unknown.iter().filter(|&&i| scores[i] < lambda).count();
        let unknown_acc = rejected as f64 / unknown.len() as f64;
        let known_acc = known_sum / classes;
        OsHosPoint {
            lambda,
            os: (known_sum + unknown_acc) / (classes + 1.0),
            hos: harmonic(known_acc, unknown_acc),
            known_acc,
            unknown_acc,
        }
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub id: usize,
    pub ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_acc: BTreeMap<u32, f64>,
    /// Macro mean over the predefined classes present in the test set.
    pub acc: f64,
    /// Plain fraction of correctly classified ID samples.
    pub global_acc: f64,
    /// Absent when the test set has no OOD samples.
    pub auc: Option<f64>,
    pub os_curve: Vec<(f64, f64)>,
    pub hos_curve: Vec<(f64, f64)>,
    pub counts: SampleCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Number of thresholds in the OS/HOS sweep; 0 disables the curves.
    pub curve_points: usize,
}

impl EvalOptions {
    pub fn with_curves() -> Self {
        EvalOptions {
            curve_points: DEFAULT_CURVE_POINTS,
        }
    }
}

/// Predictions of `state` on the evaluation rows of `test`.
#[derive(Clone, Debug)]
pub struct Scored {
    pub rows: Vec<usize>,
    pub labels: Vec<u32>,
    pub preds: Vec<u32>,
    pub scores: Vec<f64>,
}

pub fn score_eval_set(
    state: &ModelState,
    test: &EmbeddingCache,
    spec: &ShiftSpec,
) -> Result<Scored> {
    let rows = test.rows_where(|l| spec.is_eval(l));
    if rows.is_empty() {
        return Err(Error::invalid("evaluation set", "no test samples in L_e"));
    }
    let features = test.features().select_rows(&rows);
    let probs = predict_probs(state, &features)?;
    let head_labels = state.head().labels();
    Ok(Scored {
        labels: rows.iter().map(|&i| test.labels()[i]).collect(),
        preds: predict_class(&probs)
            .into_iter()
            .map(|c| head_labels[c])
            .collect(),
        scores: mcm_score(&probs),
        rows,
    })
}

/// Accuracy on ID samples, AUC of the maximum-probability score between ID
/// and OOD samples, and optionally the OS/HOS sweep.
pub fn evaluate(
    state: &ModelState,
    test: &EmbeddingCache,
    spec: &ShiftSpec,
    options: EvalOptions,
) -> Result<EvalReport> {
    let scored = score_eval_set(state, test, spec)?;
    let (mut id_preds, mut id_labels, mut id_scores, mut ood_scores) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..scored.rows.len() {
        if spec.is_predefined(scored.labels[i]) {
            id_preds.push(scored.preds[i]);
            id_labels.push(scored.labels[i]);
            id_scores.push(scored.scores[i]);
        } else {
            ood_scores.push(scored.scores[i]);
        }
    }
    let (per_class_acc, acc) = per_class_accuracy(&id_preds, &id_labels, spec.predefined())?;
    let auc = if ood_scores.is_empty() {
        None
    } else {
        Some(auc(&id_scores, &ood_scores)?)
    };
    let (mut os_curve, mut hos_curve) = (Vec::new(), Vec::new());
    if options.curve_points > 0 && !ood_scores.is_empty() {
        let lambdas = lambda_grid(&scored.scores, options.curve_points);
        for p in os_hos_curve(
            &scored.preds,
            &scored.labels,
            &scored.scores,
            spec,
            &lambdas,
        )? {
            os_curve.push((p.lambda, p.os));
            hos_curve.push((p.lambda, p.hos));
        }
    }
    Ok(EvalReport {
        per_class_acc,
        acc,
        global_acc: global_accuracy(&id_preds, &id_labels),
        auc,
        os_curve,
        hos_curve,
        counts: SampleCounts {
            id: id_scores.len(),
            ood: ood_scores.len(),
        },
    })
}

impl EvalReport {
    /// `lambda,os,hos` rows.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("lambda,os,hos\n");
        for ((l, os), (_, hos)) in self.os_curve.iter().zip(&self.hos_curve) {
            out.push_str(&format!("{l},{os},{hos}\n"));
        }
        out
    }
}
