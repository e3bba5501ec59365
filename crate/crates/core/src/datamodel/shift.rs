use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EmbeddingCache;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Closed,
    Partial,
    Open,
    OpenPartial,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::Closed,
        ShiftKind::Partial,
        ShiftKind::Open,
        ShiftKind::OpenPartial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::Closed => "closed",
            ShiftKind::Partial => "partial",
            ShiftKind::Open => "open",
            ShiftKind::OpenPartial => "open-partial",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "closed" | "closed-set" => Ok(ShiftKind::Closed),
            "partial" | "partial-set" => Ok(ShiftKind::Partial),
            "open" | "open-set" => Ok(ShiftKind::Open),
            "open-partial" | "open-partial-set" => Ok(ShiftKind::OpenPartial),
            other => Err(Error::invalid(
                "shift kind",
                format!("unknown shift `{other}`"),
            )),
        }
    }
}

/// Label spaces of one category-shift scenario: the predefined class list
/// (`L_p`), the unlabeled training pool (`L_u`) and the evaluation set (`L_e`).
/// Each set is kept sorted and free of duplicates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawShiftSpec")]
pub struct ShiftSpec {
    #[serde(rename = "L_p")]
    predefined: Vec<u32>,
    #[serde(rename = "L_u")]
    train: Vec<u32>,
    #[serde(rename = "L_e")]
    eval: Vec<u32>,
}

#[derive(Deserialize)]
struct RawShiftSpec {
    #[serde(rename = "L_p")]
    predefined: Vec<u32>,
    #[serde(rename = "L_u")]
    train: Vec<u32>,
    #[serde(rename = "L_e")]
    eval: Vec<u32>,
}

impl TryFrom<RawShiftSpec> for ShiftSpec {
    type Error = Error;

    fn try_from(raw: RawShiftSpec) -> Result<Self> {
        ShiftSpec::new(raw.predefined, raw.train, raw.eval)
    }
}

fn canonical(v: impl IntoIterator<Item = u32>) -> Vec<u32> {
    v.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

fn is_subset(a: &[u32], b: &[u32]) -> bool {
    a.iter().all(|x| b.binary_search(x).is_ok())
}

impl ShiftSpec {
    pub fn new(
        predefined: impl IntoIterator<Item = u32>,
        train: impl IntoIterator<Item = u32>,
        eval: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let spec = ShiftSpec {
            predefined: canonical(predefined),
            train: canonical(train),
            eval: canonical(eval),
        };
        if spec.predefined.is_empty() || spec.train.is_empty() || spec.eval.is_empty() {
            return Err(Error::invalid(
                "shift spec",
                "L_p, L_u and L_e must be non-empty",
            ));
        }
        if !is_subset(&spec.predefined, &spec.eval) {
            return Err(Error::invalid("shift spec", "L_p must be a subset of L_e"));
        }
        if !is_subset(&spec.train, &spec.eval) {
            return Err(Error::invalid("shift spec", "L_u must be a subset of L_e"));
        }
        Ok(spec)
    }

    pub fn predefined(&self) -> &[u32] {
        &self.predefined
    }

    pub fn train(&self) -> &[u32] {
        &self.train
    }

    pub fn eval(&self) -> &[u32] {
        &self.eval
    }

    pub fn is_predefined(&self, label: u32) -> bool {
        self.predefined.binary_search(&label).is_ok()
    }

    pub fn is_train(&self, label: u32) -> bool {
        self.train.binary_search(&label).is_ok()
    }

    pub fn is_eval(&self, label: u32) -> bool {
        self.eval.binary_search(&label).is_ok()
    }

    /// Which of the four scenarios the label spaces describe.
    pub fn kind(&self) -> ShiftKind {
        let u_in_p = is_subset(&self.train, &self.predefined);
        let p_in_u = is_subset(&self.predefined, &self.train);
        match (u_in_p, p_in_u) {
            (true, true) => ShiftKind::Closed,
            (true, false) => ShiftKind::Partial,
            (false, true) => ShiftKind::Open,
            (false, false) => ShiftKind::OpenPartial,
        }
    }
}

/// Builds Table-6-style contiguous splits: `L_p = [0, n_p)`, `L_e = [0, n_e)`,
/// and `L_u` drops the last `n_drop_train` predefined classes and/or adds the
/// next `n_extra_train` classes after `L_p`.
pub fn make_shift_spec(
    kind: ShiftKind,
    n_p: u32,
    n_e: u32,
    n_extra_train: u32,
    n_drop_train: u32,
) -> Result<ShiftSpec> {
    let bad = |msg: String| Err(Error::invalid("shift parameters", msg));
    if n_p == 0 {
        return bad("n_p must be at least 1".into());
    }
    if n_e < n_p {
        return bad(format!("n_e ({n_e}) must be at least n_p ({n_p})"));
    }
    let needs_drop = matches!(kind, ShiftKind::Partial | ShiftKind::OpenPartial);
    let needs_extra = matches!(kind, ShiftKind::Open | ShiftKind::OpenPartial);
    if needs_drop != (n_drop_train > 0) {
        return bad(format!(
            "{kind} requires n_drop_train {} 0, got {n_drop_train}",
            if needs_drop { ">" } else { "=" }
        ));
    }
    if needs_extra != (n_extra_train > 0) {
        return bad(format!(
            "{kind} requires n_extra_train {} 0, got {n_extra_train}",
            if needs_extra { ">" } else { "=" }
        ));
    }
    if n_drop_train >= n_p {
        return bad(format!(
            "n_drop_train ({n_drop_train}) must leave at least one predefined class of {n_p}"
        ));
    }
    if n_p + n_extra_train > n_e {
        return bad(format!(
            "n_p + n_extra_train ({}) exceeds n_e ({n_e})",
            n_p + n_extra_train
        ));
    }
    let train = (0..n_p - n_drop_train).chain(n_p..n_p + n_extra_train);
    ShiftSpec::new(0..n_p, train, 0..n_e)
}

/// The four benchmark datasets whose splits the constructor reproduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchmarkDataset {
    DomainNet,
    VisdaC,
    OfficeHome,
    Office,
}

impl BenchmarkDataset {
    pub const ALL: [BenchmarkDataset; 4] = [
        BenchmarkDataset::DomainNet,
        BenchmarkDataset::VisdaC,
        BenchmarkDataset::OfficeHome,
        BenchmarkDataset::Office,
    ];

    /// `(n_p, n_e, n_extra_train, n_drop_train)`
    pub fn sizes(self) -> (u32, u32, u32, u32) {
        match self {
            BenchmarkDataset::DomainNet => (300, 345, 30, 50),
            BenchmarkDataset::VisdaC => (8, 12, 2, 2),
            BenchmarkDataset::OfficeHome => (50, 65, 10, 15),
            BenchmarkDataset::Office => (25, 31, 3, 10),
        }
    }

    pub fn shift_spec(self, kind: ShiftKind) -> ShiftSpec {
        let (n_p, n_e, extra, drop) = self.sizes();
        let extra = if matches!(kind, ShiftKind::Open | ShiftKind::OpenPartial) {
            extra
        } else {
            0
        };
        let drop = if matches!(kind, ShiftKind::Partial | ShiftKind::OpenPartial) {
            drop
        } else {
            0
        };
        make_shift_spec(kind, n_p, n_e, extra, drop).expect("preset sizes are consistent")
    }
}

/// Rows whose label lies in `L_u`, in their original order.
pub fn select_training_subset(cache: &EmbeddingCache, spec: &ShiftSpec) -> Result<EmbeddingCache> {
    let idx = cache.rows_where(|l| spec.is_train(l));
    if idx.is_empty() {
        return Err(Error::invalid(
            "training subset",
            "no training samples in L_u",
        ));
    }
    cache.select_rows(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(a: u32, b: u32) -> Vec<u32> {
        (a..b).collect()
    }

    #[test]
    fn office_open_partial() {
        let s = make_shift_spec(ShiftKind::OpenPartial, 25, 31, 3, 10).unwrap();
        let mut want = range(0, 15);
        want.extend(25..28);
        assert_eq!(s.train(), want.as_slice());
        assert_eq!(s.predefined(), range(0, 25).as_slice());
        assert_eq!(s.eval(), range(0, 31).as_slice());
        assert_eq!(s.kind(), ShiftKind::OpenPartial);
    }

    #[test]
    fn office_home_open() {
        let s = make_shift_spec(ShiftKind::Open, 50, 65, 10, 0).unwrap();
        assert_eq!(s.train(), range(0, 60).as_slice());
        assert_eq!(s.kind(), ShiftKind::Open);
    }

    #[test]
    fn closed_five() {
        let s = make_shift_spec(ShiftKind::Closed, 5, 5, 0, 0).unwrap();
        assert_eq!(s.predefined(), s.train());
        assert_eq!(s.train(), s.eval());
        assert_eq!(s.kind(), ShiftKind::Closed);
    }

    #[test]
    fn inconsistent_parameters() {
        assert!(make_shift_spec(ShiftKind::Partial, 5, 5, 0, 0).is_err());
        assert!(make_shift_spec(ShiftKind::Partial, 5, 5, 1, 1).is_err());
        assert!(make_shift_spec(ShiftKind::Partial, 5, 5, 0, 5).is_err());
        assert!(make_shift_spec(ShiftKind::Open, 5, 6, 2, 0).is_err());
        assert!(make_shift_spec(ShiftKind::Closed, 5, 4, 0, 0).is_err());
        assert!(make_shift_spec(ShiftKind::Closed, 0, 4, 0, 0).is_err());
        assert!(make_shift_spec(ShiftKind::OpenPartial, 5, 8, 0, 2).is_err());
    }

    #[test]
    fn spec_invariants_enforced() {
        assert!(ShiftSpec::new([0, 1], [0], [0]).is_err());
        assert!(ShiftSpec::new([0], [5], [0, 1]).is_err());
        assert!(ShiftSpec::new(Vec::<u32>::new(), [0], [0]).is_err());
        let s = ShiftSpec::new([1, 0, 1], [0], [0, 1]).unwrap();
        assert_eq!(s.predefined(), &[0, 1]);
    }

    #[test]
    fn json_uses_label_set_keys_and_validates() {
        let s = make_shift_spec(ShiftKind::Partial, 3, 4, 0, 1).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"L_p":[0,1,2],"L_u":[0,1],"L_e":[0,1,2,3]}"#);
        let back: ShiftSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"L_p":[0,9],"L_u":[0],"L_e":[0]}"#;
        assert!(serde_json::from_str::<ShiftSpec>(bad).is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!(
            "open-partial".parse::<ShiftKind>().unwrap(),
            ShiftKind::OpenPartial
        );
        assert_eq!(
            "open_partial".parse::<ShiftKind>().unwrap(),
            ShiftKind::OpenPartial
        );
        assert!("sideways".parse::<ShiftKind>().is_err());
    }

    fn cache_with_labels(labels: Vec<u32>, classes: usize) -> EmbeddingCache {
        let feats = labels.iter().map(|&l| l as f32 + 0.5).collect();
        let names = (0..classes).map(|i| i.to_string()).collect();
        EmbeddingCache::new(1, feats, labels, names).unwrap()
    }

    #[test]
    fn subset_keeps_order() {
        let c = cache_with_labels(vec![0, 1, 2, 3], 4);
        let s = ShiftSpec::new([0, 1], [0, 1], [0, 1, 2, 3]).unwrap();
        let sub = select_training_subset(&c, &s).unwrap();
        assert_eq!(sub.labels(), &[0, 1]);
        assert_eq!(sub.raw_features(), &[0.5, 1.5]);

        let all = ShiftSpec::new([0], [0, 1, 2, 3], [0, 1, 2, 3]).unwrap();
        assert_eq!(select_training_subset(&c, &all).unwrap(), c);
    }

    #[test]
    fn empty_subset_is_an_error() {
        let c = cache_with_labels(vec![2, 3], 4);
        let s = ShiftSpec::new([0], [0, 1], [0, 1, 2, 3]).unwrap();
        let err = select_training_subset(&c, &s).unwrap_err();
        assert!(err.to_string().contains("no training samples in L_u"));
    }
}
