use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `n` feature rows of width `d` with one integer label each.
///
/// Rows are stored in single precision exactly as they appear on disk and are
/// widened to `f64` when handed to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    d: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    source: String,
    normalized: bool,
}

/// Sidecar metadata stored next to an EMB1 file as `<stem>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub normalized: bool,
}

/// Training features with the labels stripped.
#[derive(Clone, Debug)]
pub struct UnlabeledPool {
    features: Matrix,
}

impl UnlabeledPool {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

impl EmbeddingCache {
    pub fn new(
        d: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("cache", "dimension must be at least 1"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("cache", "cache must hold at least one row"));
        }
        if features.len() != labels.len() * d {
            return Err(Error::Dimension {
                context: "cache features",
                expected: labels.len() * d,
                actual: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "cache",
                format!("non-finite feature at row {} column {}", i / d, i % d),
            ));
        }
        if let Some((row, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= class_names.len())
        {
            return Err(Error::invalid(
                "cache",
                format!(
                    "label {l} at row {row} out of range for {} class names",
                    class_names.len()
                ),
            ));
        }
        Ok(EmbeddingCache {
            d,
            features,
            labels,
            class_names,
            source: String::new(),
            normalized: false,
        })
    }

    /// Builds a cache from `f64` rows, rounding to single precision.
    pub fn from_rows(rows: &Matrix, labels: Vec<u32>, class_names: Vec<String>) -> Result<Self> {
        let features = rows.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(rows.cols(), features, labels, class_names)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn with_normalized(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn raw_features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn meta(&self) -> CacheMeta {
        CacheMeta {
            class_names: self.class_names.clone(),
            source: self.source.clone(),
            normalized: self.normalized,
        }
    }

    /// Features widened to double precision.
    pub fn features(&self) -> Matrix {
        let data = self.features.iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.n(), self.d, data).expect("shape checked at construction")
    }

    /// Drops the labels. This is the only view of the data the trainer accepts.
    pub fn to_unlabeled(&self) -> UnlabeledPool {
        UnlabeledPool {
            features: self.features(),
        }
    }

    /// Keeps the rows at `idx` in the given order. Fails on an empty selection.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(idx.len() * self.d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(
            EmbeddingCache::new(self.d, features, labels, self.class_names.clone())?
                .with_source(self.source.clone())
                .with_normalized(self.normalized),
        )
    }

    /// Indices of rows whose label satisfies `keep`, in original order.
    pub fn rows_where(&self, mut keep: impl FnMut(u32) -> bool) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| keep(l))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Serializes the binary part of a cache.
pub fn encode_emb1(cache: &EmbeddingCache) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (cache.features.len() + cache.n()));
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    out.extend_from_slice(&(cache.n() as u32).to_le_bytes());
    out.extend_from_slice(&(cache.d as u32).to_le_bytes());
    for v in &cache.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &cache.labels {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses EMB1 bytes. Labels are checked against `meta.class_names`.
pub fn decode_emb1(bytes: &[u8], meta: CacheMeta) -> Result<EmbeddingCache> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != EMB1_MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    let version = read_u32(bytes, 4);
    if version != EMB1_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let n = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    if n == 0 || d == 0 {
        return Err(Error::format("header", format!("empty shape n={n} d={d}")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(n))
        .and_then(|w| w.checked_mul(4))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format("header", "declared sizes overflow"))?;
    if bytes.len() != expected {
        let field = if bytes.len() < expected {
            "payload"
        } else {
            "trailing bytes"
        };
        return Err(Error::format(
            field,
            format!(
                "truncated payload: expected {expected} bytes for n={n} d={d}, found {}",
                bytes.len()
            ),
        ));
    }
    let body = &bytes[HEADER_LEN..];
    let (feat_bytes, label_bytes) = body.split_at(n * d * 4);
    let features: Vec<f32> = feat_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            "features",
            format!("non-finite value at row {} column {}", i / d, i % d),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for (row, c) in label_bytes.chunks_exact(4).enumerate() {
        let l = i32::from_le_bytes(c.try_into().unwrap());
        if l < 0 || l as usize >= meta.class_names.len() {
            return Err(Error::format(
                "labels",
                format!(
                    "label {l} at row {row} out of range for {} classes",
                    meta.class_names.len()
                ),
            ));
        }
        labels.push(l as u32);
    }
    Ok(EmbeddingCache {
        d,
        features,
        labels,
        class_names: meta.class_names,
        source: meta.source,
        normalized: meta.normalized,
    })
}

/// `foo.emb` -> `foo.meta.json`
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes `path` and its `<stem>.meta.json` sidecar.
pub fn save_cache(path: impl AsRef<Path>, cache: &EmbeddingCache) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_emb1(cache)).map_err(|e| Error::io(path, e))?;
    let meta = meta_path(path);
    let json = serde_json::to_string_pretty(&cache.meta())?;
    fs::write(&meta, json).map_err(|e| Error::io(meta, e))
}

/// Reads an EMB1 file. Without a sidecar, class names default to `class_<i>`
/// for every label up to the largest one present.
pub fn load_cache(path: impl AsRef<Path>) -> Result<EmbeddingCache> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta_file = meta_path(path);
    let meta = if meta_file.exists() {
        let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("sidecar", e.to_string()))?
    } else {
        let max_label = scan_max_label(&bytes).unwrap_or(0);
        CacheMeta {
            class_names: (0..=max_label).map(|i| format!("class_{i}")).collect(),
            source: String::new(),
            normalized: false,
        }
    };
    decode_emb1(&bytes, meta)
}

fn scan_max_label(bytes: &[u8]) -> Option<u32> {
    if bytes.len() < HEADER_LEN {
        return None;
    }
    let n = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    let start = HEADER_LEN + n.checked_mul(d)?.checked_mul(4)?;
    let labels = bytes.get(start..start.checked_add(n.checked_mul(4)?)?)?;
    labels
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .filter(|&l| l >= 0)
        .map(|l| l as u32)
        .max()
}
