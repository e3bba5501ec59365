//! Embedding caches, the EMB1 on-disk format and category-shift splits.

mod cache;
mod shift;

pub use cache::{
    decode_emb1, encode_emb1, load_cache, meta_path, save_cache, CacheMeta, EmbeddingCache,
    UnlabeledPool, EMB1_MAGIC, EMB1_VERSION,
};
pub use shift::{make_shift_spec, select_training_subset, BenchmarkDataset, ShiftKind, ShiftSpec};
