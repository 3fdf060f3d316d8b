//! Fixtures shared by the benchmarks.

use ccrs_core::config::{DecodeStrategy, TrainConfig};
use ccrs_core::corpus::{generate_synthetic_corpus, SyntheticSpec};
use ccrs_core::pipeline::{prepare, Bundle, PrepareOptions};

/// Untrained desk-scale model over the default synthetic corpus.
pub fn synthetic_bundle(decode: DecodeStrategy) -> Bundle {
    let corpus = generate_synthetic_corpus(&SyntheticSpec::default());
    let prepared = prepare(&corpus.kg, corpus.conversations, &PrepareOptions::default()).expect("synthetic corpus prepares");
    let mut cfg = TrainConfig::desk_scale();
    cfg.model.dial.decode = decode;
    Bundle::untrained(prepared, cfg).expect("desk-scale config is valid")
}
