//! Ingestion of precomputed features, sentence manifests and word
//! embeddings, plus the synthetic dataset generator.

pub mod features;
pub mod manifest;
pub mod synthetic;
pub mod vocab;

pub use features::{
    load_feature_file, resample_features, write_feature_file, RawVideoFeatures, VideoFeatures,
};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry};
pub use synthetic::{
    generate_synthetic_dataset, write_synthetic_dataset, PlantedSegment, SplitSpec,
    SyntheticDataset, SyntheticSpec,
};
pub use vocab::{
    build_vocabulary, encode_query, load_embedding_table, tokenize, EmbeddingTable, QueryTokens,
    Vocabulary,
};
