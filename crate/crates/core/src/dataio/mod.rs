//! File formats, dataset loading, synthetic data and heatmap export.

pub mod embedding;
pub mod heatmap;
pub mod manifest;
pub mod synth;

pub use embedding::{decode_embeddings, encode_embeddings, quantize, read_embeddings, write_embeddings};
pub use heatmap::{export_heatmap, heatmap_csv, parse_coords, parse_heatmap, HeatmapRow};
pub use manifest::{
    format_manifest, parse_grouping, parse_manifest, read_manifest, write_manifest, Dataset, ManifestEntry,
    SlideBag, MANIFEST_FILE,
};
pub use synth::{synth_generate, write_dataset, SyntheticConfig, SyntheticData, SyntheticSlide, PROMPTS_FILE};
