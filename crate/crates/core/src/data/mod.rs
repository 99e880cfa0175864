//! Ingestion, segmentation, folds, normalization and synthetic domains.

pub mod cache;
pub mod ingest;
pub mod preprocess;
pub mod synthetic;
pub mod types;

pub use cache::{read_bundle, write_bundle, CacheKey};
pub use ingest::{ingest, IngestReport, IngestionSchema, Manifest};
pub use preprocess::{
    fit_source_stats, make_folds, normalize_bundle, resample, segment, stride, window_starts, FoldConfig, STD_FLOOR,
};
pub use synthetic::SyntheticDomain;
pub use types::{class_histogram, ChannelStats, DatasetBundle, FoldSpec, SensorWindow, Split, UserId};
