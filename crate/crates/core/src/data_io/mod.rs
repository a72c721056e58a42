//! Datasets, configuration files, checkpoints and embedding export.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod dataset;
pub mod export;
pub mod synthetic;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{emit_config, load_config, parse_config};
pub use cifar::{load_cifar10, load_cifar10_file, Split};
pub use dataset::Dataset;
pub use export::{export_embeddings, import_raw, EmbeddingFormat};
pub use synthetic::{gen_synthetic_blobs, BlobSpec};
