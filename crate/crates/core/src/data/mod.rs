//! Track files, manifests, batching and the synthetic dataset generator.

pub mod dataset;
pub mod manifest;
pub mod synthetic;
pub mod track;

pub use dataset::{Batch, Dataset, Sample};
pub use manifest::{DatasetManifest, Provenance, SampleEntry, Split, TaskKind};
pub use synthetic::{make_synthetic, synthesize, SyntheticSpec};
pub use track::{decode_track, encode_track, read_track, write_track};
