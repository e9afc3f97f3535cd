//! File formats, manifests, configuration and deterministic randomness.

pub mod config;
pub mod manifest;
pub mod rng;
pub mod tensor;

pub use config::{ConfigError, RunConfig};
pub use manifest::{parse_manifest, Eye, Label, Manifest, ManifestError, Sex, SubjectRecord};
pub use rng::{streams, sub_seed, Rng};
pub use tensor::{read_tensor, write_tensor, DType, TensorData, TensorError, TensorFile};
