//! Tensor container, dataset manifest, batching and the synthetic generator.

pub mod batches;
pub mod manifest;
pub mod qtf;
pub mod synthetic;

pub use batches::{epoch_batches, epoch_order, load_batches, Batch, InMemorySplit};
pub use manifest::{DatasetManifest, ImageEntry, Region, Split};
pub use qtf::{read_tensor, write_tensor};
pub use synthetic::{generate_synthetic, SyntheticConfig};
