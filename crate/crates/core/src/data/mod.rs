//! On-disk formats and dataset loading.

pub mod bag;
pub(crate) mod codec;
pub mod manifest;
pub mod synth;
pub mod text_bank;

pub use bag::{read_bag, read_bag_with_dim, write_bag, PatchBag, PatchCoord};
pub use manifest::{BagEntry, DatasetManifest, Split, Splits, TaskMode};
pub use synth::{generate, generate_synthetic, write_dataset, SyntheticDataset, SyntheticSpec};
pub use text_bank::{load_text_bank, write_text_bank, TextBank};
