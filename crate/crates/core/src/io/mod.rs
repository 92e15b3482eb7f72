//! On-disk formats: FSEB embedding files, dataset manifests and parameter snapshots.

mod fseb;
mod manifest;
mod snapshot;

pub use fseb::{decode, encode, read_embeddings, write_embeddings, HEADER_LEN, MAGIC, VERSION};
pub use manifest::{
    load_dataset, narrow_to_f32, write_dataset, Manifest, ManifestEntry, MANIFEST_VERSION,
};
pub use snapshot::{load_snapshot, save_snapshot, SnapshotIndex, TensorEntry, INDEX_FILE, SNAPSHOT_VERSION};
