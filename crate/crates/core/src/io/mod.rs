//! Persistent formats.

mod checkpoint;
mod container;
mod dataset;

pub use checkpoint::{
    ids_digest, load_base, load_composed, load_delta, load_shard, save_base, save_composed, save_delta, save_shard,
    ShardProvenance, LIBRARY_VERSION,
};
pub use container::{read_container, write_container, Header, TensorEntry, FORMAT_VERSION, MAGIC};
pub use dataset::{import_csv, load_dataset, save_dataset};
