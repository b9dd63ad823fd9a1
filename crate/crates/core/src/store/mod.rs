//! Embedding snapshots and model checkpoints.

pub mod checkpoint;
pub mod snapshot;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointModel, CreationInfo, FlatParams,
};
pub use snapshot::{
    read_snapshot, write_atomic, write_snapshot, EmbeddingSnapshot, FIXED_OVERHEAD,
    INDEX_ENTRY_OVERHEAD,
};
