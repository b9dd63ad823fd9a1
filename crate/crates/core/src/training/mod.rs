//! Trainers and the shared outer-loop machinery.

pub mod bundle;
pub mod config;
pub mod optim;
pub mod outer;
pub mod parallel;
pub mod schedule;
pub mod trainers;
pub mod two_block;

pub use bundle::{BundleArch, MetaBlockArch, ModelBundle, Wiring, GLOBAL_PREFIX, META_PREFIX};
pub use config::{parse_key_values, Decay, TrainConfig, TRAIN_CONFIG_KEYS};
pub use optim::{clip_gradients, global_norm, Adam};
pub use outer::{dropout_rng, run_outer_loop, StepRecord, TaskSampler, TrainReport};
pub use parallel::{canonical_order, map_ordered, parallel_outer_step, shard_ranges, TaskOutcome};
pub use schedule::{lr_schedule, scale_lr, FINAL_LR_FRACTION};
pub use trainers::{fine_tune, maml_train, vanilla_train};
pub use two_block::{limaml_task_step, limaml_train, LimamlTaskResult, SplitBatch};
