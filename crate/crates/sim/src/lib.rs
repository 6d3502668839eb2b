//! Pipeline-schedule and in-layer sharding simulator.

pub mod error;
pub mod pipeline;
pub mod shard;

pub use error::{Result, SimError};
pub use pipeline::{bubble_ratio, simulate_pipeline, sweep, validate_trace, write_sweep_csv, Dir, PipelineSpec, ScheduleTrace, SweepRow};
pub use shard::{shard_cost, ShardCost, ShardSpec, Strategy};
