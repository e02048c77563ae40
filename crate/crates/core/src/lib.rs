//! Head-parallel x context-parallel ("2D") attention, modeled at desk scale.
//!
//! The crate has two halves:
//!
//! * a numerically exact functional model: a dense reference attention
//!   ([`oracle`]), the data-movement primitives that shard a sequence across
//!   a `d_hp x d_cp` grid ([`sharding`]), and a deterministic executor for the
//!   double-ring schedule ([`ring`]);
//! * a performance model: closed-form communication/compute costs
//!   ([`cost`]), a discrete-event overlap simulator ([`sim`]) and a
//!   configuration planner ([`planner`]).
//!
//! The [`cli`] module backs the `ring2d` binary (`verify`, `simulate`,
//! `plan`, `scale`).

pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod oracle;
pub mod planner;
pub mod ring;
pub mod sharding;
pub mod sim;
pub mod tensor;

pub use config::{
    build_rank_grid, validate, ClusterConfig, ConfigFile, GridCoord, ModelConfig, ParallelConfig,
    Placement, RankGrid, ValidationReport, Violation,
};
pub use error::{Error, Result};
pub use oracle::{attention_backward, block_update, full_attention, BlockResult, Gradients};
pub use ring::{build_ring_schedule, run_2d_attention, run_double_ring, RingSchedule};
pub use tensor::{DenseTensor, Scalar};
