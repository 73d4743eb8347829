// SPDX-License-Identifier: Apache-2.0

//! Distributed dense matrix multiplication with Cannon's algorithm.
//!
//! Workers form a `q x q` torus and talk over plain TCP with a small framed
//! wire format. A coordinator gang-schedules them: everyone starts
//! together, meets at barriers, and the whole gang restarts when one worker
//! fails. The [`driver`] generates seeded inputs, launches workers as
//! threads or processes and gathers the product; [`analysis`] holds the
//! scaling model.
//!
//! ```
//! use cannon::{oracle_multiply, RunConfig, TileF64};
//!
//! let mut cfg = RunConfig::new(4, 2);
//! cfg.reps = 1;
//! let out = cannon::driver::run_typed::<f64>(&cfg).unwrap();
//! let a: TileF64 = cannon::generate_operand(4, 0, cannon::Operand::A);
//! let b: TileF64 = cannon::generate_operand(4, 0, cannon::Operand::B);
//! let want = oracle_multiply(&a, &b).unwrap();
//! let diff = out
//!     .product
//!     .as_slice()
//!     .iter()
//!     .zip(want.as_slice())
//!     .map(|(x, y)| (x - y).abs())
//!     .fold(0.0, f64::max);
//! assert!(diff < 1e-12);
//! ```

pub mod analysis;
pub mod barrier;
pub mod cannon;
pub mod cli;
pub mod driver;
pub mod error;
pub mod meter;
pub mod scalar;
pub mod tile;
pub mod topology;
pub mod transport;

pub use analysis::ScalingModel;
pub use barrier::{
    run_gang, BarrierClient, BarrierOutcome, Coordinator, FaultPlan, FaultPoint, GangConfig, WorkerContext,
    WorkerSession,
};
pub use cannon::{dot_product, dot_product_any, CannonPlan, DotOptions, DotStats};
pub use driver::{
    generate_block, generate_matrix, generate_operand, reduce_avg, run_baseline_allgather, run_distributed,
    Implementation, LaunchMode, Operand, RunConfig, RunReport,
};
pub use error::{Error, Result};
pub use meter::MemoryMeter;
pub use scalar::{Element, ElementType};
pub use tile::{
    assemble_from_blocks, local_dot_accumulate, oracle_multiply, split_into_blocks, AnyTile, DenseTile,
};
pub use topology::{ShiftDim, TorusTopology};
pub use transport::{establish_mesh, HostMap, Mesh, PeerChannel, Timeouts, WireMessage};

pub type TileF64 = DenseTile<f64>;
pub type TileF32 = DenseTile<f32>;
pub type TileI32 = DenseTile<i32>;
pub type ScalingModelF64 = ScalingModel<f64>;
