//! Multi-dimensional neighborhood attention on the CPU.
//!
//! Three execution strategies share one coordinate algebra ([`neighborhood`]):
//!
//! * [`reference`]: per-query operators and a dense masked oracle.
//! * [`tiled`]: space-aware query tiles, haloed context tiles and a blocked GEMM,
//!   with attention weights materialized in neighborhood layout.
//! * [`fused`]: haloed key/value tiles streamed through an online softmax; the
//!   attention weights never leave the tile.
//!
//! [`roofline`] models FLOPs and memory traffic, and [`autotune`] searches tile
//! shapes per problem.

pub mod autotune;
pub mod error;
pub mod fused;
pub mod ledger;
pub mod neighborhood;
pub mod problem;
pub mod reference;
pub mod roofline;
pub mod tensor;
pub mod tiled;

pub use error::{NaError, Result};
pub use ledger::AllocationLedger;
pub use neighborhood::{
    halo_range, inverse_neighborhood, neighborhood_contains, partition_dilated, window_start,
    AxisRange, SubProblem,
};
pub use problem::{validate, AxisParams, NaParams, ProblemSpec, TileConfig};
pub use reference::{CompactWeights, LseTensor};
pub use tensor::{DType, Element, Tensor};
