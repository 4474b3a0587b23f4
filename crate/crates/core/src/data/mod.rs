//! Synthetic multi-label data: generation, persistence and batching.

mod batch;
mod io;
mod synthetic;

pub use batch::{batch_order, Batch};
pub use io::{format_boosts, load, parse_boosts, save, DataError};
pub use synthetic::{generate, Dataset, Split, SyntheticSpec, TileLayout};
