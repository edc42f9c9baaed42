//! Markovian embedding of `Z̄`, the backward Cauchy problem for the value
//! function `V(y, t)`, and replication through `π = B L^T ∂V/∂y`.

mod embedding;
mod fd;
mod fk;
mod value;

pub use embedding::{EmbeddingKind, MarkovEmbedding};
pub use fd::{
    read_grid, solve_cauchy_fd, write_grid, FdConfig, GridValue, GRID_MAGIC, GRID_VERSION,
};
pub use fk::{feynman_kac_gradient, feynman_kac_value, FkOptions};
pub use value::{extract_strategy, replicate, terminal_claim, Claim, FkValue, ValueFunction};
