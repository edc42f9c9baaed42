//! Optimal investment when the appreciation rates of the stocks are random
//! and never observed.
//!
//! The crate simulates the market under the physical and the martingale
//! measure, filters the hidden drift (mixture/Bayes, Kalman–Bucy, Wonham and
//! the tilted power-utility filter), builds the optimal log and power
//! strategies, replicates general optimal claims through a Markovian
//! embedding and a parabolic PDE, and checks the resulting identities by
//! Monte Carlo.
//!
//! The numerical core is generic over [`Real`] (`f32`/`f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the config files and
//! the CLI use.

// `!(x > 0.0)` rejects NaN; indexed loops walk several arrays in step.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::large_enum_variant
)]

pub mod error;
pub mod filters;
pub mod harness;
pub mod likelihood;
pub mod linalg;
pub mod market;
pub mod pde;
pub mod quadrature;
pub mod scalar;
pub mod strategies;
pub mod timefn;

pub use error::{Error, Result};
pub use scalar::Real;

pub type MarketSpec = market::MarketSpec<f64>;
pub type PriorSpec = market::PriorSpec<f64>;
pub type PathBundle = market::PathBundle<f64>;
pub type SamplePath = market::SamplePath<f64>;
pub type TimeGrid = market::TimeGrid<f64>;
pub type FilterState = filters::FilterState<f64>;
pub type TiltedPrior = filters::TiltedPrior<f64>;
pub type Utility = strategies::Utility<f64>;
pub type WealthTrace = strategies::WealthTrace<f64>;
pub type MarkovEmbedding = pde::MarkovEmbedding<f64>;
pub type ValueFunction = pde::ValueFunction<f64>;
pub type LikelihoodState = likelihood::LikelihoodState<f64>;

pub type MarketSpecF32 = market::MarketSpec<f32>;
pub type LikelihoodStateF32 = likelihood::LikelihoodState<f32>;
