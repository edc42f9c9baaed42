//! Market model: coefficients, prior on the hidden drift, and path simulation
//! under the physical measure `P` and the martingale measure `P*`.

mod bundle;
mod io;
mod model;
mod prior;
mod simulate;

pub use bundle::{
    discount_factors, quadratic_variation, rate_integral, Measure, PathBundle, SamplePath,
};
pub(crate) use io::fmt;
pub use io::{read_cache, write_cache, write_paths_csv, CACHE_MAGIC, CACHE_VERSION};
pub use model::{
    AffineRate, AffineVol, DriftMap, LocalVol, MarketSpec, PathPrefix, RateModel, ReturnLinkedRate,
    ReturnLinkedVol, TimeGrid, VolField, VolModel,
};
pub use prior::{
    ChainPath, ChainSpec, DiscretePrior, GaussianPrior, OuCoefficients, ParamDraw, PriorSpec,
};
pub use simulate::{prices, simulate_paths, PathNoise, Simulator};
