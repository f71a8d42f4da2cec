//! Bi-sparse blind deconvolution and blind demixing by hierarchical
//! hard-thresholding pursuit (HiHTP).
//!
//! The filter-message pair `(h, b)` is lifted to the block vector `h ⊗ b`,
//! which is `(s, σ)`-sparse when `h` is `s`-sparse and `b` is `σ`-sparse.
//! Recovery then becomes a linear problem solved by [`solver::hihtp_solve`].

pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod hier_sparse;
pub mod operators;
pub mod solver;

pub use error::{Error, Result};
pub use hier_sparse::{
    project, project_hisparse, project_three_level, restrict, ActiveBlock, BlockShape, Depth,
    HiSparseVector, HiSupport, SparsityLevels,
};
pub use operators::{
    circular_convolve, circular_convolve_direct, circular_convolve_fft, rank_one_factor,
    BlindConvOp, Codebook, DemixOp, LinearMap, MeasurementOperator, RankOneFactors,
};
pub use solver::{hihtp_solve, relative_error, SolveReport, SolverConfig, StopReason};
