//! Maximum-likelihood estimation of low-rank Poisson parameter tensors from
//! zero-inflated count data.
//!
//! The crate provides three estimators built on one box-constrained
//! quasi-Newton solver:
//!
//! * **Poisson** fits every entry of the data tensor, treating all zeros as
//!   genuine observations.
//! * **Oracle** fits only the trusted entries (true zeros and non-zeros), which
//!   requires knowing where the false zeros are.
//! * **ZTP** fits a zero-truncated Poisson likelihood on the non-zero entries
//!   alone, so no zero value is ever consulted.
//!
//! Around them sit a seeded synthetic problem generator, closed-form
//! calculators for the KL divergences and error bounds that govern the
//! estimators, and a sweep harness that writes CSV summaries.

pub mod error;
pub mod estimate;
pub mod experiment;
pub mod generate;
pub mod io;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use estimate::{
    assemble_mask, average_relative_error, fit, relative_error, EstimatorKind, FitResult, FitSpec,
};
pub use generate::{generate_truth, make_instance, sample_counts, sample_omega, GenConfig, ProblemInstance};
pub use losses::{LossKind, Mask, StabilizationPolicy};
pub use optim::{minimize, project, Bounds, OptimOptions, OptimResult, Status};
pub use tensor::{
    kruskal_to_dense, masked_mttkrp, restrict_to_nonzeros, DenseTensor, KruskalModel,
    ObservationSet, Shape, SparseCountTensor, WeightedCoo,
};
