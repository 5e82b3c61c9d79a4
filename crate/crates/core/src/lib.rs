//! Covariate-constrained randomization and inference for multi-arm parallel
//! cluster randomized trials.
//!
//! The crate covers the full workflow:
//!
//! * [`design`] — trial designs, allocation schemes with ±1 treatment
//!   indicators, covariate tables, outcome datasets;
//! * [`balance`] — maximum pairwise l2 and Mahalanobis balance metrics;
//! * [`space`] — enumeration/sampling of the randomization space,
//!   quantile/count constraints, scheme selection, conditional subspaces,
//!   snapshot serialization;
//! * [`lmm`] — the random-intercept linear mixed model fitted by profile
//!   (restricted) maximum likelihood on the closed-form compound-symmetry
//!   covariance;
//! * [`model_tests`] — Wald χ²/F global and z/t pairwise tests with
//!   between-within degrees of freedom, Bonferroni adjustment;
//! * [`rand_tests`] — most-powerful randomization tests (pairwise kernel and
//!   efficient-score statistic), conditional permutation, test-inversion
//!   confidence intervals;
//! * [`sim`] — the Monte Carlo harness for type I error and power studies.

pub mod balance;
pub mod design;
pub mod error;
pub mod lmm;
pub mod seed;
pub mod sim;
pub mod space;

pub use balance::{BalanceColumn, BalanceMetric, BalanceScorer, BalanceSpec};
pub use design::{AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign};
pub use error::{Error, Result};
pub use lmm::{Adjustment, ClusterCovariate, CompoundSymmetry, FitMethod, LmmFit, ModelSpec};
pub use model_tests::{Hypothesis, Reference, TestResult};
pub use rand_tests::{CiResult, NullFit, RandTestResult, ScoreBlocks};
pub use space::{Cutoff, Provenance, RandomizationSpace};
