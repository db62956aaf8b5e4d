//! Brute-force and Monte Carlo oracles for the theory-facing code.
//!
//! Oracles recompute every quantity from its definition and share no
//! arithmetic with the main path.

pub mod discrete;
pub mod divergence;
pub mod gradcheck;
pub mod suite;

pub use discrete::{
    bound_coverage_sim, brute_force_collision, check_lemma_43, exact_losses, CoverageOptions,
    CoverageResult, DiscreteInstance, ExactLosses, InstanceShape, LemmaCheck,
};
pub use gradcheck::{finite_diff_check, FdObjective, FdResult, FdSetup, FdStatus};
pub use suite::{run_verify, CoverageSettings, Status, Verdict, VerifyOptions, VerifyReport};
