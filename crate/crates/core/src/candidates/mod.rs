//! Candidate model pools for the two simulated environments.

pub mod recommenders;
pub mod svm;

pub use recommenders::{build_recommender_candidates, default_recommenders, RecommenderKind};
pub use svm::{build_svm_candidates, MultiClassSvm, SvmGrid};
