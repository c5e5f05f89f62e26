//! Label-efficient online regression under hidden domain shift.
//!
//! The estimators ([`linalg`], [`policy`], [`kernel`], [`nonlinear`]) are
//! generic over [`Scalar`] (`f32` or `f64`). Environments and the
//! experiment harness work in `f64`; the aliases below fix the estimators
//! to that precision.

pub mod env;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod nonlinear;
pub mod policy;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DenseMatrix = linalg::DenseMatrix<f64>;
pub type RlsState = linalg::RlsState<f64>;
pub type PolicyConfig = policy::PolicyConfig<f64>;
pub type RoundDecision = policy::RoundDecision<f64>;
pub type MasterState = policy::MasterState<f64>;
pub type BudgetLedger = policy::BudgetLedger<f64>;
pub type KernelFunction = kernel::KernelFunction<f64>;
pub type KernelState = kernel::KernelState<f64>;
pub type HypothesisTable = nonlinear::HypothesisTable<f64>;
pub type ConfidenceSet = nonlinear::ConfidenceSet<f64>;
pub type NonlinearLearner = nonlinear::NonlinearLearner<f64>;
pub type NonlinearMaster = nonlinear::NonlinearMaster<f64>;
