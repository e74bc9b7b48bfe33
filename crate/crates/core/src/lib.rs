//! Statistical model checking of distance-based temporal properties over
//! stochastic discrete-time systems.
//!
//! A model is a finite set of real-valued variables evolved by a guarded
//! transition kernel. The checker simulates empirical evolution sequences,
//! applies perturbations (faults, attacks) to their suffixes, estimates
//! one-sided Wasserstein distances between nominal and perturbed behaviour
//! under penalty functions, and evaluates temporal formulae over those
//! distances — with plain boolean verdicts or three-valued ones that report
//! `unknown` when a threshold falls inside a bootstrap confidence interval.
//!
//! Everything is reproducible: all randomness derives from one master seed
//! through content-addressed streams, so results do not depend on worker
//! count or evaluation order.

pub mod arith;
pub mod checker;
pub mod distance;
pub mod dsl;
pub mod engine;
pub mod expr;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod sim;

pub use checker::{
    sat, sat_three, CheckConfig, CheckError, CheckSession, Formula, ThreeValued,
};
pub use distance::{bootstrap_ci, compute_wass, ConfidenceInterval, Direction};
pub use expr::{DistanceExpr, Rel, TimeInterval};
pub use model::{DataSpace, DataState, Domain, PenaltyFunction, VariableSpec};
pub use perturb::{AtomicEffect, Perturbation};
pub use sim::{simulate, EmpiricalEvolutionSequence, KernelSpec, SampleSet};
