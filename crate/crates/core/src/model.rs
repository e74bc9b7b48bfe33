//! Data spaces, data states, and penalty functions.
//!
//! A model's vocabulary is a finite ordered set of real-valued variables,
//! each ranging over either a finite set of named levels (encoded as the
//! consecutive reals 0, 1, 2, ... in declaration order) or a compact
//! interval. A data state assigns one in-domain value per variable; a
//! penalty function scores a state in [0, 1] against a task's target,
//! optionally depending on the time step.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::arith::{AExpr, EvalEnv, ExprError};

/// Index of a variable within its [`DataSpace`]'s fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// The domain of one variable.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// Named levels encoded as 0, 1, 2, ... in declaration order.
    FiniteSet(Vec<String>),
    /// A compact interval `[lo, hi]`.
    Interval { lo: f64, hi: f64 },
}

impl Domain {
    pub fn contains(&self, v: f64) -> bool {
        match self {
            Domain::FiniteSet(levels) => {
                v.fract() == 0.0 && v >= 0.0 && (v as usize) < levels.len()
            }
            Domain::Interval { lo, hi } => *lo <= v && v <= *hi,
        }
    }

    /// Encoded value of a level name, if this is a finite domain containing it.
    pub fn level_value(&self, name: &str) -> Option<f64> {
        match self {
            Domain::FiniteSet(levels) => {
                levels.iter().position(|l| l == name).map(|i| i as f64)
            }
            Domain::Interval { .. } => None,
        }
    }

    /// Level name for an encoded value (finite domains only).
    pub fn level_name(&self, v: f64) -> Option<&str> {
        match self {
            Domain::FiniteSet(levels) if self.contains(v) => {
                Some(levels[v as usize].as_str())
            }
            _ => None,
        }
    }
}

/// One variable: a name plus its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    pub domain: Domain,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("variable set is empty")]
    EmptySpace,
    #[error("duplicate variable name `{0}`")]
    DuplicateVariable(String),
    #[error("variable `{name}`: finite domain must have at least one level")]
    EmptyFiniteDomain { name: String },
    #[error("variable `{name}`: duplicate level `{level}`")]
    DuplicateLevel { name: String, level: String },
    #[error("variable `{name}`: interval has lo {lo} > hi {hi}")]
    EmptyInterval { name: String, lo: f64, hi: f64 },
    #[error("state has {got} values but the data space has {expected} variables")]
    ArityMismatch { expected: usize, got: usize },
    #[error("domain violation: {0}")]
    DomainViolation(ViolationReport),
    #[error("penalty `{name}`: {source}")]
    PenaltyEval { name: String, source: ExprError },
}

/// Which variables of a state fell outside their domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    pub violations: Vec<(String, f64)>,
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self
            .violations
            .iter()
            .map(|(name, v)| format!("{name}={v}"))
            .collect();
        write!(f, "{{{}}}", items.join(", "))
    }
}

/// Ordered, immutable variable set. The order is fixed for the lifetime of a
/// model; all states are positionally aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpace {
    variables: Vec<VariableSpec>,
}

impl DataSpace {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self, ModelError> {
        if variables.is_empty() {
            return Err(ModelError::EmptySpace);
        }
        for (i, v) in variables.iter().enumerate() {
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(ModelError::DuplicateVariable(v.name.clone()));
            }
            match &v.domain {
                Domain::FiniteSet(levels) => {
                    if levels.is_empty() {
                        return Err(ModelError::EmptyFiniteDomain { name: v.name.clone() });
                    }
                    for (j, l) in levels.iter().enumerate() {
                        if levels[..j].contains(l) {
                            return Err(ModelError::DuplicateLevel {
                                name: v.name.clone(),
                                level: l.clone(),
                            });
                        }
                    }
                }
                Domain::Interval { lo, hi } => {
                    if !(lo <= hi) {
                        return Err(ModelError::EmptyInterval {
                            name: v.name.clone(),
                            lo: *lo,
                            hi: *hi,
                        });
                    }
                }
            }
        }
        Ok(DataSpace { variables })
    }

    pub fn arity(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn var(&self, id: VarId) -> &VariableSpec {
        &self.variables[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<VarId> {
        self.variables.iter().position(|v| v.name == name).map(VarId)
    }
}

/// One system configuration: a value per variable, aligned with the space.
#[derive(Debug, Clone, PartialEq)]
pub struct DataState {
    values: Vec<f64>,
}

impl DataState {
    pub fn new(values: Vec<f64>) -> Self {
        DataState { values }
    }

    #[inline]
    pub fn get(&self, id: VarId) -> f64 {
        self.values[id.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Check a state against a space. Arity mismatch is reported as its own
/// error; otherwise every out-of-domain variable is listed.
pub fn validate_state(space: &DataSpace, d: &DataState) -> Result<(), ModelError> {
    if d.len() != space.arity() {
        return Err(ModelError::ArityMismatch {
            expected: space.arity(),
            got: d.len(),
        });
    }
    let mut violations = Vec::new();
    for (i, spec) in space.variables.iter().enumerate() {
        let v = d.values[i];
        if !v.is_finite() || !spec.domain.contains(v) {
            violations.push((spec.name.clone(), v));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ModelError::DomainViolation(ViolationReport { violations }))
    }
}

/// A time-indexed penalty: an arithmetic expression over the variables and
/// the free symbol tau, clamped to [0, 1] on evaluation. Penalties not
/// mentioning tau are constant in time.
#[derive(Debug, Clone)]
pub struct PenaltyFunction {
    pub name: String,
    body: AExpr,
    clamp_events: Arc<AtomicU64>,
}

impl PenaltyFunction {
    /// `body` must be deterministic (no sampling nodes); the dsl layer
    /// rejects sampling in penalty position at parse time.
    pub fn new(name: impl Into<String>, body: AExpr) -> Self {
        debug_assert!(!body.samples(), "penalty bodies are deterministic");
        PenaltyFunction {
            name: name.into(),
            body,
            clamp_events: Arc::new(AtomicU64::new(0)),
        }
    }

    /// How many evaluations so far produced a raw value outside [0, 1].
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }
}

/// Evaluate a penalty at time `tau` on a valid state. The raw value is
/// clamped to [0, 1]; clamping bumps the penalty's diagnostic counter.
pub fn eval_penalty(
    rho: &PenaltyFunction,
    tau: usize,
    d: &DataState,
) -> Result<f64, ModelError> {
    let raw = rho
        .body
        .eval_deterministic(&EvalEnv { state: d.values(), lets: &[], tau })
        .map_err(|source| ModelError::PenaltyEval { name: rho.name.clone(), source })?;
    if (0.0..=1.0).contains(&raw) {
        Ok(raw)
    } else {
        rho.clamp_events.fetch_add(1, Ordering::Relaxed);
        Ok(raw.clamp(0.0, 1.0))
    }
}
