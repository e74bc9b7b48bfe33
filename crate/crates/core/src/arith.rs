//! The guard/update sub-language shared by kernels, atomic effects, and
//! penalty bodies: arithmetic over the current state, the time step, named
//! per-step bindings, and (in update position only) uniform sampling.

use rand_core::RngCore;
use thiserror::Error;

use crate::model::VarId;
use crate::rng;

/// Index of a `let` binding within its rule set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LetId(pub usize);

/// Comparison operators of the guard language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    #[inline]
    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }
}

/// Arithmetic expressions. `Uniform` is only legal where a sampler is in
/// scope (kernel and effect right-hand sides); penalty and guard positions
/// are validated to be sampling-free.
#[derive(Debug, Clone, PartialEq)]
pub enum AExpr {
    Const(f64),
    Var(VarId),
    Let(LetId),
    /// The current time step.
    Time,
    Neg(Box<AExpr>),
    Add(Box<AExpr>, Box<AExpr>),
    Sub(Box<AExpr>, Box<AExpr>),
    Mul(Box<AExpr>, Box<AExpr>),
    Div(Box<AExpr>, Box<AExpr>),
    Abs(Box<AExpr>),
    Min(Box<AExpr>, Box<AExpr>),
    Max(Box<AExpr>, Box<AExpr>),
    /// 1.0 if the condition holds, else 0.0.
    Ind(Box<BExpr>),
    /// Uniform draw in [lo, hi]; bounds evaluated first (left, then right).
    Uniform(Box<AExpr>, Box<AExpr>),
}

/// Boolean guard expressions.
#[derive(Debug, Clone, PartialEq)]
pub enum BExpr {
    Const(bool),
    Cmp(CmpOp, AExpr, AExpr),
    Not(Box<BExpr>),
    And(Box<BExpr>, Box<BExpr>),
    Or(Box<BExpr>, Box<BExpr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("expression produced a non-finite value ({0})")]
    NonFinite(f64),
    #[error("sampling expression evaluated in a deterministic context")]
    SamplingNotAllowed,
    #[error("uniform bounds are inverted: lo {lo} > hi {hi}")]
    InvertedUniformBounds { lo: f64, hi: f64 },
}

/// Evaluation environment: the pre-step state, already-evaluated `let`
/// values, and the time step.
pub struct EvalEnv<'a> {
    pub state: &'a [f64],
    pub lets: &'a [f64],
    pub tau: usize,
}

trait Sampler {
    fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64, ExprError>;
}

struct RngSampler<'a, R: RngCore>(&'a mut R);

impl<R: RngCore> Sampler for RngSampler<'_, R> {
    #[inline]
    fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64, ExprError> {
        Ok(rng::uniform(self.0, lo, hi))
    }
}

struct NoSampler;

impl Sampler for NoSampler {
    fn uniform(&mut self, _lo: f64, _hi: f64) -> Result<f64, ExprError> {
        Err(ExprError::SamplingNotAllowed)
    }
}

impl AExpr {
    /// Does the expression contain a sampling node?
    pub fn samples(&self) -> bool {
        match self {
            AExpr::Const(_) | AExpr::Var(_) | AExpr::Let(_) | AExpr::Time => false,
            AExpr::Neg(e) | AExpr::Abs(e) => e.samples(),
            AExpr::Add(a, b)
            | AExpr::Sub(a, b)
            | AExpr::Mul(a, b)
            | AExpr::Div(a, b)
            | AExpr::Min(a, b)
            | AExpr::Max(a, b) => a.samples() || b.samples(),
            AExpr::Ind(b) => b.samples(),
            AExpr::Uniform(_, _) => true,
        }
    }

    fn eval_with<S: Sampler>(&self, env: &EvalEnv<'_>, s: &mut S) -> Result<f64, ExprError> {
        Ok(match self {
            AExpr::Const(c) => *c,
            AExpr::Var(id) => env.state[id.0],
            AExpr::Let(id) => env.lets[id.0],
            AExpr::Time => env.tau as f64,
            AExpr::Neg(e) => -e.eval_with(env, s)?,
            AExpr::Add(a, b) => a.eval_with(env, s)? + b.eval_with(env, s)?,
            AExpr::Sub(a, b) => a.eval_with(env, s)? - b.eval_with(env, s)?,
            AExpr::Mul(a, b) => a.eval_with(env, s)? * b.eval_with(env, s)?,
            AExpr::Div(a, b) => a.eval_with(env, s)? / b.eval_with(env, s)?,
            AExpr::Abs(e) => e.eval_with(env, s)?.abs(),
            AExpr::Min(a, b) => a.eval_with(env, s)?.min(b.eval_with(env, s)?),
            AExpr::Max(a, b) => a.eval_with(env, s)?.max(b.eval_with(env, s)?),
            AExpr::Ind(b) => {
                if b.eval_with(env, s)? {
                    1.0
                } else {
                    0.0
                }
            }
            AExpr::Uniform(lo, hi) => {
                let l = lo.eval_with(env, s)?;
                let h = hi.eval_with(env, s)?;
                if l > h {
                    return Err(ExprError::InvertedUniformBounds { lo: l, hi: h });
                }
                s.uniform(l, h)?
            }
        })
    }

    /// Evaluate with a sampler in scope; non-finite results are rejected.
    pub fn eval<R: RngCore>(&self, env: &EvalEnv<'_>, rng: &mut R) -> Result<f64, ExprError> {
        let v = self.eval_with(env, &mut RngSampler(rng))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFinite(v))
        }
    }

    /// Evaluate in a deterministic context (penalties, guards). Sampling
    /// nodes are an error here, not a silent draw.
    pub fn eval_deterministic(&self, env: &EvalEnv<'_>) -> Result<f64, ExprError> {
        let v = self.eval_with(env, &mut NoSampler)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFinite(v))
        }
    }
}

impl BExpr {
    pub fn samples(&self) -> bool {
        match self {
            BExpr::Const(_) => false,
            BExpr::Cmp(_, a, b) => a.samples() || b.samples(),
            BExpr::Not(b) => b.samples(),
            BExpr::And(a, b) | BExpr::Or(a, b) => a.samples() || b.samples(),
        }
    }

    fn eval_with<S: Sampler>(&self, env: &EvalEnv<'_>, s: &mut S) -> Result<bool, ExprError> {
        Ok(match self {
            BExpr::Const(b) => *b,
            BExpr::Cmp(op, a, b) => op.holds(a.eval_with(env, s)?, b.eval_with(env, s)?),
            BExpr::Not(b) => !b.eval_with(env, s)?,
            BExpr::And(a, b) => a.eval_with(env, s)? && b.eval_with(env, s)?,
            BExpr::Or(a, b) => a.eval_with(env, s)? || b.eval_with(env, s)?,
        })
    }

    pub fn eval_deterministic(&self, env: &EvalEnv<'_>) -> Result<bool, ExprError> {
        self.eval_with(env, &mut NoSampler)
    }
}

/// Where a rule came from, for runtime error reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleLocation {
    /// `kernel` or the effect name.
    pub owner: String,
    /// Human-readable rule description, e.g. `temp' = ...` or `let v = ...`.
    pub rule: String,
    /// 1-based source line when the rule came from a parsed file.
    pub line: Option<u32>,
}

impl std::fmt::Display for RuleLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "{} (line {}): {}", self.owner, line, self.rule),
            None => write!(f, "{}: {}", self.owner, self.rule),
        }
    }
}

/// One arm of a guarded `let`: the first arm whose guard holds supplies the
/// binding's value for the step.
#[derive(Debug, Clone)]
pub struct LetArm {
    pub guard: Option<BExpr>,
    pub value: AExpr,
    pub location: RuleLocation,
}

/// A named per-step binding with its ordered arms.
#[derive(Debug, Clone)]
pub struct LetBinding {
    pub name: String,
    pub arms: Vec<LetArm>,
}

/// One guarded update of a target variable.
#[derive(Debug, Clone)]
pub struct UpdateRule {
    pub target: VarId,
    pub guard: Option<BExpr>,
    pub value: AExpr,
    pub location: RuleLocation,
}

/// Guarded updates plus shared per-step bindings. Semantics per step:
/// bindings are evaluated first, in order; then for each target variable the
/// first rule whose guard holds fires, reading the pre-step state only;
/// unwritten variables carry over unchanged.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    pub lets: Vec<LetBinding>,
    pub updates: Vec<UpdateRule>,
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("{location}: {source}")]
    Eval {
        location: RuleLocation,
        source: ExprError,
    },
    #[error("{location}: no arm of the binding matched the current state")]
    NoLetArm { location: RuleLocation },
}

impl RuleSet {
    pub fn is_identity(&self) -> bool {
        self.lets.is_empty() && self.updates.is_empty()
    }

    /// Compute the post-step values into `out`. `out` must have the arity of
    /// the state; unwritten variables carry over from `pre`.
    pub fn apply_into<R: RngCore>(
        &self,
        pre: &[f64],
        tau: usize,
        rng: &mut R,
        lets_buf: &mut Vec<f64>,
        out: &mut [f64],
    ) -> Result<(), RuleError> {
        lets_buf.clear();
        for binding in &self.lets {
            let env = EvalEnv { state: pre, lets: lets_buf, tau };
            let mut fired = None;
            for arm in &binding.arms {
                let hold = match &arm.guard {
                    Some(g) => g.eval_deterministic(&env).map_err(|source| RuleError::Eval {
                        location: arm.location.clone(),
                        source,
                    })?,
                    None => true,
                };
                if hold {
                    fired = Some(arm);
                    break;
                }
            }
            let Some(arm) = fired else {
                return Err(RuleError::NoLetArm {
                    location: binding.arms.last().expect("nonempty arms").location.clone(),
                });
            };
            let v = arm.value.eval(&env, rng).map_err(|source| RuleError::Eval {
                location: arm.location.clone(),
                source,
            })?;
            lets_buf.push(v);
        }

        debug_assert_eq!(pre.len(), out.len());
        out.copy_from_slice(pre);
        let mut written = vec![false; pre.len()];
        let env = EvalEnv { state: pre, lets: lets_buf, tau };
        for rule in &self.updates {
            if written[rule.target.0] {
                continue;
            }
            let hold = match &rule.guard {
                Some(g) => g.eval_deterministic(&env).map_err(|source| RuleError::Eval {
                    location: rule.location.clone(),
                    source,
                })?,
                None => true,
            };
            if hold {
                let v = rule.value.eval(&env, rng).map_err(|source| RuleError::Eval {
                    location: rule.location.clone(),
                    source,
                })?;
                out[rule.target.0] = v;
                written[rule.target.0] = true;
            }
        }
        Ok(())
    }
}
