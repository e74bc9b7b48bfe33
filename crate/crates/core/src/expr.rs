//! Distance expressions: the layer that turns pointwise Wasserstein
//! estimates into temporal distance measurements.
//!
//! Expressions are evaluated against a nominal/perturbed sequence pair and a
//! time step. Atoms estimate the one-sided distance at that step; temporal
//! operators take minima and maxima over shifted windows, clipped at the
//! evaluation horizon. Confidence intervals propagate through composite
//! nodes by applying each node's defining function to the endpoints.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::distance::{bootstrap_ci, compute_wass, ConfidenceInterval, Direction, DistanceError};
use crate::model::PenaltyFunction;
use crate::perturb::PerturbedSequence;
use crate::rng;
use crate::sim::{EmpiricalEvolutionSequence, SampleSet};

/// A closed step interval `[a, b]` with `a <= b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeInterval {
    pub a: usize,
    pub b: usize,
}

impl TimeInterval {
    pub fn new(a: usize, b: usize) -> Self {
        assert!(a <= b, "interval [{a},{b}] is empty");
        TimeInterval { a, b }
    }

    /// Shift by `tau` and clip at the horizon: [min(a+tau,h), min(b+tau,h)].
    pub fn shift_clipped(&self, tau: usize, h: usize) -> (usize, usize) {
        ((self.a + tau).min(h), (self.b + tau).min(h))
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.a, self.b)
    }
}

/// Threshold relations shared by the sigma operator and formula atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rel {
    Lt,
    Le,
    Ge,
    Gt,
}

impl Rel {
    #[inline]
    pub fn holds(self, v: f64, threshold: f64) -> bool {
        match self {
            Rel::Lt => v < threshold,
            Rel::Le => v <= threshold,
            Rel::Ge => v >= threshold,
            Rel::Gt => v > threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Rel::Lt => "<",
            Rel::Le => "<=",
            Rel::Ge => ">=",
            Rel::Gt => ">",
        }
    }
}

/// Distance expressions over a nominal/perturbed pair of sequences.
#[derive(Debug, Clone)]
pub enum DistanceExpr {
    /// Pointwise distance, nominal to perturbed.
    AtomSx(Arc<PenaltyFunction>),
    /// Pointwise distance, perturbed to nominal.
    AtomDx(Arc<PenaltyFunction>),
    /// Minimum over the shifted window (best case).
    Eventually(TimeInterval, Box<DistanceExpr>),
    /// Maximum over the shifted window (worst case).
    Always(TimeInterval, Box<DistanceExpr>),
    /// Quantitative bounded until.
    Until(Box<DistanceExpr>, TimeInterval, Box<DistanceExpr>),
    Min(Box<DistanceExpr>, Box<DistanceExpr>),
    Max(Box<DistanceExpr>, Box<DistanceExpr>),
    /// Convex combination: weights in (0,1] summing to 1.
    WeightedSum(Vec<(f64, DistanceExpr)>),
    /// 0 if the sub-expression's value is in relation with the threshold,
    /// else 1.
    Sigma(Box<DistanceExpr>, Rel, f64),
}

impl DistanceExpr {
    /// Steps beyond the evaluation time the expression can look at.
    pub fn hdepth(&self) -> usize {
        match self {
            DistanceExpr::AtomSx(_) | DistanceExpr::AtomDx(_) => 0,
            DistanceExpr::Eventually(i, e) | DistanceExpr::Always(i, e) => i.b + e.hdepth(),
            DistanceExpr::Until(e1, i, e2) => i.b + e1.hdepth().max(e2.hdepth()),
            DistanceExpr::Min(a, b) | DistanceExpr::Max(a, b) => a.hdepth().max(b.hdepth()),
            DistanceExpr::WeightedSum(terms) => {
                terms.iter().map(|(_, e)| e.hdepth()).max().unwrap_or(0)
            }
            DistanceExpr::Sigma(e, _, _) => e.hdepth(),
        }
    }

    /// A stable structural identity: equal trees (same operators, windows,
    /// weights, thresholds, and penalty names) hash equal.
    pub fn fingerprint(&self) -> u64 {
        fn absorb_str(h: u64, s: &str) -> u64 {
            s.bytes().fold(h, |acc, b| crate::rng::derive_seed(acc, &[b as u64]))
        }
        fn walk(e: &DistanceExpr, h: u64) -> u64 {
            use crate::rng::derive_seed as d;
            match e {
                DistanceExpr::AtomSx(r) => absorb_str(d(h, &[1]), &r.name),
                DistanceExpr::AtomDx(r) => absorb_str(d(h, &[2]), &r.name),
                DistanceExpr::Eventually(i, e) => walk(e, d(h, &[3, i.a as u64, i.b as u64])),
                DistanceExpr::Always(i, e) => walk(e, d(h, &[4, i.a as u64, i.b as u64])),
                DistanceExpr::Until(a, i, b) => {
                    walk(b, walk(a, d(h, &[5, i.a as u64, i.b as u64])))
                }
                DistanceExpr::Min(a, b) => walk(b, walk(a, d(h, &[6]))),
                DistanceExpr::Max(a, b) => walk(b, walk(a, d(h, &[7]))),
                DistanceExpr::WeightedSum(terms) => {
                    terms.iter().fold(d(h, &[8, terms.len() as u64]), |acc, (w, e)| {
                        walk(e, d(acc, &[w.to_bits()]))
                    })
                }
                DistanceExpr::Sigma(e, rel, z) => {
                    walk(e, d(h, &[9, *rel as u64, z.to_bits()]))
                }
            }
        }
        walk(self, 0x65787072)
    }

    /// The atom reached by always descending the latest window offsets; its
    /// evaluation time is `tau + hdepth`, the deepest time the expression
    /// touches.
    fn deepest_atom(&self, tau: usize) -> (String, usize) {
        match self {
            DistanceExpr::AtomSx(_) | DistanceExpr::AtomDx(_) => (self.to_string(), tau),
            DistanceExpr::Eventually(i, e) | DistanceExpr::Always(i, e) => {
                e.deepest_atom(tau + i.b)
            }
            DistanceExpr::Until(e1, i, e2) => {
                let (a1, t1) = e1.deepest_atom(tau + i.b);
                let (a2, t2) = e2.deepest_atom(tau + i.b);
                if t1 >= t2 {
                    (a1, t1)
                } else {
                    (a2, t2)
                }
            }
            DistanceExpr::Min(a, b) | DistanceExpr::Max(a, b) => {
                let (s1, t1) = a.deepest_atom(tau);
                let (s2, t2) = b.deepest_atom(tau);
                if t1 >= t2 {
                    (s1, t1)
                } else {
                    (s2, t2)
                }
            }
            DistanceExpr::WeightedSum(terms) => terms
                .iter()
                .map(|(_, e)| e.deepest_atom(tau))
                .max_by_key(|(_, t)| *t)
                .unwrap_or(("sum()".into(), tau)),
            DistanceExpr::Sigma(e, _, _) => e.deepest_atom(tau),
        }
    }
}

impl fmt::Display for DistanceExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn term(e: &DistanceExpr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            // Until is the only infix form; parenthesize it in term position.
            if matches!(e, DistanceExpr::Until(..)) {
                write!(f, "(")?;
                fmt::Display::fmt(e, f)?;
                write!(f, ")")
            } else {
                fmt::Display::fmt(e, f)
            }
        }
        match self {
            DistanceExpr::AtomSx(rho) => write!(f, "sx({})", rho.name),
            DistanceExpr::AtomDx(rho) => write!(f, "dx({})", rho.name),
            DistanceExpr::Eventually(i, e) => {
                write!(f, "F{i} ")?;
                term(e, f)
            }
            DistanceExpr::Always(i, e) => {
                write!(f, "G{i} ")?;
                term(e, f)
            }
            DistanceExpr::Until(e1, i, e2) => {
                term(e1, f)?;
                write!(f, " U{i} ")?;
                term(e2, f)
            }
            DistanceExpr::Min(a, b) => write!(f, "min({a}, {b})"),
            DistanceExpr::Max(a, b) => write!(f, "max({a}, {b})"),
            DistanceExpr::WeightedSum(terms) => {
                write!(f, "sum(")?;
                for (i, (w, e)) in terms.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{w}*")?;
                    term(e, f)?;
                }
                write!(f, ")")
            }
            DistanceExpr::Sigma(e, rel, z) => write!(f, "sigma({e}, {} {z})", rel.symbol()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExprEvalError {
    #[error(
        "insufficient horizon: {subterm} is evaluated at time {needed} but samples stop at {available}"
    )]
    InsufficientHorizon {
        subterm: String,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

/// Source of atom evaluations. Production implementations estimate from
/// sample sets; tests drive the evaluators from fixed tables.
pub trait AtomProvider {
    /// Point estimate of the atom at time `t`.
    fn atom(
        &self,
        dir: Direction,
        rho: &Arc<PenaltyFunction>,
        t: usize,
    ) -> Result<f64, ExprEvalError>;

    /// Bootstrap interval of the atom at time `t`.
    fn atom_ci(
        &self,
        dir: Direction,
        rho: &Arc<PenaltyFunction>,
        t: usize,
    ) -> Result<ConfidenceInterval, ExprEvalError>;

    /// Confidence parameters echoed into composite intervals.
    fn ci_params(&self) -> (usize, f64) {
        (0, 0.95)
    }
}

/// Evaluator with an explicit horizon: windows are shifted then clipped at
/// `h` exactly as the semantics prescribes.
pub struct ExprEvaluator<'a, P: AtomProvider> {
    pub provider: &'a P,
    pub horizon: usize,
}

impl<'a, P: AtomProvider> ExprEvaluator<'a, P> {
    pub fn new(provider: &'a P, horizon: usize) -> Self {
        ExprEvaluator { provider, horizon }
    }

    /// Point evaluation at time `tau`. The result lies in [0, 1].
    pub fn eval(&self, e: &DistanceExpr, tau: usize) -> Result<f64, ExprEvalError> {
        Ok(match e {
            DistanceExpr::AtomSx(rho) => self.provider.atom(Direction::Sx, rho, tau)?,
            DistanceExpr::AtomDx(rho) => self.provider.atom(Direction::Dx, rho, tau)?,
            DistanceExpr::Eventually(i, e) => {
                let (lo, hi) = i.shift_clipped(tau, self.horizon);
                let mut best = f64::INFINITY;
                for t in lo..=hi {
                    best = best.min(self.eval(e, t)?);
                }
                best
            }
            DistanceExpr::Always(i, e) => {
                let (lo, hi) = i.shift_clipped(tau, self.horizon);
                let mut worst = f64::NEG_INFINITY;
                for t in lo..=hi {
                    worst = worst.max(self.eval(e, t)?);
                }
                worst
            }
            DistanceExpr::Until(e1, i, e2) => {
                let (lo, hi) = i.shift_clipped(tau, self.horizon);
                let mut best = f64::INFINITY;
                // Running max of e1 over earlier window points; empty max is 0.
                let mut prefix = 0.0f64;
                for t in lo..=hi {
                    let candidate = self.eval(e2, t)?.max(prefix);
                    best = best.min(candidate);
                    prefix = prefix.max(self.eval(e1, t)?);
                }
                best
            }
            DistanceExpr::Min(a, b) => self.eval(a, tau)?.min(self.eval(b, tau)?),
            DistanceExpr::Max(a, b) => self.eval(a, tau)?.max(self.eval(b, tau)?),
            DistanceExpr::WeightedSum(terms) => {
                let mut acc = 0.0;
                for (w, e) in terms {
                    acc += w * self.eval(e, tau)?;
                }
                acc
            }
            DistanceExpr::Sigma(e, rel, z) => {
                if rel.holds(self.eval(e, tau)?, *z) {
                    0.0
                } else {
                    1.0
                }
            }
        })
    }

    /// Interval evaluation at time `tau`: composite nodes apply their
    /// defining function to the endpoints of the sub-intervals.
    pub fn eval_ci(&self, e: &DistanceExpr, tau: usize) -> Result<ConfidenceInterval, ExprEvalError> {
        let (m, level) = self.provider.ci_params();
        Ok(match e {
            DistanceExpr::AtomSx(rho) => self.provider.atom_ci(Direction::Sx, rho, tau)?,
            DistanceExpr::AtomDx(rho) => self.provider.atom_ci(Direction::Dx, rho, tau)?,
            DistanceExpr::Eventually(i, e) => {
                let (lo, hi) = i.shift_clipped(tau, self.horizon);
                let mut acc: Option<ConfidenceInterval> = None;
                for t in lo..=hi {
                    let ci = self.eval_ci(e, t)?;
                    acc = Some(match acc {
                        None => ci,
                        Some(a) => combine(&a, &ci, f64::min, m, level),
                    });
                }
                acc.expect("clipped windows are nonempty")
            }
            DistanceExpr::Always(i, e) => {
                let (lo, hi) = i.shift_clipped(tau, self.horizon);
                let mut acc: Option<ConfidenceInterval> = None;
                for t in lo..=hi {
                    let ci = self.eval_ci(e, t)?;
                    acc = Some(match acc {
                        None => ci,
                        Some(a) => combine(&a, &ci, f64::max, m, level),
                    });
                }
                acc.expect("clipped windows are nonempty")
            }
            DistanceExpr::Until(e1, i, e2) => {
                let (lo, hi) = i.shift_clipped(tau, self.horizon);
                let mut best: Option<[f64; 3]> = None;
                let mut prefix = [0.0f64; 3];
                for t in lo..=hi {
                    let c2 = self.eval_ci(e2, t)?;
                    let cand = [
                        c2.lo.max(prefix[0]),
                        c2.hi.max(prefix[1]),
                        c2.estimate.max(prefix[2]),
                    ];
                    best = Some(match best {
                        None => cand,
                        Some(b) => [b[0].min(cand[0]), b[1].min(cand[1]), b[2].min(cand[2])],
                    });
                    let c1 = self.eval_ci(e1, t)?;
                    prefix = [
                        prefix[0].max(c1.lo),
                        prefix[1].max(c1.hi),
                        prefix[2].max(c1.estimate),
                    ];
                }
                let b = best.expect("clipped windows are nonempty");
                interval(b[0], b[1], b[2], m, level)
            }
            DistanceExpr::Min(a, b) => {
                let ca = self.eval_ci(a, tau)?;
                let cb = self.eval_ci(b, tau)?;
                combine(&ca, &cb, f64::min, m, level)
            }
            DistanceExpr::Max(a, b) => {
                let ca = self.eval_ci(a, tau)?;
                let cb = self.eval_ci(b, tau)?;
                combine(&ca, &cb, f64::max, m, level)
            }
            DistanceExpr::WeightedSum(terms) => {
                let mut lo = 0.0;
                let mut hi = 0.0;
                let mut est = 0.0;
                for (w, e) in terms {
                    let ci = self.eval_ci(e, tau)?;
                    lo += w * ci.lo;
                    hi += w * ci.hi;
                    est += w * ci.estimate;
                }
                interval(lo, hi, est, m, level)
            }
            DistanceExpr::Sigma(e, rel, z) => {
                let ci = self.eval_ci(e, tau)?;
                let all_hold = match rel {
                    Rel::Le => ci.hi <= *z,
                    Rel::Lt => ci.hi < *z,
                    Rel::Ge => ci.lo >= *z,
                    Rel::Gt => ci.lo > *z,
                };
                let none_hold = match rel {
                    Rel::Le => ci.lo > *z,
                    Rel::Lt => ci.lo >= *z,
                    Rel::Ge => ci.hi < *z,
                    Rel::Gt => ci.hi <= *z,
                };
                let est = if rel.holds(ci.estimate, *z) { 0.0 } else { 1.0 };
                if all_hold {
                    ConfidenceInterval::point(0.0, level, m)
                } else if none_hold {
                    ConfidenceInterval::point(1.0, level, m)
                } else {
                    interval(0.0, 1.0, est, m, level)
                }
            }
        })
    }
}

fn interval(lo: f64, hi: f64, estimate: f64, m: usize, level: f64) -> ConfidenceInterval {
    ConfidenceInterval {
        lo,
        hi,
        estimate,
        mean: estimate,
        se: None,
        level,
        m,
    }
}

fn combine(
    a: &ConfidenceInterval,
    b: &ConfidenceInterval,
    f: fn(f64, f64) -> f64,
    m: usize,
    level: f64,
) -> ConfidenceInterval {
    interval(f(a.lo, b.lo), f(a.hi, b.hi), f(a.estimate, b.estimate), m, level)
}

/// Read access to per-time sample sets; implemented by both the nominal
/// sequence and a perturbed one.
pub trait SampleView {
    fn view_set(&self, time: usize) -> &SampleSet;
    fn view_horizon(&self) -> usize;
}

impl SampleView for EmpiricalEvolutionSequence {
    fn view_set(&self, time: usize) -> &SampleSet {
        self.sample_set(time)
    }
    fn view_horizon(&self) -> usize {
        self.horizon()
    }
}

impl SampleView for PerturbedSequence {
    fn view_set(&self, time: usize) -> &SampleSet {
        self.sample_set(time)
    }
    fn view_horizon(&self) -> usize {
        self.horizon()
    }
}

type AtomKey = (Direction, String, usize);

/// Atom provider over a nominal/perturbed pair of sample sequences.
/// Atom evaluations are memoized per (direction, penalty, time): temporal
/// operators revisit times and the Wasserstein estimate dominates cost.
pub struct SequencePairProvider<'a, V: SampleView> {
    nominal: &'a EmpiricalEvolutionSequence,
    perturbed: &'a V,
    /// Bootstrap replicate count.
    pub m: usize,
    /// Confidence level in (0,1).
    pub level: f64,
    /// Master seed for bootstrap streams; each atom derives its own.
    pub ci_seed: u64,
    values: Mutex<HashMap<AtomKey, f64>>,
    intervals: Mutex<HashMap<AtomKey, ConfidenceInterval>>,
}

impl<'a, V: SampleView> SequencePairProvider<'a, V> {
    pub fn new(
        nominal: &'a EmpiricalEvolutionSequence,
        perturbed: &'a V,
        m: usize,
        level: f64,
        ci_seed: u64,
    ) -> Self {
        SequencePairProvider {
            nominal,
            perturbed,
            m,
            level,
            ci_seed,
            values: Mutex::new(HashMap::new()),
            intervals: Mutex::new(HashMap::new()),
        }
    }

    pub fn available_horizon(&self) -> usize {
        self.nominal.horizon().min(self.perturbed.view_horizon())
    }
}

impl<V: SampleView> AtomProvider for SequencePairProvider<'_, V> {
    fn atom(
        &self,
        dir: Direction,
        rho: &Arc<PenaltyFunction>,
        t: usize,
    ) -> Result<f64, ExprEvalError> {
        let key = (dir, rho.name.clone(), t);
        if let Some(v) = self.values.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let v = compute_wass(self.nominal.view_set(t), self.perturbed.view_set(t), dir, rho, t)?;
        self.values.lock().unwrap().insert(key, v);
        Ok(v)
    }

    fn atom_ci(
        &self,
        dir: Direction,
        rho: &Arc<PenaltyFunction>,
        t: usize,
    ) -> Result<ConfidenceInterval, ExprEvalError> {
        let key = (dir, rho.name.clone(), t);
        if let Some(ci) = self.intervals.lock().unwrap().get(&key) {
            return Ok(ci.clone());
        }
        let dir_word = match dir {
            Direction::Sx => 0,
            Direction::Dx => 1,
        };
        let seed = rng::derive_seed(
            self.ci_seed,
            &[dir_word, rho.name.len() as u64, name_hash(&rho.name), t as u64],
        );
        let ci = bootstrap_ci(
            self.nominal.view_set(t),
            self.perturbed.view_set(t),
            dir,
            rho,
            t,
            self.m,
            self.level,
            seed,
        )?;
        self.intervals.lock().unwrap().insert(key, ci.clone());
        Ok(ci)
    }

    fn ci_params(&self) -> (usize, f64) {
        (self.m, self.level)
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    })
}

fn check_horizon(
    e: &DistanceExpr,
    tau: usize,
    available: usize,
) -> Result<(), ExprEvalError> {
    let needed = tau + e.hdepth();
    if needed > available {
        let (subterm, t) = e.deepest_atom(tau);
        Err(ExprEvalError::InsufficientHorizon { subterm, needed: t, available })
    } else {
        Ok(())
    }
}

/// Evaluate `e` at time `tau` over the pair (nominal, perturbed).
///
/// Requires both sequences to reach `tau + hdepth(e)`; the horizon for
/// window clipping is the shared available horizon.
pub fn eval_expr<V: SampleView>(
    nominal: &EmpiricalEvolutionSequence,
    perturbed: &V,
    tau: usize,
    e: &DistanceExpr,
    m: usize,
    level: f64,
    ci_seed: u64,
) -> Result<f64, ExprEvalError> {
    let provider = SequencePairProvider::new(nominal, perturbed, m, level, ci_seed);
    let available = provider.available_horizon();
    check_horizon(e, tau, available)?;
    ExprEvaluator::new(&provider, available).eval(e, tau)
}

/// Interval evaluation of `e` at time `tau` over the pair.
pub fn eval_expr_ci<V: SampleView>(
    nominal: &EmpiricalEvolutionSequence,
    perturbed: &V,
    tau: usize,
    e: &DistanceExpr,
    m: usize,
    level: f64,
    ci_seed: u64,
) -> Result<ConfidenceInterval, ExprEvalError> {
    let provider = SequencePairProvider::new(nominal, perturbed, m, level, ci_seed);
    let available = provider.available_horizon();
    check_horizon(e, tau, available)?;
    ExprEvaluator::new(&provider, available).eval_ci(e, tau)
}
