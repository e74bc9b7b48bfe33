//! Formula layer: boolean satisfaction over empirical sequences, the
//! perturbed-suffix construction, horizon computation, and the three-valued
//! verdicts that account for statistical uncertainty.
//!
//! A check session owns the nominal sequence plus two memo layers: perturbed
//! suffixes keyed by (perturbation fingerprint, application time), and atom
//! evaluations keyed by content. All randomness is derived from the config
//! seed and those keys, so verdicts are independent of evaluation order,
//! caching, and worker count.

use std::collections::HashMap;
use std::fmt;
use std::ops;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::distance::{bootstrap_ci, compute_wass, ConfidenceInterval, Direction};
use crate::expr::{
    AtomProvider, DistanceExpr, ExprEvalError, ExprEvaluator, Rel, TimeInterval,
};
use crate::model::{DataState, PenaltyFunction};
use crate::perturb::{sim_per_with, Perturbation, PerturbedSequence, SimPerError, SuffixSeedMode};
use crate::rng::{self, purpose};
use crate::sim::{simulate, EmpiricalEvolutionSequence, KernelSpec, SimError};

/// An atomic proposition: compare a distance expression, evaluated against
/// the suffix perturbed by `perturbation` at the current time, with `eta`.
#[derive(Debug, Clone)]
pub struct Atomic {
    pub expr: Arc<DistanceExpr>,
    pub perturbation: Arc<Perturbation>,
    pub rel: Rel,
    pub eta: f64,
}

/// RobTL formulae. `Or`, `Implies`, `F`, and `G` are derived forms; the
/// constructors below expand them.
#[derive(Debug, Clone)]
pub enum Formula {
    True,
    Atomic(Atomic),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Until(Box<Formula>, TimeInterval, Box<Formula>),
}

impl Formula {
    pub fn atomic(
        expr: Arc<DistanceExpr>,
        perturbation: Arc<Perturbation>,
        rel: Rel,
        eta: f64,
    ) -> Formula {
        Formula::Atomic(Atomic { expr, perturbation, rel, eta })
    }

    pub fn not(phi: Formula) -> Formula {
        Formula::Not(Box::new(phi))
    }

    pub fn and(a: Formula, b: Formula) -> Formula {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Formula {
        // a | b == !(!a & !b)
        Formula::not(Formula::and(Formula::not(a), Formula::not(b)))
    }

    pub fn implies(a: Formula, b: Formula) -> Formula {
        Formula::or(Formula::not(a), b)
    }

    pub fn until(a: Formula, i: TimeInterval, b: Formula) -> Formula {
        Formula::Until(Box::new(a), i, Box::new(b))
    }

    /// F[I] phi == true U[I] phi
    pub fn eventually(i: TimeInterval, phi: Formula) -> Formula {
        Formula::until(Formula::True, i, phi)
    }

    /// G[I] phi == !F[I] !phi
    pub fn globally(i: TimeInterval, phi: Formula) -> Formula {
        Formula::not(Formula::eventually(i, Formula::not(phi)))
    }

    /// Simulation steps needed to evaluate the formula at time 0.
    pub fn horizon(&self) -> usize {
        match self {
            Formula::True => 0,
            Formula::Atomic(a) => a.expr.hdepth(),
            Formula::Not(phi) => phi.horizon(),
            Formula::And(a, b) => a.horizon().max(b.horizon()),
            Formula::Until(a, i, b) => i.b + a.horizon().max(b.horizon()),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Precedence: ! binds tightest, then U[a,b] (non-associative),
        // then & (left-associative).
        fn paren_if(cond: bool, phi: &Formula, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            if cond {
                write!(f, "(")?;
                fmt::Display::fmt(phi, f)?;
                write!(f, ")")
            } else {
                fmt::Display::fmt(phi, f)
            }
        }
        match self {
            Formula::True => write!(f, "true"),
            Formula::Atomic(a) => {
                write!(f, "D[{}, {}] {} {}", a.expr, a.perturbation, a.rel.symbol(), a.eta)
            }
            Formula::Not(inner) => {
                write!(f, "!")?;
                paren_if(matches!(**inner, Formula::And(..) | Formula::Until(..)), inner, f)
            }
            Formula::And(a, b) => {
                fmt::Display::fmt(a, f)?;
                write!(f, " & ")?;
                paren_if(matches!(**b, Formula::And(..)), b, f)
            }
            Formula::Until(a, i, b) => {
                paren_if(matches!(**a, Formula::And(..) | Formula::Until(..)), a, f)?;
                write!(f, " U{i} ")?;
                paren_if(matches!(**b, Formula::And(..) | Formula::Until(..)), b, f)
            }
        }
    }
}

/// Verdicts of the three-valued semantics, ordered bottom < unknown < top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ThreeValued {
    Bottom,
    Unknown,
    Top,
}

impl ThreeValued {
    pub fn from_bool(b: bool) -> Self {
        if b {
            ThreeValued::Top
        } else {
            ThreeValued::Bottom
        }
    }

    /// The plot encoding: top -> 1, unknown -> 0, bottom -> -1.
    pub fn encode(self) -> i8 {
        match self {
            ThreeValued::Top => 1,
            ThreeValued::Unknown => 0,
            ThreeValued::Bottom => -1,
        }
    }
}

impl fmt::Display for ThreeValued {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThreeValued::Top => write!(f, "true"),
            ThreeValued::Unknown => write!(f, "unknown"),
            ThreeValued::Bottom => write!(f, "false"),
        }
    }
}

impl ops::Not for ThreeValued {
    type Output = ThreeValued;
    fn not(self) -> ThreeValued {
        match self {
            ThreeValued::Top => ThreeValued::Bottom,
            ThreeValued::Unknown => ThreeValued::Unknown,
            ThreeValued::Bottom => ThreeValued::Top,
        }
    }
}

impl ops::BitAnd for ThreeValued {
    type Output = ThreeValued;
    fn bitand(self, rhs: ThreeValued) -> ThreeValued {
        self.min(rhs)
    }
}

impl ops::BitOr for ThreeValued {
    type Output = ThreeValued;
    fn bitor(self, rhs: ThreeValued) -> ThreeValued {
        self.max(rhs)
    }
}

/// Sampling and estimation parameters of one check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckConfig {
    /// Trajectories in the nominal sequence.
    pub n: usize,
    /// Amplification factor of perturbed suffixes.
    pub ell: usize,
    /// Bootstrap replicate count.
    pub m: usize,
    /// Confidence level in (0,1).
    pub level: f64,
    /// Master seed; every stream in the check derives from it.
    pub seed: u64,
    /// Optional global horizon cap; windows clip here.
    pub horizon_cap: Option<usize>,
    /// Whether perturbed suffixes share the nominal kernel streams.
    #[serde(skip)]
    pub suffix_mode: SuffixSeedMode,
}

impl CheckConfig {
    pub fn with_seed(seed: u64) -> Self {
        CheckConfig {
            n: 100,
            ell: 10,
            m: 50,
            level: 0.95,
            seed,
            horizon_cap: None,
            suffix_mode: SuffixSeedMode::Independent,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("insufficient horizon: evaluation at time {tau} needs samples up to {needed} but the sequence stops at {available}")]
    InsufficientHorizon {
        tau: usize,
        needed: usize,
        available: usize,
    },
    #[error("evaluation time {tau} lies beyond the horizon cap {cap}")]
    TauBeyondCap { tau: usize, cap: usize },
    #[error(transparent)]
    Expr(#[from] ExprEvalError),
    #[error(transparent)]
    SimPer(#[from] SimPerError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Re-simulate the suffix of `base` from `tau` under `p`, amplified by
/// `ell`, with kernel/effect randomness from `seed`.
pub fn perturbed_suffix(
    base: &Arc<EmpiricalEvolutionSequence>,
    p: &Perturbation,
    tau: usize,
    ell: usize,
    seed: u64,
) -> Result<PerturbedSequence, SimPerError> {
    sim_per_with(base, p, tau, ell, seed, SuffixSeedMode::Independent)
}

/// Source of atomic verdicts, letting the formula evaluators run over
/// either real estimation (a [`CheckSession`]) or fixed tables in tests.
pub trait FormulaAtoms {
    fn atomic_bool(&self, a: &Atomic, tau: usize) -> Result<bool, CheckError>;
    fn atomic_three(&self, a: &Atomic, tau: usize) -> Result<ThreeValued, CheckError>;
}

/// Boolean satisfaction at `tau`, clipping windows at `h`.
pub fn eval_formula_bool<P: FormulaAtoms>(
    atoms: &P,
    h: usize,
    tau: usize,
    phi: &Formula,
) -> Result<bool, CheckError> {
    Ok(match phi {
        Formula::True => true,
        Formula::Atomic(a) => atoms.atomic_bool(a, tau)?,
        Formula::Not(inner) => !eval_formula_bool(atoms, h, tau, inner)?,
        Formula::And(a, b) => {
            eval_formula_bool(atoms, h, tau, a)? && eval_formula_bool(atoms, h, tau, b)?
        }
        Formula::Until(a, i, b) => {
            let (lo, hi) = i.shift_clipped(tau, h);
            let mut ok = false;
            for t in lo..=hi {
                if eval_formula_bool(atoms, h, t, b)? {
                    ok = true;
                    break;
                }
                if !eval_formula_bool(atoms, h, t, a)? {
                    break;
                }
            }
            ok
        }
    })
}

/// Three-valued verdict at `tau`, clipping windows at `h`.
pub fn eval_formula_three<P: FormulaAtoms>(
    atoms: &P,
    h: usize,
    tau: usize,
    phi: &Formula,
) -> Result<ThreeValued, CheckError> {
    use ThreeValued::*;
    Ok(match phi {
        Formula::True => Top,
        Formula::Atomic(a) => atoms.atomic_three(a, tau)?,
        Formula::Not(inner) => !eval_formula_three(atoms, h, tau, inner)?,
        Formula::And(a, b) => {
            eval_formula_three(atoms, h, tau, a)? & eval_formula_three(atoms, h, tau, b)?
        }
        Formula::Until(a, i, b) => {
            let (lo, hi) = i.shift_clipped(tau, h);
            let mut acc = Bottom;
            let mut prefix = Top;
            for t in lo..=hi {
                let cand = eval_formula_three(atoms, h, t, b)? & prefix;
                acc = acc | cand;
                if acc == Top {
                    break;
                }
                prefix = prefix & eval_formula_three(atoms, h, t, a)?;
                if prefix == Bottom {
                    break;
                }
            }
            acc
        }
    })
}

struct SuffixEntry {
    seq: Arc<PerturbedSequence>,
    /// Seed for bootstrap streams over this suffix.
    ci_seed: u64,
    values: Mutex<HashMap<(Direction, String, usize), f64>>,
    intervals: Mutex<HashMap<(Direction, String, usize), ConfidenceInterval>>,
}

/// Provider view over one suffix entry; feeds the expression evaluator.
struct EntryProvider<'a> {
    nominal: &'a EmpiricalEvolutionSequence,
    entry: &'a SuffixEntry,
    m: usize,
    level: f64,
}

impl AtomProvider for EntryProvider<'_> {
    fn atom(
        &self,
        dir: Direction,
        rho: &Arc<PenaltyFunction>,
        t: usize,
    ) -> Result<f64, ExprEvalError> {
        let key = (dir, rho.name.clone(), t);
        if let Some(v) = self.entry.values.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let v =
            compute_wass(self.nominal.sample_set(t), self.entry.seq.sample_set(t), dir, rho, t)?;
        self.entry.values.lock().unwrap().insert(key, v);
        Ok(v)
    }

    fn atom_ci(
        &self,
        dir: Direction,
        rho: &Arc<PenaltyFunction>,
        t: usize,
    ) -> Result<ConfidenceInterval, ExprEvalError> {
        let key = (dir, rho.name.clone(), t);
        if let Some(ci) = self.entry.intervals.lock().unwrap().get(&key) {
            return Ok(ci.clone());
        }
        let dir_word = match dir {
            Direction::Sx => 0,
            Direction::Dx => 1,
        };
        let mut seed = rng::derive_seed(self.entry.ci_seed, &[dir_word, t as u64]);
        for b in rho.name.as_bytes() {
            seed = rng::derive_seed(seed, &[*b as u64]);
        }
        let ci = bootstrap_ci(
            self.nominal.sample_set(t),
            self.entry.seq.sample_set(t),
            dir,
            rho,
            t,
            self.m,
            self.level,
            seed,
        )?;
        self.entry.intervals.lock().unwrap().insert(key, ci.clone());
        Ok(ci)
    }

    fn ci_params(&self) -> (usize, f64) {
        (self.m, self.level)
    }
}

/// Evaluation context for one nominal sequence and one configuration.
///
/// Perturbed suffixes are cached per (perturbation, application time) with a
/// small bounded cache; atom values and intervals are memoized per content
/// key. Eviction never changes results because all draws are content-keyed.
pub struct CheckSession {
    nominal: Arc<EmpiricalEvolutionSequence>,
    config: CheckConfig,
    suffixes: Mutex<SuffixCache>,
    atom_values: Mutex<HashMap<(u64, u64, usize), f64>>,
    atom_intervals: Mutex<HashMap<(u64, u64, usize), ConfidenceInterval>>,
}

struct SuffixCache {
    capacity: usize,
    entries: Vec<((u64, usize), Arc<SuffixEntry>)>,
}

impl SuffixCache {
    fn get_or_insert(
        &mut self,
        key: (u64, usize),
        build: impl FnOnce() -> Result<SuffixEntry, CheckError>,
    ) -> Result<Arc<SuffixEntry>, CheckError> {
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            let entry = self.entries.remove(pos);
            self.entries.push(entry);
            return Ok(self.entries.last().unwrap().1.clone());
        }
        let entry = Arc::new(build()?);
        if self.entries.len() >= self.capacity {
            self.entries.remove(0);
        }
        self.entries.push((key, entry.clone()));
        Ok(entry)
    }
}

impl CheckSession {
    pub fn new(nominal: Arc<EmpiricalEvolutionSequence>, config: CheckConfig) -> Self {
        CheckSession {
            nominal,
            config,
            suffixes: Mutex::new(SuffixCache { capacity: 4, entries: Vec::new() }),
            atom_values: Mutex::new(HashMap::new()),
            atom_intervals: Mutex::new(HashMap::new()),
        }
    }

    pub fn nominal(&self) -> &Arc<EmpiricalEvolutionSequence> {
        &self.nominal
    }

    pub fn config(&self) -> &CheckConfig {
        &self.config
    }

    /// The horizon used for window clipping.
    fn clip_horizon(&self) -> usize {
        self.config.horizon_cap.unwrap_or(usize::MAX / 2)
    }

    fn check_budget(&self, tau: usize, phi: &Formula) -> Result<(), CheckError> {
        if let Some(cap) = self.config.horizon_cap {
            if tau > cap {
                return Err(CheckError::TauBeyondCap { tau, cap });
            }
        }
        let mut needed = tau + phi.horizon();
        if let Some(cap) = self.config.horizon_cap {
            needed = needed.min(cap);
        }
        let available = self.nominal.horizon();
        if needed > available {
            return Err(CheckError::InsufficientHorizon { tau, needed, available });
        }
        Ok(())
    }

    fn suffix_entry(&self, p: &Arc<Perturbation>, tau: usize) -> Result<Arc<SuffixEntry>, CheckError> {
        let fp = p.fingerprint();
        self.suffixes.lock().unwrap().get_or_insert((fp, tau), || {
            let seed =
                rng::derive_seed(self.config.seed, &[purpose::SUFFIX, fp, tau as u64]);
            let seq = sim_per_with(
                &self.nominal,
                p,
                tau,
                self.config.ell,
                seed,
                self.config.suffix_mode,
            )?;
            let ci_seed = rng::derive_seed(seed, &[purpose::BOOTSTRAP]);
            Ok(SuffixEntry {
                seq: Arc::new(seq),
                ci_seed,
                values: Mutex::new(HashMap::new()),
                intervals: Mutex::new(HashMap::new()),
            })
        })
    }

    /// Point value of an atomic proposition's expression at `tau`.
    pub fn atom_value(&self, a: &Atomic, tau: usize) -> Result<f64, CheckError> {
        let key = (a.perturbation.fingerprint(), a.expr.fingerprint(), tau);
        if let Some(v) = self.atom_values.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let entry = self.suffix_entry(&a.perturbation, tau)?;
        let provider = EntryProvider {
            nominal: &self.nominal,
            entry: &entry,
            m: self.config.m,
            level: self.config.level,
        };
        let v = ExprEvaluator::new(&provider, self.clip_horizon()).eval(&a.expr, tau)?;
        self.atom_values.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// Confidence interval of an atomic proposition's expression at `tau`.
    pub fn atom_interval(&self, a: &Atomic, tau: usize) -> Result<ConfidenceInterval, CheckError> {
        let key = (a.perturbation.fingerprint(), a.expr.fingerprint(), tau);
        if let Some(ci) = self.atom_intervals.lock().unwrap().get(&key) {
            return Ok(ci.clone());
        }
        let entry = self.suffix_entry(&a.perturbation, tau)?;
        let provider = EntryProvider {
            nominal: &self.nominal,
            entry: &entry,
            m: self.config.m,
            level: self.config.level,
        };
        let ci = ExprEvaluator::new(&provider, self.clip_horizon()).eval_ci(&a.expr, tau)?;
        self.atom_intervals.lock().unwrap().insert(key, ci.clone());
        Ok(ci)
    }

    /// Boolean satisfaction of `phi` at `tau`.
    pub fn eval_bool(&self, tau: usize, phi: &Formula) -> Result<bool, CheckError> {
        self.check_budget(tau, phi)?;
        eval_formula_bool(self, self.clip_horizon(), tau, phi)
    }

    /// Three-valued verdict of `phi` at `tau`.
    pub fn omega(&self, tau: usize, phi: &Formula) -> Result<ThreeValued, CheckError> {
        self.check_budget(tau, phi)?;
        eval_formula_three(self, self.clip_horizon(), tau, phi)
    }
}

impl FormulaAtoms for CheckSession {
    fn atomic_bool(&self, a: &Atomic, tau: usize) -> Result<bool, CheckError> {
        let v = self.atom_value(a, tau)?;
        Ok(a.rel.holds(v, a.eta))
    }

    fn atomic_three(&self, a: &Atomic, tau: usize) -> Result<ThreeValued, CheckError> {
        let ci = self.atom_interval(a, tau)?;
        if ci.strictly_contains(a.eta) {
            Ok(ThreeValued::Unknown)
        } else {
            let v = self.atom_value(a, tau)?;
            Ok(ThreeValued::from_bool(a.rel.holds(v, a.eta)))
        }
    }
}

/// Check `phi` from the initial state: simulate to the formula's horizon
/// (clipped at the config cap) and evaluate at time 0.
pub fn sat(
    kernel: &Arc<KernelSpec>,
    d_s: &DataState,
    phi: &Formula,
    config: &CheckConfig,
) -> Result<bool, CheckError> {
    let session = session_for(kernel, d_s, phi, config)?;
    session.eval_bool(0, phi)
}

/// Three-valued variant of [`sat`].
pub fn sat_three(
    kernel: &Arc<KernelSpec>,
    d_s: &DataState,
    phi: &Formula,
    config: &CheckConfig,
) -> Result<ThreeValued, CheckError> {
    let session = session_for(kernel, d_s, phi, config)?;
    session.omega(0, phi)
}

/// Simulate the nominal sequence a formula needs and wrap it in a session.
pub fn session_for(
    kernel: &Arc<KernelSpec>,
    d_s: &DataState,
    phi: &Formula,
    config: &CheckConfig,
) -> Result<CheckSession, CheckError> {
    let mut k = phi.horizon();
    if let Some(cap) = config.horizon_cap {
        k = k.min(cap);
    }
    let nominal = Arc::new(simulate(kernel, d_s, config.n, k, config.seed)?);
    Ok(CheckSession::new(nominal, config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::AExpr;
    use crate::model::VarId;
    use rand_core::RngCore;
    use ThreeValued::*;

    #[test]
    fn kleene_tables_are_standard() {
        assert_eq!(Unknown & Bottom, Bottom);
        assert_eq!(Unknown & Top, Unknown);
        assert_eq!(Unknown | Top, Top);
        assert_eq!(Unknown | Bottom, Unknown);
        assert_eq!(!Unknown, Unknown);
        assert_eq!(!Top, Bottom);
        assert_eq!(!Bottom, Top);
        assert_eq!(Top.encode(), 1);
        assert_eq!(Unknown.encode(), 0);
        assert_eq!(Bottom.encode(), -1);
    }

    fn atom(eta: f64) -> Formula {
        let rho = Arc::new(PenaltyFunction::new("r", AExpr::Var(VarId(0))));
        Formula::atomic(
            Arc::new(DistanceExpr::AtomSx(rho)),
            Arc::new(Perturbation::Nil),
            Rel::Le,
            eta,
        )
    }

    #[test]
    fn horizon_recursion_matches_examples() {
        assert_eq!(Formula::True.horizon(), 0);
        let rho = Arc::new(PenaltyFunction::new("r", AExpr::Var(VarId(0))));
        let g = DistanceExpr::Always(
            TimeInterval::new(100, 210),
            Box::new(DistanceExpr::AtomSx(rho)),
        );
        let inner = Formula::atomic(Arc::new(g), Arc::new(Perturbation::Nil), Rel::Le, 0.1);
        assert_eq!(inner.horizon(), 210);
        let outer = Formula::eventually(TimeInterval::new(0, 50), inner);
        assert_eq!(outer.horizon(), 260);
    }

    /// Atom table driving the evaluators directly.
    struct Table {
        verdicts: HashMap<(u64, usize), ThreeValued>,
    }

    impl FormulaAtoms for Table {
        fn atomic_bool(&self, a: &Atomic, tau: usize) -> Result<bool, CheckError> {
            Ok(self.verdicts[&(a.eta.to_bits(), tau)] == Top)
        }
        fn atomic_three(&self, a: &Atomic, tau: usize) -> Result<ThreeValued, CheckError> {
            Ok(self.verdicts[&(a.eta.to_bits(), tau)])
        }
    }

    fn table_of(entries: &[(f64, usize, ThreeValued)]) -> Table {
        Table {
            verdicts: entries.iter().map(|&(eta, t, v)| ((eta.to_bits(), t), v)).collect(),
        }
    }

    #[test]
    fn until_needs_left_to_hold_before_right() {
        // phi1 U[0,2] phi2 with phi2 true only at 2, phi1 failing at 1.
        let phi = Formula::until(atom(0.1), TimeInterval::new(0, 2), atom(0.2));
        let t = table_of(&[
            (0.1, 0, Top),
            (0.1, 1, Bottom),
            (0.1, 2, Top),
            (0.2, 0, Bottom),
            (0.2, 1, Bottom),
            (0.2, 2, Top),
        ]);
        assert!(!eval_formula_bool(&t, 10, 0, &phi).unwrap());
        // Same but phi1 holds at 1: satisfied at tau'=2.
        let t = table_of(&[
            (0.1, 0, Top),
            (0.1, 1, Top),
            (0.1, 2, Top),
            (0.2, 0, Bottom),
            (0.2, 1, Bottom),
            (0.2, 2, Top),
        ]);
        assert!(eval_formula_bool(&t, 10, 0, &phi).unwrap());
    }

    #[test]
    fn negation_duality_on_tables() {
        let phi = Formula::until(atom(0.1), TimeInterval::new(0, 1), atom(0.2));
        let t = table_of(&[
            (0.1, 0, Top),
            (0.1, 1, Bottom),
            (0.2, 0, Bottom),
            (0.2, 1, Top),
        ]);
        let direct = eval_formula_bool(&t, 10, 0, &phi).unwrap();
        let negated = eval_formula_bool(&t, 10, 0, &Formula::not(phi)).unwrap();
        assert_eq!(direct, !negated);
    }

    #[test]
    fn three_valued_until_propagates_unknown() {
        let phi = Formula::until(atom(0.1), TimeInterval::new(0, 2), atom(0.2));
        // phi2 unknown at 1, everything else keeps the disjunction open.
        let t = table_of(&[
            (0.1, 0, Top),
            (0.1, 1, Top),
            (0.1, 2, Top),
            (0.2, 0, Bottom),
            (0.2, 1, Unknown),
            (0.2, 2, Bottom),
        ]);
        assert_eq!(eval_formula_three(&t, 10, 0, &phi).unwrap(), Unknown);
        // A definite hit at 0 dominates: true regardless of later unknowns.
        let t = table_of(&[
            (0.1, 0, Top),
            (0.1, 1, Top),
            (0.1, 2, Top),
            (0.2, 0, Top),
            (0.2, 1, Unknown),
            (0.2, 2, Bottom),
        ]);
        assert_eq!(eval_formula_three(&t, 10, 0, &phi).unwrap(), Top);
    }

    #[test]
    fn three_valued_conservativeness_on_random_tables() {
        // If omega is definite, every refinement of the unknown atoms to
        // booleans must agree with it.
        let mut rng = rng::stream(5, &[1]);
        let phi = Formula::until(
            Formula::and(atom(0.1), atom(0.2)),
            TimeInterval::new(0, 3),
            Formula::not(atom(0.2)),
        );
        for case in 0..200 {
            let mut entries = Vec::new();
            for t in 0..4usize {
                for &eta in &[0.1, 0.2] {
                    let v = match rng.next_u64() % 3 {
                        0 => Bottom,
                        1 => Unknown,
                        _ => Top,
                    };
                    entries.push((eta, t, v));
                }
            }
            let three = table_of(&entries);
            let omega = eval_formula_three(&three, 10, 0, &phi).unwrap();
            for refinement in [Bottom, Top] {
                let refined: Vec<(f64, usize, ThreeValued)> = entries
                    .iter()
                    .map(|&(eta, t, v)| (eta, t, if v == Unknown { refinement } else { v }))
                    .collect();
                let b = eval_formula_bool(&table_of(&refined), 10, 0, &phi).unwrap();
                match omega {
                    Top => assert!(b, "case {case}: omega top but a refinement is false"),
                    Bottom => assert!(!b, "case {case}: omega bottom but a refinement is true"),
                    Unknown => {}
                }
            }
        }
    }
}
