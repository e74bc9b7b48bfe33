//! The perturbation language: delayed atomic effects composed by sequencing
//! and iteration, their small-step effect/next semantics, and the perturbed
//! re-simulation of an evolution sequence.
//!
//! Iteration is normalized away before the step semantics runs: `p^n` is the
//! n-fold sequence `p;...;p` and `p^0` is `nil`. The literal recursive
//! clauses for iteration over-apply by one and insert identity stutters
//! between rounds, which contradicts an n-step attack window starting at its
//! declared offset; normalization restores the documented behaviour.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::arith::{RuleError, RuleSet};
use crate::model::{validate_state, DataState, ModelError};
use crate::rng::{self, purpose};
use crate::sim::{EmpiricalEvolutionSequence, SampleSet, SimError};

/// A named instantaneous overlay on data states: guarded updates applied to
/// the current state, unmentioned variables untouched. The empty rule set is
/// the identity effect.
#[derive(Debug, Clone)]
pub struct AtomicEffect {
    pub name: String,
    rules: Arc<RuleSet>,
}

impl AtomicEffect {
    pub fn new(name: impl Into<String>, rules: RuleSet) -> Self {
        AtomicEffect { name: name.into(), rules: Arc::new(rules) }
    }

    /// The identity effect: point mass at the input state.
    pub fn identity() -> Self {
        AtomicEffect { name: "id".into(), rules: Arc::new(RuleSet::default()) }
    }

    pub fn is_identity(&self) -> bool {
        self.rules.is_identity()
    }

    /// Sample the effect on `d` at absolute time `time`.
    pub fn apply(
        &self,
        d: &DataState,
        time: usize,
        rng: &mut impl rand_core::RngCore,
    ) -> Result<DataState, EffectError> {
        if self.rules.is_identity() {
            return Ok(d.clone());
        }
        let mut out = vec![0.0; d.len()];
        let mut lets = Vec::new();
        self.rules
            .apply_into(d.values(), time, rng, &mut lets, &mut out)
            .map_err(|source| EffectError::Eval { effect: self.name.clone(), source })?;
        Ok(DataState::new(out))
    }
}

#[derive(Debug, Error)]
pub enum EffectError {
    #[error("effect `{effect}`: {source}")]
    Eval { effect: String, source: RuleError },
    #[error("effect `{effect}` produced an invalid state: {source}")]
    InvalidState { effect: String, source: ModelError },
}

/// Surface syntax of perturbations.
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// No effects, ever.
    Nil,
    /// Apply `effect` exactly `delay` steps from now.
    At(AtomicEffect, usize),
    /// `p2` starts the step after `p1`'s final application.
    Seq(Box<Perturbation>, Box<Perturbation>),
    /// `p` applied for a total of `n` times.
    Iter(Box<Perturbation>, usize),
}

impl Perturbation {
    pub fn at(effect: AtomicEffect, delay: usize) -> Self {
        Perturbation::At(effect, delay)
    }

    pub fn seq(p1: Perturbation, p2: Perturbation) -> Self {
        Perturbation::Seq(Box::new(p1), Box::new(p2))
    }

    pub fn iter(p: Perturbation, n: usize) -> Self {
        Perturbation::Iter(Box::new(p), n)
    }

    /// A stable identity for seed derivation and suffix memoization: equal
    /// trees (same shape, delays, counts, and effect names) hash equal.
    pub fn fingerprint(&self) -> u64 {
        fn walk(p: &Perturbation, h: u64) -> u64 {
            match p {
                Perturbation::Nil => rng::derive_seed(h, &[1]),
                Perturbation::At(f, d) => {
                    let mut acc = rng::derive_seed(h, &[2, *d as u64]);
                    for b in f.name.as_bytes() {
                        acc = rng::derive_seed(acc, &[*b as u64]);
                    }
                    acc
                }
                Perturbation::Seq(a, b) => walk(b, walk(a, rng::derive_seed(h, &[3]))),
                Perturbation::Iter(inner, n) => {
                    walk(inner, rng::derive_seed(h, &[4, *n as u64]))
                }
            }
        }
        walk(self, 0x726f6274)
    }

    /// Rewrite iteration into explicit sequencing: `Iter(p, n)` becomes the
    /// n-fold `Seq` and `Iter(p, 0)` becomes `Nil`.
    pub fn normalize(&self) -> PTerm {
        match self {
            Perturbation::Nil => PTerm::Nil,
            Perturbation::At(f, d) => PTerm::At(f.clone(), *d),
            Perturbation::Seq(a, b) => PTerm::seq(a.normalize(), b.normalize()),
            Perturbation::Iter(p, n) => {
                if *n == 0 {
                    return PTerm::Nil;
                }
                let unit = p.normalize();
                let mut term = unit.clone();
                for _ in 1..*n {
                    term = PTerm::seq(unit.clone(), term);
                }
                term
            }
        }
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // `^` binds tighter than `;`; `;` is right-associative.
        fn atom(p: &Perturbation, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            match p {
                Perturbation::Nil => std::fmt::Display::fmt(p, f),
                _ => {
                    write!(f, "(")?;
                    std::fmt::Display::fmt(p, f)?;
                    write!(f, ")")
                }
            }
        }
        match self {
            Perturbation::Nil => write!(f, "nil"),
            Perturbation::At(eff, delay) => write!(f, "{} @ {}", eff.name, delay),
            Perturbation::Seq(a, b) => {
                if matches!(**a, Perturbation::Seq(..)) {
                    write!(f, "(")?;
                    std::fmt::Display::fmt(a, f)?;
                    write!(f, ") ; ")?;
                } else {
                    std::fmt::Display::fmt(a, f)?;
                    write!(f, " ; ")?;
                }
                std::fmt::Display::fmt(b, f)
            }
            Perturbation::Iter(p, n) => {
                atom(p, f)?;
                write!(f, "^{n}")
            }
        }
    }
}

/// Normalized run-time perturbation term (no iteration).
#[derive(Debug, Clone)]
pub enum PTerm {
    Nil,
    At(AtomicEffect, usize),
    Seq(Box<PTerm>, Box<PTerm>),
}

impl PTerm {
    pub fn seq(a: PTerm, b: PTerm) -> PTerm {
        PTerm::Seq(Box::new(a), Box::new(b))
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, PTerm::Nil)
    }

    /// Structural equality up to effect names.
    pub fn same_shape(&self, other: &PTerm) -> bool {
        match (self, other) {
            (PTerm::Nil, PTerm::Nil) => true,
            (PTerm::At(f, d), PTerm::At(g, e)) => f.name == g.name && d == e,
            (PTerm::Seq(a1, b1), PTerm::Seq(a2, b2)) => a1.same_shape(a2) && b1.same_shape(b2),
            _ => false,
        }
    }
}

/// The effect of the term at the current step.
pub fn effect(p: &PTerm) -> AtomicEffect {
    match p {
        PTerm::Nil => AtomicEffect::identity(),
        PTerm::At(f, delay) => {
            if *delay > 0 {
                AtomicEffect::identity()
            } else {
                f.clone()
            }
        }
        PTerm::Seq(p1, _) => effect(p1),
    }
}

/// The perturbation applied at the next step.
pub fn next(p: &PTerm) -> PTerm {
    match p {
        PTerm::Nil => PTerm::Nil,
        PTerm::At(f, delay) => {
            if *delay > 0 {
                PTerm::At(f.clone(), delay - 1)
            } else {
                PTerm::Nil
            }
        }
        PTerm::Seq(p1, p2) => {
            let n1 = next(p1);
            if n1.is_nil() {
                (**p2).clone()
            } else {
                PTerm::seq(n1, (**p2).clone())
            }
        }
    }
}

/// Sample the denotation of `p` at relative step `i` on state `d`:
/// the effect of `next^i(p)` applied to `d`.
pub fn psem_at(
    p: &Perturbation,
    d: &DataState,
    i: usize,
    rng: &mut impl rand_core::RngCore,
) -> Result<DataState, EffectError> {
    let mut term = p.normalize();
    for _ in 0..i {
        term = next(&term);
    }
    effect(&term).apply(d, i, rng)
}

/// Controls which master seed the suffix's kernel draws use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuffixSeedMode {
    /// Kernel draws reuse the nominal sequence's seed (common random
    /// numbers). With `nil` and amplification 1 the suffix reproduces the
    /// nominal run bitwise.
    Shared,
    /// Kernel draws use the given seed as an independent master.
    Independent,
}

/// An evolution sequence that equals its base before `tau` and a perturbed
/// re-simulation (amplified by `ell`) afterwards.
#[derive(Debug, Clone)]
pub struct PerturbedSequence {
    base: Arc<EmpiricalEvolutionSequence>,
    tau: usize,
    suffix: Vec<SampleSet>,
    ell: usize,
}

impl PerturbedSequence {
    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn horizon(&self) -> usize {
        self.base.horizon()
    }

    pub fn amplification(&self) -> usize {
        self.ell
    }

    pub fn base(&self) -> &Arc<EmpiricalEvolutionSequence> {
        &self.base
    }

    /// Sample set at `time`: the nominal set before `tau`, the perturbed one
    /// from `tau` on.
    pub fn sample_set(&self, time: usize) -> &SampleSet {
        if time < self.tau {
            self.base.sample_set(time)
        } else {
            &self.suffix[time - self.tau]
        }
    }
}

#[derive(Debug, Error)]
pub enum SimPerError {
    #[error("perturbation application time {tau} is beyond the sequence horizon {horizon}")]
    TauBeyondHorizon { tau: usize, horizon: usize },
    #[error("amplification factor must be at least 1")]
    ZeroAmplification,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Replicate each element `ell` times, preserving order: element j occupies
/// slots j*ell .. j*ell+ell-1.
fn replicate(states: &[DataState], ell: usize) -> Vec<DataState> {
    let mut out = Vec::with_capacity(states.len() * ell);
    for d in states {
        for _ in 0..ell {
            out.push(d.clone());
        }
    }
    out
}

/// Re-simulate `base` under perturbation `p` applied at time `tau` with
/// amplification `ell`, drawing kernel randomness from `seed`.
pub fn sim_per(
    base: &Arc<EmpiricalEvolutionSequence>,
    p: &Perturbation,
    tau: usize,
    ell: usize,
    seed: u64,
) -> Result<PerturbedSequence, SimPerError> {
    sim_per_with(base, p, tau, ell, seed, SuffixSeedMode::Independent)
}

/// [`sim_per`] with an explicit choice of kernel-stream master seed.
///
/// The stored set at time `tau + j` carries the effect of `next^j(p)`: the
/// perturbed distribution at a step includes that step's own overlay, and
/// the kernel then advances the overlaid states. Kernel draws for slot `s`
/// at time `i` come from stream (kernel seed, KERNEL, s, i) — the same
/// addressing as `simulate` — and effect draws from (seed, EFFECT, s, i).
pub fn sim_per_with(
    base: &Arc<EmpiricalEvolutionSequence>,
    p: &Perturbation,
    tau: usize,
    ell: usize,
    seed: u64,
    mode: SuffixSeedMode,
) -> Result<PerturbedSequence, SimPerError> {
    if tau > base.horizon() {
        return Err(SimPerError::TauBeyondHorizon { tau, horizon: base.horizon() });
    }
    if ell < 1 {
        return Err(SimPerError::ZeroAmplification);
    }
    let kernel_seed = match mode {
        SuffixSeedMode::Shared => base.seed(),
        SuffixSeedMode::Independent => seed,
    };
    let kernel = base.kernel();
    let k = base.horizon();

    let mut term = p.normalize();
    let mut front = replicate(&base.sample_set(tau).states, ell);
    let mut suffix = Vec::with_capacity(k - tau + 1);
    for time in tau..=k {
        let eff = effect(&term);
        let overlaid = apply_effect_set(base, &eff, &front, time, seed)?;
        if time < k {
            front = step_front(base, &overlaid, time, kernel_seed, kernel)?;
        }
        suffix.push(SampleSet { time, states: overlaid });
        term = next(&term);
    }

    Ok(PerturbedSequence { base: base.clone(), tau, suffix, ell })
}

fn apply_effect_set(
    base: &EmpiricalEvolutionSequence,
    eff: &AtomicEffect,
    states: &[DataState],
    time: usize,
    seed: u64,
) -> Result<Vec<DataState>, SimPerError> {
    if eff.is_identity() {
        return Ok(states.to_vec());
    }
    let out: Result<Vec<DataState>, SimError> = states
        .par_iter()
        .enumerate()
        .map(|(slot, d)| {
            let mut stream = rng::stream(seed, &[purpose::EFFECT, slot as u64, time as u64]);
            let d2 = match eff.apply(d, time, &mut stream) {
                Ok(d2) => d2,
                Err(EffectError::Eval { source, .. }) => {
                    return Err(SimError::Step { trajectory: slot, time, source })
                }
                Err(EffectError::InvalidState { source, .. }) => {
                    return Err(SimError::InvalidState { trajectory: slot, time, source })
                }
            };
            validate_state(base.space(), &d2).map_err(|source| SimError::InvalidState {
                trajectory: slot,
                time,
                source,
            })?;
            Ok(d2)
        })
        .collect();
    Ok(out?)
}

fn step_front(
    base: &EmpiricalEvolutionSequence,
    states: &[DataState],
    time: usize,
    kernel_seed: u64,
    kernel: &crate::sim::KernelSpec,
) -> Result<Vec<DataState>, SimPerError> {
    let out: Result<Vec<DataState>, SimError> = states
        .par_iter()
        .enumerate()
        .map(|(slot, d)| {
            let mut stream =
                rng::stream(kernel_seed, &[purpose::KERNEL, slot as u64, time as u64]);
            let mut out = vec![0.0; d.len()];
            let mut lets = Vec::new();
            kernel
                .rules()
                .apply_into(d.values(), time, &mut stream, &mut lets, &mut out)
                .map_err(|source| SimError::Step { trajectory: slot, time, source })?;
            let next = DataState::new(out);
            validate_state(base.space(), &next).map_err(|source| SimError::InvalidState {
                trajectory: slot,
                time,
                source,
            })?;
            Ok(next)
        })
        .collect();
    Ok(out?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{AExpr, RuleLocation, UpdateRule};
    use crate::model::{DataSpace, Domain, VarId, VariableSpec};
    use crate::sim::{simulate, KernelSpec};

    fn loc(owner: &str, rule: &str) -> RuleLocation {
        RuleLocation { owner: owner.into(), rule: rule.into(), line: None }
    }

    fn space_1d() -> Arc<DataSpace> {
        Arc::new(
            DataSpace::new(vec![VariableSpec {
                name: "x".into(),
                domain: Domain::Interval { lo: -1_000.0, hi: 1_000.0 },
            }])
            .unwrap(),
        )
    }

    /// Effect x' = x + 100 (deterministic, easy to spot in traces).
    fn bump_effect() -> AtomicEffect {
        AtomicEffect::new(
            "bump",
            RuleSet {
                lets: vec![],
                updates: vec![UpdateRule {
                    target: VarId(0),
                    guard: None,
                    value: AExpr::Add(Box::new(AExpr::Var(VarId(0))), Box::new(AExpr::Const(100.0))),
                    location: loc("bump", "x' = x + 100"),
                }],
            },
        )
    }

    fn fires_at(p: &Perturbation, steps: usize) -> Vec<bool> {
        let mut term = p.normalize();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            out.push(!effect(&term).is_identity());
            term = next(&term);
        }
        out
    }

    #[test]
    fn effect_of_nil_is_identity() {
        assert!(effect(&Perturbation::Nil.normalize()).is_identity());
    }

    #[test]
    fn delayed_atom_is_identity_until_due() {
        let p = Perturbation::at(bump_effect(), 2).normalize();
        assert!(effect(&p).is_identity());
        let p1 = next(&p);
        assert!(matches!(&p1, PTerm::At(_, 1)));
        assert!(effect(&p1).is_identity());
        let p2 = next(&p1);
        assert!(!effect(&p2).is_identity());
        assert!(next(&p2).is_nil());
    }

    #[test]
    fn sequence_head_supplies_the_effect() {
        let p = Perturbation::seq(
            Perturbation::at(bump_effect(), 0),
            Perturbation::at(AtomicEffect::identity(), 0),
        );
        assert_eq!(effect(&p.normalize()).name, "bump");
    }

    #[test]
    fn iteration_unfolds_to_remaining_applications() {
        // next(Iter(f@0, 3)) leaves two consecutive applications.
        let p = Perturbation::iter(Perturbation::at(bump_effect(), 0), 3);
        let stepped = next(&p.normalize());
        let expected = Perturbation::seq(
            Perturbation::at(bump_effect(), 0),
            Perturbation::at(bump_effect(), 0),
        )
        .normalize();
        assert!(stepped.same_shape(&expected));
    }

    #[test]
    fn iter_zero_is_nil() {
        let p = Perturbation::iter(Perturbation::at(bump_effect(), 0), 0);
        assert!(p.normalize().is_nil());
    }

    #[test]
    fn attack_window_fires_exactly_n_times_from_tau() {
        // (id@0)^tau0 ; (f@0)^n fires f at steps tau0 .. tau0+n-1.
        for tau0 in 0..=5usize {
            for n in 1..=5usize {
                let p = Perturbation::seq(
                    Perturbation::iter(Perturbation::at(AtomicEffect::identity(), 0), tau0),
                    Perturbation::iter(Perturbation::at(bump_effect(), 0), n),
                );
                let fired = fires_at(&p, 20);
                for (i, f) in fired.iter().enumerate() {
                    let expect = i >= tau0 && i < tau0 + n;
                    assert_eq!(*f, expect, "tau0={tau0} n={n} step={i}");
                }
            }
        }
    }

    #[test]
    fn next_reaches_quiescence() {
        let p = Perturbation::seq(
            Perturbation::iter(Perturbation::at(bump_effect(), 2), 3),
            Perturbation::at(bump_effect(), 1),
        );
        let mut term = p.normalize();
        // Total delay + unfolded length bounds the productive prefix.
        for _ in 0..32 {
            term = next(&term);
        }
        assert!(term.is_nil());
    }

    #[test]
    fn psem_of_nil_is_the_identity() {
        let d = DataState::new(vec![4.0]);
        let mut rng = rng::stream(1, &[2]);
        for i in 0..6 {
            assert_eq!(psem_at(&Perturbation::Nil, &d, i, &mut rng).unwrap(), d);
        }
    }

    #[test]
    fn psem_applies_delayed_effect_at_its_step() {
        let p = Perturbation::at(bump_effect(), 3);
        let d = DataState::new(vec![1.0]);
        let mut rng = rng::stream(1, &[2]);
        assert_eq!(psem_at(&p, &d, 2, &mut rng).unwrap(), d);
        assert_eq!(psem_at(&p, &d, 3, &mut rng).unwrap().get(VarId(0)), 101.0);
        assert_eq!(psem_at(&p, &d, 4, &mut rng).unwrap(), d);
    }

    fn drift_kernel(space: Arc<DataSpace>) -> Arc<KernelSpec> {
        Arc::new(KernelSpec::new(
            space,
            RuleSet {
                lets: vec![],
                updates: vec![UpdateRule {
                    target: VarId(0),
                    guard: None,
                    value: AExpr::Add(
                        Box::new(AExpr::Var(VarId(0))),
                        Box::new(AExpr::Uniform(
                            Box::new(AExpr::Const(0.0)),
                            Box::new(AExpr::Const(1.0)),
                        )),
                    ),
                    location: loc("kernel", "x' = x + U[0,1]"),
                }],
            },
        ))
    }

    #[test]
    fn nil_with_shared_streams_reproduces_the_suffix_bitwise() {
        let kernel = drift_kernel(space_1d());
        let d = DataState::new(vec![0.0]);
        let base = Arc::new(simulate(&kernel, &d, 10, 20, 99).unwrap());
        let per = sim_per_with(&base, &Perturbation::Nil, 7, 1, base.seed(), SuffixSeedMode::Shared)
            .unwrap();
        for t in 0..=20 {
            assert_eq!(per.sample_set(t).states, base.sample_set(t).states, "time {t}");
        }
    }

    #[test]
    fn prefix_is_shared_samplewise() {
        let kernel = drift_kernel(space_1d());
        let d = DataState::new(vec![0.0]);
        let base = Arc::new(simulate(&kernel, &d, 5, 12, 3).unwrap());
        let p = Perturbation::at(bump_effect(), 0);
        let per = sim_per(&base, &p, 6, 2, 1234).unwrap();
        for t in 0..6 {
            assert_eq!(per.sample_set(t).states, base.sample_set(t).states);
        }
    }

    #[test]
    fn amplification_sets_suffix_sizes() {
        let kernel = drift_kernel(space_1d());
        let d = DataState::new(vec![0.0]);
        let base = Arc::new(simulate(&kernel, &d, 5, 12, 3).unwrap());
        let per = sim_per(&base, &Perturbation::Nil, 4, 3, 77).unwrap();
        for t in 0..4 {
            assert_eq!(per.sample_set(t).len(), 5);
        }
        for t in 4..=12 {
            assert_eq!(per.sample_set(t).len(), 15);
        }
    }

    #[test]
    fn replication_preserves_element_order() {
        let a = DataState::new(vec![1.0]);
        let b = DataState::new(vec![2.0]);
        let out = replicate(&[a.clone(), b.clone()], 2);
        assert_eq!(out, vec![a.clone(), a, b.clone(), b]);
    }

    #[test]
    fn stored_states_carry_the_current_overlay() {
        // The overlay at relative step j must be visible in the stored set
        // at time tau + j even when the kernel would overwrite it later.
        let kernel = drift_kernel(space_1d());
        let d = DataState::new(vec![0.0]);
        let base = Arc::new(simulate(&kernel, &d, 4, 10, 5).unwrap());
        let p = Perturbation::at(bump_effect(), 2);
        let per = sim_per(&base, &p, 3, 1, 42).unwrap();
        // Effect is due at relative step 2, i.e. absolute time 5.
        for t in 3..=10 {
            let mean: f64 = per.sample_set(t).states.iter().map(|s| s.get(VarId(0))).sum::<f64>()
                / per.sample_set(t).len() as f64;
            if t == 5 {
                assert!(mean > 90.0, "overlay missing at its own step (mean {mean})");
            } else if t < 5 {
                assert!(mean < 20.0);
            }
        }
    }

    #[test]
    fn tau_beyond_horizon_is_rejected() {
        let kernel = drift_kernel(space_1d());
        let d = DataState::new(vec![0.0]);
        let base = Arc::new(simulate(&kernel, &d, 2, 4, 5).unwrap());
        assert!(matches!(
            sim_per(&base, &Perturbation::Nil, 5, 1, 0),
            Err(SimPerError::TauBeyondHorizon { tau: 5, horizon: 4 })
        ));
    }

    #[test]
    fn fingerprints_separate_distinct_trees() {
        let p1 = Perturbation::iter(Perturbation::at(bump_effect(), 0), 3);
        let p2 = Perturbation::iter(Perturbation::at(bump_effect(), 0), 4);
        let p3 = Perturbation::iter(Perturbation::at(bump_effect(), 1), 3);
        assert_ne!(p1.fingerprint(), p2.fingerprint());
        assert_ne!(p1.fingerprint(), p3.fingerprint());
        assert_eq!(
            p1.fingerprint(),
            Perturbation::iter(Perturbation::at(bump_effect(), 0), 3).fingerprint()
        );
    }
}
