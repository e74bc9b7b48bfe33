//! Sampling-based realization of evolution sequences.
//!
//! A kernel is a set of guarded updates over the data space; one step maps a
//! data state to a sampled successor. `simulate` unrolls N trajectories for
//! k steps into per-time sample sets, the empirical stand-in for the true
//! distribution sequence. Every draw comes from a stream addressed by
//! (seed, trajectory, time), so results are bitwise independent of worker
//! count and any suffix can be replayed without its prefix.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::arith::{RuleError, RuleSet};
use crate::model::{validate_state, DataSpace, DataState, ModelError};
use crate::rng::{self, purpose};

/// The one-step transition kernel of a model.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    space: Arc<DataSpace>,
    rules: RuleSet,
}

impl KernelSpec {
    pub fn new(space: Arc<DataSpace>, rules: RuleSet) -> Self {
        KernelSpec { space, rules }
    }

    pub fn space(&self) -> &Arc<DataSpace> {
        &self.space
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("kernel step failed at trajectory {trajectory}, time {time}: {source}")]
    Step {
        trajectory: usize,
        time: usize,
        source: RuleError,
    },
    #[error("kernel step produced an invalid state at trajectory {trajectory}, time {time}: {source}")]
    InvalidState {
        trajectory: usize,
        time: usize,
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error while writing trajectories: {0}")]
    Io(#[from] std::io::Error),
}

/// The sampled states at one time step.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub time: usize,
    pub states: Vec<DataState>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Per-time sample sets E_0..E_k plus everything needed to replay them:
/// the generating kernel, the master seed, and the sample count.
#[derive(Debug, Clone)]
pub struct EmpiricalEvolutionSequence {
    kernel: Arc<KernelSpec>,
    sets: Vec<SampleSet>,
    seed: u64,
    samples_per_step: usize,
}

impl EmpiricalEvolutionSequence {
    pub fn space(&self) -> &Arc<DataSpace> {
        self.kernel.space()
    }

    pub fn kernel(&self) -> &Arc<KernelSpec> {
        &self.kernel
    }

    /// Largest valid time index (k).
    pub fn horizon(&self) -> usize {
        self.sets.len() - 1
    }

    pub fn sample_set(&self, time: usize) -> &SampleSet {
        &self.sets[time]
    }

    pub fn sets(&self) -> &[SampleSet] {
        &self.sets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples_per_step(&self) -> usize {
        self.samples_per_step
    }

    pub(crate) fn from_parts(
        kernel: Arc<KernelSpec>,
        sets: Vec<SampleSet>,
        seed: u64,
        samples_per_step: usize,
    ) -> Self {
        EmpiricalEvolutionSequence { kernel, sets, seed, samples_per_step }
    }
}

/// Draw one successor of `d` at time `time`, using the given stream.
///
/// Deterministic given the stream position; the successor is validated
/// against the data space before it is returned.
pub fn sim_step(
    kernel: &KernelSpec,
    d: &DataState,
    time: usize,
    rng: &mut impl rand_core::RngCore,
) -> Result<DataState, SimError> {
    let mut out = vec![0.0; d.len()];
    let mut lets = Vec::new();
    kernel
        .rules
        .apply_into(d.values(), time, rng, &mut lets, &mut out)
        .map_err(|source| SimError::Step { trajectory: 0, time, source })?;
    let next = DataState::new(out);
    validate_state(&kernel.space, &next)
        .map_err(|source| SimError::InvalidState { trajectory: 0, time, source })?;
    Ok(next)
}

fn run_trajectory(
    kernel: &KernelSpec,
    d_start: &DataState,
    trajectory: usize,
    start_time: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<DataState>, SimError> {
    let mut path = Vec::with_capacity(steps);
    let mut current = d_start.clone();
    let mut lets = Vec::new();
    let mut out = vec![0.0; d_start.len()];
    for s in 0..steps {
        let time = start_time + s;
        let mut stream = rng::stream(seed, &[purpose::KERNEL, trajectory as u64, time as u64]);
        kernel
            .rules
            .apply_into(current.values(), time, &mut stream, &mut lets, &mut out)
            .map_err(|source| SimError::Step { trajectory, time, source })?;
        let next = DataState::new(out.clone());
        validate_state(&kernel.space, &next)
            .map_err(|source| SimError::InvalidState { trajectory, time, source })?;
        current.values_mut().copy_from_slice(&out);
        path.push(next);
    }
    Ok(path)
}

/// Sample an empirical evolution sequence of size `n` and length `k` from
/// the initial state `d_s` (a Dirac initial distribution).
///
/// E_0 is n copies of `d_s`; E_{i+1} applies one kernel step to each element
/// of E_i. Two calls with equal arguments produce bitwise-identical
/// sequences regardless of worker count.
pub fn simulate(
    kernel: &Arc<KernelSpec>,
    d_s: &DataState,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<EmpiricalEvolutionSequence, SimError> {
    assert!(n >= 1, "need at least one trajectory");
    validate_state(&kernel.space, d_s)?;

    let paths: Vec<Vec<DataState>> = (0..n)
        .into_par_iter()
        .map(|j| run_trajectory(kernel, d_s, j, 0, k, seed))
        .collect::<Result<_, _>>()?;

    let mut sets = Vec::with_capacity(k + 1);
    sets.push(SampleSet { time: 0, states: vec![d_s.clone(); n] });
    for i in 0..k {
        let states: Vec<DataState> = paths.iter().map(|p| p[i].clone()).collect();
        sets.push(SampleSet { time: i + 1, states });
    }
    Ok(EmpiricalEvolutionSequence::from_parts(kernel.clone(), sets, seed, n))
}

/// Dump a sequence as CSV: header `time,trajectory,<var1>,...,<varn>`, one
/// row per (time, trajectory), ordered by time then trajectory.
pub fn write_trajectories_csv<W: Write>(
    seq: &EmpiricalEvolutionSequence,
    mut w: W,
) -> std::io::Result<()> {
    let names: Vec<&str> = seq.space().variables().iter().map(|v| v.name.as_str()).collect();
    writeln!(w, "time,trajectory,{}", names.join(","))?;
    for set in &seq.sets {
        for (j, state) in set.states.iter().enumerate() {
            let vals: Vec<String> = state.values().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", set.time, j, vals.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{AExpr, LetId, RuleLocation, UpdateRule};
    use crate::model::{Domain, VariableSpec};

    fn space_1d(lo: f64, hi: f64) -> Arc<DataSpace> {
        Arc::new(
            DataSpace::new(vec![VariableSpec {
                name: "x".into(),
                domain: Domain::Interval { lo, hi },
            }])
            .unwrap(),
        )
    }

    fn loc(rule: &str) -> RuleLocation {
        RuleLocation { owner: "kernel".into(), rule: rule.into(), line: None }
    }

    fn increment_kernel(space: Arc<DataSpace>) -> Arc<KernelSpec> {
        let rules = RuleSet {
            lets: vec![],
            updates: vec![UpdateRule {
                target: crate::model::VarId(0),
                guard: None,
                value: AExpr::Add(
                    Box::new(AExpr::Var(crate::model::VarId(0))),
                    Box::new(AExpr::Const(1.0)),
                ),
                location: loc("x' = x + 1"),
            }],
        };
        Arc::new(KernelSpec::new(space, rules))
    }

    #[test]
    fn identity_kernel_carries_over() {
        let space = space_1d(0.0, 10.0);
        let kernel = KernelSpec::new(space, RuleSet::default());
        let d = DataState::new(vec![4.0]);
        let mut stream = rng::stream(1, &[0]);
        let next = sim_step(&kernel, &d, 0, &mut stream).unwrap();
        assert_eq!(next, d);
    }

    #[test]
    fn deterministic_kernel_composes() {
        let space = space_1d(0.0, 10.0);
        let kernel = increment_kernel(space);
        let d = DataState::new(vec![0.0]);
        let mut stream = rng::stream(1, &[0]);
        let d1 = sim_step(&kernel, &d, 0, &mut stream).unwrap();
        let d2 = sim_step(&kernel, &d1, 1, &mut stream).unwrap();
        assert_eq!(d2.get(crate::model::VarId(0)), 2.0);
    }

    #[test]
    fn zero_horizon_is_just_the_initial_copies() {
        let space = space_1d(0.0, 10.0);
        let kernel = increment_kernel(space);
        let d = DataState::new(vec![3.0]);
        let seq = simulate(&kernel, &d, 3, 0, 11).unwrap();
        assert_eq!(seq.horizon(), 0);
        assert_eq!(seq.sample_set(0).states, vec![d.clone(), d.clone(), d]);
    }

    #[test]
    fn deterministic_drift_hits_exact_means() {
        let space = space_1d(0.0, 100.0);
        let kernel = increment_kernel(space);
        let d = DataState::new(vec![0.0]);
        let seq = simulate(&kernel, &d, 2, 5, 11).unwrap();
        for i in 0..=5 {
            let set = seq.sample_set(i);
            assert_eq!(set.len(), 2);
            for s in &set.states {
                assert_eq!(s.get(crate::model::VarId(0)), i as f64);
            }
        }
    }

    #[test]
    fn equal_seeds_replay_bitwise() {
        let space = space_1d(-1000.0, 1000.0);
        let rules = RuleSet {
            lets: vec![],
            updates: vec![UpdateRule {
                target: crate::model::VarId(0),
                guard: None,
                value: AExpr::Add(
                    Box::new(AExpr::Var(crate::model::VarId(0))),
                    Box::new(AExpr::Uniform(
                        Box::new(AExpr::Const(-1.0)),
                        Box::new(AExpr::Const(1.0)),
                    )),
                ),
                location: loc("x' = x + U[-1,1]"),
            }],
        };
        let kernel = Arc::new(KernelSpec::new(space, rules));
        let d = DataState::new(vec![0.0]);
        let a = simulate(&kernel, &d, 20, 30, 42).unwrap();
        let b = simulate(&kernel, &d, 20, 30, 42).unwrap();
        for i in 0..=30 {
            assert_eq!(a.sample_set(i).states, b.sample_set(i).states);
        }
        let c = simulate(&kernel, &d, 20, 30, 43).unwrap();
        assert_ne!(a.sample_set(30).states, c.sample_set(30).states);
    }

    #[test]
    fn trajectories_depend_only_on_their_own_stream() {
        // Trajectory j's path must be the same whether or not others exist.
        let space = space_1d(-1000.0, 1000.0);
        let rules = RuleSet {
            lets: vec![],
            updates: vec![UpdateRule {
                target: crate::model::VarId(0),
                guard: None,
                value: AExpr::Uniform(Box::new(AExpr::Const(0.0)), Box::new(AExpr::Const(1.0))),
                location: loc("x' = U[0,1]"),
            }],
        };
        let kernel = Arc::new(KernelSpec::new(space, rules));
        let d = DataState::new(vec![0.0]);
        let small = simulate(&kernel, &d, 2, 10, 7).unwrap();
        let large = simulate(&kernel, &d, 5, 10, 7).unwrap();
        for i in 0..=10 {
            assert_eq!(small.sample_set(i).states[..2], large.sample_set(i).states[..2]);
        }
    }

    #[test]
    fn size_law_holds() {
        let space = space_1d(0.0, 100.0);
        let kernel = increment_kernel(space);
        let d = DataState::new(vec![0.0]);
        let seq = simulate(&kernel, &d, 7, 9, 1).unwrap();
        for i in 0..=9 {
            assert_eq!(seq.sample_set(i).len(), 7);
        }
    }

    #[test]
    fn domain_escape_is_reported_with_position() {
        let space = space_1d(0.0, 2.0);
        let kernel = increment_kernel(space);
        let d = DataState::new(vec![0.0]);
        let err = simulate(&kernel, &d, 1, 5, 1).unwrap_err();
        match err {
            SimError::InvalidState { trajectory: 0, time: 2, .. } => {}
            other => panic!("expected invalid state at time 2, got {other:?}"),
        }
    }

    #[test]
    fn csv_dump_has_the_contract_header() {
        let space = space_1d(0.0, 10.0);
        let kernel = increment_kernel(space);
        let d = DataState::new(vec![0.0]);
        let seq = simulate(&kernel, &d, 2, 1, 1).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&seq, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,trajectory,x"));
        assert_eq!(lines.next(), Some("0,0,0"));
        assert_eq!(lines.next(), Some("0,1,0"));
        assert_eq!(lines.next(), Some("1,0,1"));
        assert_eq!(lines.next(), Some("1,1,1"));
    }
}
