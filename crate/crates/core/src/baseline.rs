//! Closed-form reference protocols and piecewise-constant schedule simulation.
//!
//! Two exactly solvable comparators bound the solver from above:
//!
//! * stepwise switching: N-1 sequential two-site swaps, each a Rabi
//!   half-period pi/(2 J0), total time (N-1) pi / (2 J0);
//! * perfect transfer: the static profile J_m = gamma sqrt(m(N-m)) / 2
//!   with gamma = J0 sqrt(24 / (N(N^2-1))), reaching unit fidelity at
//!   tau_p = pi / gamma.
//!
//! Both saturate the coupling budget exactly and are propagated by the
//! matrix-exponential oracle, so they double as integrator tests.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::chain::{coupling_norm, ChainSpec, WaveState};
use crate::error::{Error, Result};
use crate::oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleLabel {
    Stepwise,
    Perfect,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub couplings: Vec<f64>,
}

/// Piecewise-constant coupling protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub spec: ChainSpec,
    pub label: ScheduleLabel,
    segments: Vec<Segment>,
}

impl Schedule {
    /// Budget slack allowed at validation; protocols constructed here
    /// saturate the budget to machine precision.
    const BUDGET_SLACK: f64 = 1e-12;

    pub fn new(spec: ChainSpec, label: ScheduleLabel, segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Precondition("schedule has no segments".into()));
        }
        let budget = spec.j0() * spec.j0();
        for (idx, seg) in segments.iter().enumerate() {
            if !(seg.duration > 0.0) {
                return Err(Error::Precondition(format!(
                    "segment {idx} has nonpositive duration {}",
                    seg.duration
                )));
            }
            if seg.couplings.len() != spec.n_couplings() {
                return Err(Error::Shape {
                    what: "segment couplings",
                    expected: spec.n_couplings(),
                    got: seg.couplings.len(),
                });
            }
            let norm = coupling_norm(&seg.couplings);
            if norm > budget + Self::BUDGET_SLACK {
                return Err(Error::Precondition(format!(
                    "segment {idx} exceeds the coupling budget: {norm} > {budget}"
                )));
            }
        }
        Ok(Self {
            spec,
            label,
            segments,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Couplings active at time t (clamped to the schedule extent).
    pub fn couplings_at(&self, t: f64) -> &[f64] {
        let mut acc = 0.0;
        for seg in &self.segments {
            acc += seg.duration;
            if t < acc {
                return &seg.couplings;
            }
        }
        &self.segments.last().unwrap().couplings
    }
}

/// Sequential pairwise swaps: segment m couples only sites (m, m+1) at
/// full budget for a Rabi half-period.
pub fn stepwise_schedule(spec: &ChainSpec) -> Schedule {
    let half_period = PI / (2.0 * spec.j0());
    let segments = (0..spec.n_couplings())
        .map(|m| {
            let mut couplings = vec![0.0; spec.n_couplings()];
            couplings[m] = spec.j0();
            Segment {
                duration: half_period,
                couplings,
            }
        })
        .collect();
    Schedule::new(*spec, ScheduleLabel::Stepwise, segments).expect("stepwise respects the budget")
}

/// Static profile J_m = gamma sqrt(m(N-m)) / 2 held for tau_p = pi / gamma,
/// with gamma chosen so the profile saturates the budget exactly.
pub fn perfect_transfer_schedule(spec: &ChainSpec) -> Schedule {
    let n = spec.n_sites() as f64;
    let gamma = spec.j0() * (24.0 / (n * (n * n - 1.0))).sqrt();
    let couplings: Vec<f64> = (1..spec.n_sites())
        .map(|m| {
            let m = m as f64;
            gamma * (m * (n - m)).sqrt() / 2.0
        })
        .collect();
    let segments = vec![Segment {
        duration: PI / gamma,
        couplings,
    }];
    Schedule::new(*spec, ScheduleLabel::Perfect, segments).expect("profile saturates the budget")
}

pub fn stepwise_time(spec: &ChainSpec) -> f64 {
    (spec.n_sites() as f64 - 1.0) * PI / (2.0 * spec.j0())
}

pub fn perfect_transfer_time(spec: &ChainSpec) -> f64 {
    let n = spec.n_sites() as f64;
    (PI / spec.j0()) * (n * (n * n - 1.0) / 24.0).sqrt()
}

/// Exactly propagated schedule observables.
#[derive(Debug, Clone)]
pub struct ScheduleTrace {
    pub times: Vec<f64>,
    /// |psi_N(t)|^2 at each sample.
    pub fidelities: Vec<f64>,
    /// Position expectation sum_n n |psi_n(t)|^2 at each sample.
    pub positions: Vec<f64>,
    pub waves: Vec<WaveState>,
    pub final_state: WaveState,
}

/// Propagate the excitation from site 1 through the schedule, sampling
/// `samples` uniform times (endpoints included) by per-segment Hermitian
/// matrix exponentials.
pub fn simulate_schedule(schedule: &Schedule, samples: usize) -> Result<ScheduleTrace> {
    let n = schedule.spec.n_sites();
    let samples = samples.max(2);
    let total = schedule.total_duration();
    let times: Vec<f64> = (0..samples)
        .map(|i| total * i as f64 / (samples - 1) as f64)
        .collect();

    let mut waves = Vec::with_capacity(samples);
    let mut state = WaveState::site_basis(n, 1);
    let mut sample_idx = 0;
    let mut seg_start = 0.0;
    for seg in schedule.segments() {
        let prop = oracle::SegmentPropagator::new(&seg.couplings, n)?;
        let seg_end = seg_start + seg.duration;
        while sample_idx < samples && times[sample_idx] <= seg_end + 1e-12 * total.max(1.0) {
            let dt = (times[sample_idx] - seg_start).max(0.0);
            waves.push(prop.apply(dt, &state)?);
            sample_idx += 1;
        }
        state = prop.apply(seg.duration, &state)?;
        seg_start = seg_end;
    }
    while sample_idx < samples {
        waves.push(state.clone());
        sample_idx += 1;
    }

    let fidelities = waves.iter().map(|w| w.probability(n)).collect();
    let positions = waves.iter().map(|w| w.position_expectation()).collect();
    Ok(ScheduleTrace {
        times,
        fidelities,
        positions,
        waves,
        final_state: state,
    })
}
