//! Cross-method and cross-route validation: the shooting and gradient
//! paths must land on the same solution, the adaptive integrator must
//! agree with exact piecewise-constant propagation, and converged
//! solutions must exhibit the terminal control pattern mirroring the
//! initial one.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use qbrach::baseline::{stepwise_time, Schedule, ScheduleLabel, Segment};
use qbrach::chain::{ChainSpec, WaveState};
use qbrach::oracle::expm_propagate;
use qbrach::solver::{
    continuation_guess, mirror_diagnostics, solution_trajectory, solve_gradient,
    ContinuationSolver, MethodChoice, Solution, SolveOptions,
};

fn chain() -> &'static BTreeMap<usize, Solution> {
    static CHAIN: OnceLock<BTreeMap<usize, Solution>> = OnceLock::new();
    CHAIN.get_or_init(|| {
        let mut solver = ContinuationSolver::new(1.0, SolveOptions::default(), MethodChoice::Auto);
        solver.solve(15).expect("shooting/gradient chain to N = 15");
        solver.solutions().clone()
    })
}

#[test]
fn shooting_and_gradient_agree() {
    let fam = chain();
    let opts = SolveOptions {
        infidelity_tol: 1e-11,
        ..Default::default()
    };
    for n in 3..=12usize {
        let spec = ChainSpec::new(n, 1.0).unwrap();
        let shoot = &fam[&n];
        let guess = continuation_guess(&fam[&(n - 1)]).unwrap();
        let grad = solve_gradient(&spec, &guess, &opts).unwrap();
        assert!(
            (grad.tau - shoot.tau).abs() <= 1e-5 * shoot.tau,
            "N={n}: tau {} vs {}",
            grad.tau,
            shoot.tau
        );
        for (a, b) in grad
            .params
            .lambda_initial
            .iter()
            .zip(&shoot.params.lambda_initial)
        {
            assert!((a - b).abs() <= 1e-4, "N={n}: lambda {a} vs {b}");
        }
    }
}

#[test]
fn transfer_time_is_monotone_and_beats_stepwise() {
    let fam = chain();
    let mut prev = 0.0;
    for (n, sol) in fam.iter().filter(|(n, _)| **n >= 3) {
        assert!(sol.tau > prev, "tau not increasing at N={n}");
        prev = sol.tau;
        let spec = ChainSpec::new(*n, 1.0).unwrap();
        assert!(
            sol.tau < stepwise_time(&spec),
            "N={n}: optimal {} is not below stepwise {}",
            sol.tau,
            stepwise_time(&spec)
        );
        assert!(sol.fidelity >= 1.0 - 1e-8, "N={n}: fidelity {}", sol.fidelity);
    }
}

#[test]
fn mirror_pattern_at_terminal_time() {
    let fam = chain();
    for n in [4usize, 8, 12] {
        let report = mirror_diagnostics(&fam[&n], 1e-12).unwrap();
        assert!(
            report.max_interior_coupling < 1e-6,
            "N={n}: interior couplings {} at tau",
            report.max_interior_coupling
        );
        assert!(
            report.max_off_family_multiplier < 1e-6,
            "N={n}: off-family multipliers {} at tau",
            report.max_off_family_multiplier
        );
    }
}

/// Re-propagate the solved N = 15 coupling traces as a 2000-segment
/// piecewise-constant schedule through the exact matrix-exponential
/// oracle; midpoint sampling makes the discretization leakage second
/// order, so the terminal fidelity must match the adaptive integrator.
#[test]
fn resampled_schedule_matches_integrator() {
    let fam = chain();
    let sol = &fam[&15];
    let n_segments = 2000usize;
    // 2*S+1 uniform samples put the odd indices at segment midpoints.
    let traj = solution_trajectory(sol, 2 * n_segments + 1, 1e-10).unwrap();
    let dt = sol.tau / n_segments as f64;
    let segments: Vec<Segment> = (0..n_segments)
        .map(|k| Segment {
            duration: dt,
            couplings: traj.controls[2 * k + 1].couplings().to_vec(),
        })
        .collect();
    let schedule = Schedule::new(sol.spec, ScheduleLabel::Custom, segments).unwrap();
    let out = expm_propagate(&schedule, &WaveState::site_basis(15, 1)).unwrap();
    let fid_expm = out.probability(15);
    assert!(
        (fid_expm - sol.fidelity).abs() <= 1e-6,
        "expm fidelity {fid_expm} vs integrator {}",
        sol.fidelity
    );
}

/// Budget saturation along the physical trajectory, checked at 20 sample
/// times after rescaling.
#[test]
fn rescaled_budget_holds_along_trajectory() {
    let fam = chain();
    for n in [5usize, 10] {
        let traj = solution_trajectory(&fam[&n], 20, 1e-11).unwrap();
        for c in &traj.controls {
            let norm = qbrach::chain::coupling_norm(c.couplings());
            assert!((norm - 1.0).abs() <= 1e-10, "N={n}: budget {norm}");
        }
    }
}
