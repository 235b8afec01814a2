//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use qbrach::baseline::{
    perfect_transfer_schedule, simulate_schedule, stepwise_schedule,
};
use qbrach::chain::{ChainSpec, WaveState};
use qbrach::dynamics::conservation_report;
use qbrach::error::Error as CoreError;
use qbrach::oracle::{expm_propagate, run_rhs_equivalence, CLOSURE_TOL};
use qbrach::solver::{
    fit_scaling, rescale_solution, solution_trajectory, ContinuationSolver, ScalingFit,
    ShootingParams, SolveMethod, SolveOptions, Solution, SolverMetadata,
};

use crate::io::{
    self, csv_row, fmt17, read_json, write_json, KindProbe, ScheduleFile, SeedStore, SolutionFile,
};
use crate::{
    BaselineArgs, CliError, ExportArgs, FitArgs, ProtocolArg, SimulateArgs, SolveArgs, SweepArgs,
    VerifyArgs, SEED_STORE_ENV,
};

/// Solutions enter the seed store only above this fidelity.
const STORE_FIDELITY_THRESHOLD: f64 = 1.0 - 1e-8;

fn solve_options(tol: Option<f64>) -> Result<SolveOptions, CliError> {
    let mut opts = SolveOptions::default();
    if let Some(tol) = tol {
        if !(1e-14..=1e-3).contains(&tol) {
            return Err(CliError::Schema(format!(
                "--tol {tol} outside the supported range [1e-14, 1e-3]"
            )));
        }
        opts.residual_tol = tol;
        opts.infidelity_tol = tol;
    }
    Ok(opts)
}

fn seed_store_path(cli_path: &Option<PathBuf>) -> Option<PathBuf> {
    cli_path
        .clone()
        .or_else(|| std::env::var_os(SEED_STORE_ENV).map(PathBuf::from))
}

fn load_store(path: &Path) -> Result<SeedStore, CliError> {
    if path.exists() {
        SeedStore::load(path)
    } else {
        Ok(SeedStore::new())
    }
}

fn seeded_solver(
    j0: f64,
    opts: SolveOptions,
    method: qbrach::solver::MethodChoice,
    store: Option<&SeedStore>,
) -> ContinuationSolver {
    let mut solver = ContinuationSolver::new(j0, opts, method);
    if let Some(store) = store {
        for entry in store.entries.values() {
            solver.seed_guess(entry.n_sites, entry.raw_guess());
        }
    }
    solver
}

/// Best-effort record for a solve that did not converge.
fn unconverged_solution(
    spec: &ChainSpec,
    best: &[f64],
    residual_norm: f64,
    iterations: usize,
    opts: &SolveOptions,
) -> Solution {
    let raw = ShootingParams {
        j1_initial: best[0].abs().max(f64::MIN_POSITIVE),
        lambda_initial: best[1..].to_vec(),
    };
    let fidelity = (1.0 - residual_norm * residual_norm).clamp(0.0, 1.0);
    rescale_solution(
        &raw,
        spec,
        residual_norm,
        fidelity,
        SolverMetadata {
            method: SolveMethod::Shooting,
            iterations,
            residual_tol: opts.residual_tol,
            integration_tol: opts.integration_tol,
        },
    )
}

fn solution_json_line(file: &SolutionFile) -> Result<String, CliError> {
    #[derive(serde::Serialize)]
    struct Line<'a> {
        n_sites: usize,
        j0: f64,
        tau: f64,
        fidelity: f64,
        residual_norm: f64,
        converged: bool,
        method: &'a SolveMethod,
        iterations: usize,
    }
    io::to_json_string(&Line {
        n_sites: file.n_sites,
        j0: file.j0,
        tau: file.tau,
        fidelity: file.fidelity,
        residual_norm: file.residual_norm,
        converged: file.converged,
        method: &file.method,
        iterations: file.iterations,
    })
}

pub fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let spec = ChainSpec::new(args.n, args.j0).map_err(CliError::from_core)?;
    let opts = solve_options(args.tol)?;
    let store_path = seed_store_path(&args.seed_store);
    let mut store = match &store_path {
        Some(p) => Some(load_store(p)?),
        None => None,
    };
    let mut solver = seeded_solver(args.j0, opts, args.method.into(), store.as_ref());
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("solution-n{}.json", args.n)));

    match solver.solve(args.n) {
        Ok(solution) => {
            let file = SolutionFile::from_solution(solution, true);
            write_json(&out_path, &file)?;
            if let (Some(store), Some(path)) = (store.as_mut(), store_path.as_ref()) {
                if solution.fidelity >= STORE_FIDELITY_THRESHOLD {
                    store.insert_solution(solution)?;
                    store.save(path)?;
                }
            }
            println!("{}", solution_json_line(&file)?);
            Ok(())
        }
        Err(CoreError::Convergence {
            iterations,
            residual_norm,
            best,
        }) => {
            let solution = unconverged_solution(&spec, &best, residual_norm, iterations, &opts);
            let file = SolutionFile::from_solution(&solution, false);
            write_json(&out_path, &file)?;
            println!("{}", solution_json_line(&file)?);
            Err(CliError::Convergence(format!(
                "N = {}: residual {residual_norm:.3e} after {iterations} iterations (best iterate written to {})",
                args.n,
                out_path.display()
            )))
        }
        Err(e) => Err(CliError::from_core(e)),
    }
}

struct SweepRow {
    n: usize,
    solution: Option<Solution>,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    if args.n_min < 2 || args.n_min >= args.n_max {
        return Err(CliError::Schema(format!(
            "need 2 <= n-min < n-max, got {}..{}",
            args.n_min, args.n_max
        )));
    }
    let opts = solve_options(args.tol)?;
    let store_path = seed_store_path(&args.seed_store);
    let mut store = match &store_path {
        Some(p) => Some(load_store(p)?),
        None => None,
    };
    let mut solver = seeded_solver(args.j0, opts, args.method.into(), store.as_ref());
    let out_path = args.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));

    let mut rows = Vec::new();
    for n in args.n_min..=args.n_max {
        match solver.solve(n) {
            Ok(sol) => {
                let sol = sol.clone();
                if let Some(store) = store.as_mut() {
                    if sol.fidelity >= STORE_FIDELITY_THRESHOLD {
                        store.insert_solution(&sol)?;
                    }
                }
                rows.push(SweepRow {
                    n,
                    solution: Some(sol),
                });
            }
            Err(_) => rows.push(SweepRow { n, solution: None }),
        }
    }
    if let (Some(store), Some(path)) = (store.as_ref(), store_path.as_ref()) {
        store.save(path)?;
    }

    let mut csv = String::from(
        "n,j0,tau,fidelity,residual_norm,method,converged,tau_stepwise,tau_perfect,ratio_stepwise,ratio_perfect\n",
    );
    for row in &rows {
        let spec = ChainSpec::new(row.n, args.j0).map_err(CliError::from_core)?;
        let tau_st = qbrach::baseline::stepwise_time(&spec);
        let tau_p = qbrach::baseline::perfect_transfer_time(&spec);
        let fields = match &row.solution {
            Some(sol) => vec![
                row.n.to_string(),
                fmt17(args.j0),
                fmt17(sol.tau),
                fmt17(sol.fidelity),
                fmt17(sol.residual_norm),
                sol.metadata.method.to_string(),
                "true".into(),
                fmt17(tau_st),
                fmt17(tau_p),
                fmt17(tau_st / sol.tau),
                fmt17(tau_p / sol.tau),
            ],
            None => vec![
                row.n.to_string(),
                fmt17(args.j0),
                String::new(),
                String::new(),
                String::new(),
                "-".into(),
                "false".into(),
                fmt17(tau_st),
                fmt17(tau_p),
                String::new(),
                String::new(),
            ],
        };
        csv.push_str(&csv_row(&fields));
        csv.push('\n');
    }
    fs::write(&out_path, &csv).map_err(|e| CliError::Io(format!("{}: {e}", out_path.display())))?;

    let points: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|r| r.solution.as_ref().map(|s| (r.n, s.tau * args.j0)))
        .collect();
    let fit = if points.len() >= 3 {
        Some(fit_scaling(&points).map_err(CliError::from_core)?)
    } else {
        None
    };

    #[derive(serde::Serialize)]
    struct Summary<'a> {
        rows: usize,
        converged: usize,
        csv: String,
        fit: Option<&'a ScalingFit>,
    }
    println!(
        "{}",
        io::to_json_string(&Summary {
            rows: rows.len(),
            converged: points.len(),
            csv: out_path.display().to_string(),
            fit: fit.as_ref(),
        })?
    );
    if points.len() < rows.len() {
        return Err(CliError::Convergence(format!(
            "{} of {} sweep rows failed to converge",
            rows.len() - points.len(),
            rows.len()
        )));
    }
    Ok(())
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<(), CliError> {
    let spec = ChainSpec::new(args.n, args.j0).map_err(CliError::from_core)?;
    let schedule = match args.protocol {
        ProtocolArg::Stepwise => stepwise_schedule(&spec),
        ProtocolArg::Perfect => perfect_transfer_schedule(&spec),
    };
    let terminal = expm_propagate(&schedule, &WaveState::site_basis(args.n, 1))
        .map_err(CliError::from_core)?;
    if let Some(out) = &args.out {
        write_json(out, &ScheduleFile::from_schedule(&schedule))?;
    }
    #[derive(serde::Serialize)]
    struct Line {
        protocol: String,
        n_sites: usize,
        j0: f64,
        tau: f64,
        terminal_fidelity: f64,
    }
    println!(
        "{}",
        io::to_json_string(&Line {
            protocol: format!("{:?}", schedule.label).to_lowercase(),
            n_sites: args.n,
            j0: args.j0,
            tau: schedule.total_duration(),
            terminal_fidelity: terminal.probability(args.n),
        })?
    );
    Ok(())
}

fn trajectory_csv(
    times: &[f64],
    couplings: impl Fn(usize) -> Vec<f64>,
    waves: &[WaveState],
    n_sites: usize,
) -> String {
    let mut header = vec!["t".to_string()];
    header.extend((1..n_sites).map(|m| format!("J_{m}")));
    header.extend((1..=n_sites).map(|s| format!("p_{s}")));
    header.push("x_mean".into());
    let mut csv = header.join(",");
    csv.push('\n');
    for (idx, (t, wave)) in times.iter().zip(waves).enumerate() {
        let mut fields = vec![fmt17(*t)];
        fields.extend(couplings(idx).iter().map(|j| fmt17(*j)));
        fields.extend((1..=n_sites).map(|s| fmt17(wave.probability(s))));
        fields.push(fmt17(wave.position_expectation()));
        csv.push_str(&csv_row(&fields));
        csv.push('\n');
    }
    csv
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let probe: KindProbe = read_json(&args.input)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("trajectory.csv"));
    let samples = args.samples.max(2);

    let csv = match probe.kind.as_str() {
        "solution" => {
            let file: SolutionFile = read_json(&args.input)?;
            let solution = file.to_solution()?;
            let traj = solution_trajectory(&solution, samples, 1e-10)
                .map_err(CliError::from_core)?;
            trajectory_csv(
                &traj.times,
                |idx| traj.controls[idx].couplings().to_vec(),
                &traj.waves,
                solution.spec.n_sites(),
            )
        }
        "schedule" => {
            let file: ScheduleFile = read_json(&args.input)?;
            let schedule = file.to_schedule()?;
            let trace = simulate_schedule(&schedule, samples).map_err(CliError::from_core)?;
            trajectory_csv(
                &trace.times,
                |idx| schedule.couplings_at(trace.times[idx]).to_vec(),
                &trace.waves,
                schedule.spec.n_sites(),
            )
        }
        other => {
            return Err(CliError::Schema(format!(
                "field `kind`: expected \"solution\" or \"schedule\", found \"{other}\""
            )))
        }
    };
    fs::write(&out_path, csv).map_err(|e| CliError::Io(format!("{}: {e}", out_path.display())))?;
    println!(
        "{}",
        io::to_json_string(&serde_json::json!({
            "csv": out_path.display().to_string(),
            "samples": samples,
        }))?
    );
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.input)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.input.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Schema("empty CSV".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Schema(format!("field `{name}` missing from CSV header")))
    };
    let (n_col, tau_col, j0_col, conv_col) =
        (col("n")?, col("tau")?, col("j0")?, col("converged")?);

    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields[conv_col] != "true" {
            continue;
        }
        let n: usize = fields[n_col]
            .parse()
            .map_err(|e| CliError::Schema(format!("field `n`: {e}")))?;
        if args.n_min.is_some_and(|lo| n < lo) || args.n_max.is_some_and(|hi| n > hi) {
            continue;
        }
        let tau: f64 = fields[tau_col]
            .parse()
            .map_err(|e| CliError::Schema(format!("field `tau`: {e}")))?;
        let j0: f64 = fields[j0_col]
            .parse()
            .map_err(|e| CliError::Schema(format!("field `j0`: {e}")))?;
        points.push((n, tau * j0));
    }
    let fit = fit_scaling(&points).map_err(CliError::from_core)?;
    println!("{}", io::to_json_string(&fit)?);
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("verify-reports"));
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut all_pass = true;

    // Structured control flow against the dense commutator oracle.
    let equivalence = run_rhs_equivalence(3..=8, 100, 0x5EED).map_err(CliError::from_core)?;
    let eq_pass = equivalence.rhs.max_abs_deviation <= CLOSURE_TOL
        && equivalence.out_of_family_max <= CLOSURE_TOL;
    all_pass &= eq_pass;
    #[derive(serde::Serialize)]
    struct EqReport<'a> {
        max_abs_deviation: f64,
        out_of_family_max: f64,
        cases_run: usize,
        worst_case_input: &'a str,
        threshold: f64,
        pass: bool,
    }
    let eq_report = EqReport {
        max_abs_deviation: equivalence.rhs.max_abs_deviation,
        out_of_family_max: equivalence.out_of_family_max,
        cases_run: equivalence.rhs.cases_run,
        worst_case_input: &equivalence.rhs.worst_case_input,
        threshold: CLOSURE_TOL,
        pass: eq_pass,
    };
    write_json(&out_dir.join("oracle_equivalence.json"), &eq_report)?;
    println!(
        "{}",
        io::to_json_string(&serde_json::json!({
            "check": "oracle_equivalence",
            "max_abs_deviation": equivalence.rhs.max_abs_deviation,
            "out_of_family_max": equivalence.out_of_family_max,
            "pass": eq_pass,
        }))?
    );

    // Conserved quantities along a solved trajectory.
    let store_path = seed_store_path(&args.seed_store);
    let store = match &store_path {
        Some(p) => Some(load_store(p)?),
        None => None,
    };
    let mut solver = seeded_solver(
        1.0,
        SolveOptions::default(),
        qbrach::solver::MethodChoice::Auto,
        store.as_ref(),
    );
    let solution = solver
        .solve(args.n_conservation)
        .map_err(CliError::from_core)?;
    let traj = solution_trajectory(solution, 512, 1e-10).map_err(CliError::from_core)?;
    let report = conservation_report(&traj).map_err(CliError::from_core)?;
    let cons_pass = report.max_drift() <= 1e-8;
    all_pass &= cons_pass;
    #[derive(serde::Serialize)]
    struct ConsReport {
        n_sites: usize,
        tau: f64,
        #[serde(flatten)]
        report: qbrach::dynamics::ConservationReport,
        threshold: f64,
        pass: bool,
    }
    write_json(
        &out_dir.join("conservation.json"),
        &ConsReport {
            n_sites: args.n_conservation,
            tau: solution.tau,
            report,
            threshold: 1e-8,
            pass: cons_pass,
        },
    )?;
    println!(
        "{}",
        io::to_json_string(&serde_json::json!({
            "check": "conservation",
            "n_sites": args.n_conservation,
            "max_drift": report.max_drift(),
            "pass": cons_pass,
        }))?
    );

    // Closed-form baselines propagated exactly.
    let mut min_step = 1.0f64;
    let mut min_perf = 1.0f64;
    for n in 2..=40 {
        let spec = ChainSpec::new(n, 1.0).map_err(CliError::from_core)?;
        let psi0 = WaveState::site_basis(n, 1);
        min_step = min_step.min(
            expm_propagate(&stepwise_schedule(&spec), &psi0)
                .map_err(CliError::from_core)?
                .probability(n),
        );
        min_perf = min_perf.min(
            expm_propagate(&perfect_transfer_schedule(&spec), &psi0)
                .map_err(CliError::from_core)?
                .probability(n),
        );
    }
    let base_pass = min_step >= 1.0 - 1e-10 && min_perf >= 1.0 - 1e-10;
    all_pass &= base_pass;
    write_json(
        &out_dir.join("baseline_fidelity.json"),
        &serde_json::json!({
            "n_range": [2, 40],
            "min_stepwise_fidelity": min_step,
            "min_perfect_fidelity": min_perf,
            "threshold": 1.0 - 1e-10,
            "pass": base_pass,
        }),
    )?;
    println!(
        "{}",
        io::to_json_string(&serde_json::json!({
            "check": "baseline_fidelity",
            "min_stepwise_fidelity": min_step,
            "min_perfect_fidelity": min_perf,
            "pass": base_pass,
        }))?
    );

    if all_pass {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "verification threshold breached; reports in {}",
            out_dir.display()
        )))
    }
}

pub fn cmd_export(args: &ExportArgs) -> Result<(), CliError> {
    let store_path = seed_store_path(&args.seed_store)
        .ok_or_else(|| CliError::Schema("no seed store given (flag or env)".into()))?;
    let store = SeedStore::load(&store_path)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("seed-table.csv"));

    let max_n = store.entries.keys().copied().max().unwrap_or(2);
    let mut header = vec![
        "n".to_string(),
        "j0".into(),
        "tau".into(),
        "fidelity".into(),
        "method".into(),
        "iterations".into(),
    ];
    header.extend((3..=max_n).map(|q| format!("lambda_1_{q}")));
    let mut csv = header.join(",");
    csv.push('\n');
    for entry in store.entries.values() {
        let mut fields = vec![
            entry.n_sites.to_string(),
            fmt17(entry.j0),
            fmt17(entry.tau),
            fmt17(entry.fidelity),
            entry.method.to_string(),
            entry.iterations.to_string(),
        ];
        for q in 3..=max_n {
            let idx = q - 3;
            fields.push(
                entry
                    .params
                    .lambda_initial
                    .get(idx)
                    .map(|l| fmt17(*l))
                    .unwrap_or_default(),
            );
        }
        csv.push_str(&csv_row(&fields));
        csv.push('\n');
    }
    fs::write(&out_path, csv).map_err(|e| CliError::Io(format!("{}: {e}", out_path.display())))?;
    println!(
        "{}",
        io::to_json_string(&serde_json::json!({
            "csv": out_path.display().to_string(),
            "entries": store.entries.len(),
        }))?
    );
    Ok(())
}
