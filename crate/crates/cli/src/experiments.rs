//! Scenario runs, the Case-1/Case-2 comparison and the truck-closure sweep.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use stackfreight_core::dnl::{load_network, LoadingParams, LoadingResult};
use stackfreight_core::due::{solve_due, solve_due_from, DueOptions, DueSolution, DueTraceRow};
use stackfreight_core::mpcc::{
    frozen_truck_schedule, initial_control, solve_mpcc, truck_cost, ControlVector, MpccReport, MpccTraceRow,
    PenaltyConfig,
};
use stackfreight_core::net::{ArcId, Network};
use stackfreight_core::traj::{TimeGrid, Trajectory};
use stackfreight_core::Error as CoreError;

use crate::config::{Scale, ScenarioConfig};
use crate::error::CliError;
use crate::io;

/// Equilibrium and loading for a fixed truck schedule.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub due: DueSolution,
    pub loading: LoadingResult,
    pub h_tr: Vec<Trajectory>,
    pub private_cost: f64,
    pub truck_cost: f64,
}

impl Evaluation {
    pub fn total_cost(&self) -> f64 {
        self.private_cost + self.truck_cost
    }
}

fn due_or_best(r: Result<DueSolution, CoreError>) -> Result<DueSolution, CliError> {
    match r {
        Ok(s) => Ok(s),
        Err(e) => Ok(e.into_best_due()?),
    }
}

/// Private equilibrium for `h_tr` (warm-started from `start` when given) and
/// the costs under its loading. A non-converged equilibrium is kept with
/// `due.converged = false`.
pub fn evaluate_schedule(
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    h_tr: &[Trajectory],
    start: Option<&[Trajectory]>,
    opts: &DueOptions,
) -> Result<Evaluation, CliError> {
    let due = due_or_best(match start {
        Some(h0) => solve_due_from(h0, h_tr, network, grid, params, opts),
        None => solve_due(h_tr, network, grid, params, opts),
    })?;
    let loading = load_network(&due.h_pr_star, h_tr, network, grid, params)?;
    let private_cost = truck_cost(&due.h_pr_star, loading.effective_delays())?;
    let truck = truck_cost(h_tr, loading.effective_delays())?;
    Ok(Evaluation {
        due,
        loading,
        h_tr: h_tr.to_vec(),
        private_cost,
        truck_cost: truck,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MpccSummary {
    pub converged: bool,
    pub outer_iterations: usize,
    pub gradient_evaluations: usize,
    pub loadings: usize,
    pub eps1: f64,
    pub final_m: f64,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub last_outer_step: f64,
}

impl From<&MpccReport> for MpccSummary {
    fn from(r: &MpccReport) -> Self {
        Self {
            converged: r.converged,
            outer_iterations: r.outer_iterations,
            gradient_evaluations: r.gradient_evaluations,
            loadings: r.loadings,
            eps1: r.eps1,
            final_m: r.final_m,
            initial_residual: r.initial_residual,
            final_residual: r.final_residual,
            last_outer_step: r.last_outer_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub config_hash: String,
    pub scale: Scale,
    pub total_social_cost: f64,
    pub private_cost: f64,
    pub truck_cost: f64,
    pub due_gap: f64,
    pub due_gap_tol: f64,
    pub due_iterations: usize,
    pub due_converged: bool,
    /// Absent for truck-free runs.
    pub comp_residual: Option<f64>,
    pub mpcc: Option<MpccSummary>,
    pub v: Vec<f64>,
    pub mu: Option<Vec<f64>>,
    pub converged: bool,
    pub wall_clock_seconds: f64,
    pub files: Vec<String>,
}

/// Everything a scenario run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub network: Network,
    pub evaluation: Evaluation,
    pub due_trace: Vec<DueTraceRow>,
    pub mpcc_trace: Vec<MpccTraceRow>,
}

struct Case2 {
    u: ControlVector,
    report: MpccReport,
    evaluation: Evaluation,
}

fn run_case2(
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    penalty: &PenaltyConfig,
    u0: &ControlVector,
) -> Result<Case2, CliError> {
    let (u, report) = solve_mpcc(u0, network, grid, params, penalty)?;
    let evaluation = evaluate_schedule(network, grid, params, &u.h_tr, Some(&u.h_pr), &penalty.due)?;
    Ok(Case2 { u, report, evaluation })
}

fn log(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}

/// Solve one scenario: the penalty method when trucks are present, the
/// private equilibrium otherwise.
pub fn run_scenario(cfg: &ScenarioConfig, verbose: bool) -> Result<RunOutput, CliError> {
    let clock = Instant::now();
    let network = cfg.network()?;
    let grid = cfg.grid()?;
    let params = cfg.params();
    let mut opts = cfg.due_options();
    opts.trace = true;

    let (evaluation, due_trace, mpcc) = if cfg.has_trucks()? {
        log(verbose, || format!("{}: private equilibrium without trucks", cfg.id));
        let (u0, due0) = initial_control(&network, &grid, &params, &opts)?;
        log(verbose, || format!("{}: penalty loop", cfg.id));
        let c2 = run_case2(&network, &grid, &params, &cfg.penalty_config(), &u0)?;
        (c2.evaluation, due0.trace, Some((c2.u, c2.report)))
    } else {
        log(verbose, || format!("{}: private equilibrium", cfg.id));
        let zero = vec![Trajectory::zeros(grid); network.paths().len()];
        let ev = evaluate_schedule(&network, &grid, &params, &zero, None, &opts)?;
        let trace = ev.due.trace.clone();
        (ev, trace, None)
    };

    let due = &evaluation.due;
    let mpcc_ok = mpcc.as_ref().is_none_or(|(_, r)| r.converged);
    let report = RunReport {
        scenario: cfg.id.clone(),
        config_hash: cfg.content_hash(),
        scale: cfg.scale,
        total_social_cost: evaluation.total_cost(),
        private_cost: evaluation.private_cost,
        truck_cost: evaluation.truck_cost,
        due_gap: due.gap,
        due_gap_tol: due.gap_tol,
        due_iterations: due.iterations,
        due_converged: due.converged,
        comp_residual: mpcc.as_ref().map(|(_, r)| r.final_residual),
        mpcc: mpcc.as_ref().map(|(_, r)| MpccSummary::from(r)),
        v: due.v.clone(),
        mu: mpcc.as_ref().map(|(u, _)| u.mu.clone()),
        converged: due.converged && mpcc_ok,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        files: Vec::new(),
    };
    Ok(RunOutput {
        report,
        network,
        evaluation,
        due_trace,
        mpcc_trace: mpcc.map(|(_, r)| r.trace).unwrap_or_default(),
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Write the summary JSON, the loading series, per-path flow files and the
/// iteration traces into `dir`. Returns the file names (the summary last).
pub fn emit_outputs(out: &mut RunOutput, cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir)?;
    let stem = cfg.file_stem();
    let mut files = Vec::new();
    let names = io::path_names(&out.network);

    let name = format!("{stem}.series.csv");
    io::write_loading(create(dir, &name)?, &out.network, &out.evaluation.loading)?;
    files.push(name);
    let name = format!("{stem}.private.csv");
    io::write_trajectories(create(dir, &name)?, &names, &out.evaluation.due.h_pr_star)?;
    files.push(name);
    let name = format!("{stem}.truck.csv");
    io::write_trajectories(create(dir, &name)?, &names, &out.evaluation.h_tr)?;
    files.push(name);
    let name = format!("{stem}.psi.csv");
    io::write_trajectories(create(dir, &name)?, &names, out.evaluation.loading.effective_delays())?;
    files.push(name);
    let name = format!("{stem}.due_trace.csv");
    io::write_due_trace(create(dir, &name)?, &out.due_trace)?;
    files.push(name);
    if out.report.mpcc.is_some() {
        let name = format!("{stem}.mpcc_trace.csv");
        io::write_mpcc_trace(create(dir, &name)?, &out.mpcc_trace)?;
        files.push(name);
    }
    let name = format!("{stem}.summary.json");
    files.push(name.clone());
    out.report.files = files.clone();
    io::write_json(&dir.join(&name), &out.report)?;
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub scenario: String,
    pub config_hash: String,
    /// Case 1: true truck cost of the frozen-delay schedule.
    pub z0: f64,
    /// Case 2: true truck cost after the penalty method.
    pub z1: f64,
    /// `(z0 − z1)/z0`, zero without trucks.
    pub reduction: f64,
    pub case1_total_cost: f64,
    pub case2_total_cost: f64,
    /// Set when the penalty method ended above `z0` and the Case-1
    /// schedule was kept.
    pub case2_kept_case1: bool,
    pub case1_due_converged: bool,
    pub case2_due_converged: bool,
    pub mpcc: Option<MpccSummary>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub mpcc_trace: Vec<MpccTraceRow>,
}

/// Case 1 against Case 2 for one scenario.
pub fn compare_cases(cfg: &ScenarioConfig, verbose: bool) -> Result<Comparison, CliError> {
    let clock = Instant::now();
    let network = cfg.network()?;
    let grid = cfg.grid()?;
    let params = cfg.params();
    let opts = cfg.due_options();
    let base = |z0: f64, z1: f64, t0: f64, t1: f64| Comparison {
        scenario: cfg.id.clone(),
        config_hash: cfg.content_hash(),
        z0,
        z1,
        reduction: if z0 > 0.0 { (z0 - z1) / z0 } else { 0.0 },
        case1_total_cost: t0,
        case2_total_cost: t1,
        case2_kept_case1: false,
        case1_due_converged: true,
        case2_due_converged: true,
        mpcc: None,
        wall_clock_seconds: 0.0,
        mpcc_trace: Vec::new(),
    };
    if !cfg.has_trucks()? {
        let zero = vec![Trajectory::zeros(grid); network.paths().len()];
        let ev = evaluate_schedule(&network, &grid, &params, &zero, None, &opts)?;
        let mut c = base(0.0, 0.0, ev.total_cost(), ev.total_cost());
        c.case1_due_converged = ev.due.converged;
        c.case2_due_converged = ev.due.converged;
        c.wall_clock_seconds = clock.elapsed().as_secs_f64();
        return Ok(c);
    }

    log(verbose, || format!("{}: case 1", cfg.id));
    let (u0, _) = initial_control(&network, &grid, &params, &opts)?;
    let case1 = evaluate_schedule(&network, &grid, &params, &u0.h_tr, Some(&u0.h_pr), &opts)?;
    log(verbose, || format!("{}: case 1 truck cost {:.6}", cfg.id, case1.truck_cost));
    log(verbose, || format!("{}: case 2", cfg.id));
    let c2 = run_case2(&network, &grid, &params, &cfg.penalty_config(), &u0)?;
    let kept = c2.evaluation.truck_cost > case1.truck_cost;
    let case2 = if kept { &case1 } else { &c2.evaluation };
    log(verbose, || format!("{}: case 2 truck cost {:.6}", cfg.id, case2.truck_cost));

    let mut c = base(case1.truck_cost, case2.truck_cost, case1.total_cost(), case2.total_cost());
    c.case2_kept_case1 = kept;
    c.case1_due_converged = case1.due.converged;
    c.case2_due_converged = case2.due.converged;
    c.mpcc = Some(MpccSummary::from(&c2.report));
    c.mpcc_trace = c2.report.trace;
    c.wall_clock_seconds = clock.elapsed().as_secs_f64();
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub arc: u32,
    /// Set when the closure leaves an OD pair without a truck path or the
    /// solve failed; the cost fields are then absent.
    pub note: Option<String>,
    pub total_social_cost: Option<f64>,
    pub truck_cost: Option<f64>,
    pub delta_total: Option<f64>,
    pub delta_truck: Option<f64>,
    /// Closure lowers total social cost.
    pub paradox: bool,
    /// Largest relative deviation of routed truck mass from demand.
    pub truck_routing_error: Option<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub config_hash: String,
    pub baseline_total_cost: f64,
    pub baseline_truck_cost: f64,
    /// Solved rows sorted by `delta_total`, then skipped rows by arc.
    pub rows: Vec<SweepRow>,
    pub paradoxical_arcs: Vec<u32>,
    /// Paradoxical arcs where truck cost rises while total cost falls.
    pub truck_up_total_down: Vec<u32>,
    pub wall_clock_seconds: f64,
}

fn routing_error(network: &Network, h_tr: &[Trajectory]) -> f64 {
    let mut worst = 0.0f64;
    for (w, od) in network.od_pairs().iter().enumerate() {
        let total: f64 = network.paths_of(w).map(|p| h_tr[p].integrate()).sum();
        worst = worst.max((total - od.demand_truck).abs() / od.demand_truck.max(1.0));
    }
    worst
}

/// Close each arc to trucks in turn and re-solve (`arcs = None` sweeps
/// every arc of the network).
pub fn braess_sweep(cfg: &ScenarioConfig, arcs: Option<&[u32]>, verbose: bool) -> Result<SweepReport, CliError> {
    let clock = Instant::now();
    let network = cfg.network()?;
    if !network.od_pairs().iter().any(|o| o.demand_truck > 0.0) {
        return Err(CliError::Config("the sweep needs truck demand".into()));
    }
    let grid = cfg.grid()?;
    let params = cfg.params();
    let opts = cfg.due_options();
    let penalty = cfg.penalty_config();

    log(verbose, || format!("{}: unblocked run", cfg.id));
    let (u0, due0) = initial_control(&network, &grid, &params, &opts)?;
    let baseline = run_case2(&network, &grid, &params, &penalty, &u0)?.evaluation;
    let (base_total, base_truck) = (baseline.total_cost(), baseline.truck_cost);

    let list: Vec<u32> = match arcs {
        Some(a) => a.to_vec(),
        None => network.arcs().iter().map(|a| a.id.0).collect(),
    };
    let mut rows = Vec::with_capacity(list.len());
    for arc in list {
        log(verbose, || format!("{}: closing arc {arc}", cfg.id));
        let skipped = |note: String| SweepRow {
            arc,
            note: Some(note),
            total_social_cost: None,
            truck_cost: None,
            delta_total: None,
            delta_truck: None,
            paradox: false,
            truck_routing_error: None,
            converged: false,
        };
        let blocked = match network.block_arc_for_trucks(ArcId(arc)) {
            Ok(n) => n,
            Err(e) => {
                rows.push(skipped(e.to_string()));
                continue;
            }
        };
        let solved = frozen_truck_schedule(&due0.psi, &blocked)
            .map_err(CliError::from)
            .and_then(|h_tr| {
                let u = ControlVector::from_due(&due0, h_tr);
                run_case2(&blocked, &grid, &params, &penalty, &u)
            });
        match solved {
            Ok(c2) => {
                let ev = &c2.evaluation;
                let (total, truck) = (ev.total_cost(), ev.truck_cost);
                rows.push(SweepRow {
                    arc,
                    note: None,
                    total_social_cost: Some(total),
                    truck_cost: Some(truck),
                    delta_total: Some(total - base_total),
                    delta_truck: Some(truck - base_truck),
                    paradox: total < base_total,
                    truck_routing_error: Some(routing_error(&blocked, &ev.h_tr)),
                    converged: ev.due.converged && c2.report.converged,
                });
            }
            Err(e) => rows.push(skipped(e.to_string())),
        }
    }
    rows.sort_by(|a, b| match (a.delta_total, b.delta_total) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.arc.cmp(&b.arc)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.arc.cmp(&b.arc),
    });
    let paradoxical_arcs: Vec<u32> = rows.iter().filter(|r| r.paradox).map(|r| r.arc).collect();
    let truck_up_total_down = rows
        .iter()
        .filter(|r| r.paradox && r.delta_truck.is_some_and(|d| d > 0.0))
        .map(|r| r.arc)
        .collect();
    Ok(SweepReport {
        scenario: cfg.id.clone(),
        config_hash: cfg.content_hash(),
        baseline_total_cost: base_total,
        baseline_truck_cost: base_truck,
        rows,
        paradoxical_arcs,
        truck_up_total_down,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    })
}

pub fn write_comparison(c: &Comparison, cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir)?;
    let stem = cfg.file_stem();
    let mut files = Vec::new();
    if c.mpcc.is_some() {
        let name = format!("{stem}.compare_trace.csv");
        io::write_mpcc_trace(create(dir, &name)?, &c.mpcc_trace)?;
        files.push(name);
    }
    let name = format!("{stem}.compare.json");
    io::write_json(&dir.join(&name), c)?;
    files.push(name);
    Ok(files)
}

pub fn write_sweep(s: &SweepReport, cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir)?;
    let stem = cfg.file_stem();
    let csv_name = format!("{stem}.sweep.csv");
    let mut w = csv::Writer::from_writer(create(dir, &csv_name)?);
    for row in &s.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let json_name = format!("{stem}.sweep.json");
    io::write_json(&dir.join(&json_name), s)?;
    Ok(vec![csv_name, json_name])
}

/// Private equilibrium with trucks held at the frozen-delay schedule (zero
/// without truck demand).
pub fn run_due(cfg: &ScenarioConfig, verbose: bool) -> Result<RunOutput, CliError> {
    let clock = Instant::now();
    let network = cfg.network()?;
    let grid = cfg.grid()?;
    let params = cfg.params();
    let mut opts = cfg.due_options();
    opts.trace = true;
    log(verbose, || format!("{}: private equilibrium", cfg.id));
    let evaluation = if cfg.has_trucks()? {
        let (u0, _) = initial_control(&network, &grid, &params, &opts)?;
        evaluate_schedule(&network, &grid, &params, &u0.h_tr, Some(&u0.h_pr), &opts)?
    } else {
        let zero = vec![Trajectory::zeros(grid); network.paths().len()];
        evaluate_schedule(&network, &grid, &params, &zero, None, &opts)?
    };
    let due = &evaluation.due;
    let report = RunReport {
        scenario: cfg.id.clone(),
        config_hash: cfg.content_hash(),
        scale: cfg.scale,
        total_social_cost: evaluation.total_cost(),
        private_cost: evaluation.private_cost,
        truck_cost: evaluation.truck_cost,
        due_gap: due.gap,
        due_gap_tol: due.gap_tol,
        due_iterations: due.iterations,
        due_converged: due.converged,
        comp_residual: None,
        mpcc: None,
        v: due.v.clone(),
        mu: None,
        converged: due.converged,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        files: Vec::new(),
    };
    let due_trace = due.trace.clone();
    Ok(RunOutput {
        report,
        network,
        evaluation,
        due_trace,
        mpcc_trace: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoadReport {
    pub scenario: String,
    pub config_hash: String,
    pub private_cost: f64,
    pub truck_cost: f64,
    pub total_social_cost: f64,
    pub clamp_count: u64,
    pub den_floor_count: u64,
    pub max_conservation_residual: f64,
    pub fifo_passed: bool,
    pub fifo_violations: usize,
    pub files: Vec<String>,
}

/// Network loading alone, with every class spread evenly over its allowed
/// paths and the whole window.
pub fn run_load(cfg: &ScenarioConfig, dir: &Path, verbose: bool) -> Result<LoadReport, CliError> {
    let network = cfg.network()?;
    let grid = cfg.grid()?;
    let params = cfg.params();
    let span = grid.tf() - grid.t0();
    let h_pr = stackfreight_core::due::uniform_private_flows(&network, &grid);
    let mut h_tr = vec![Trajectory::zeros(grid); network.paths().len()];
    for (w, od) in network.od_pairs().iter().enumerate() {
        let allowed: Vec<usize> = network.paths_of(w).filter(|&p| network.paths()[p].truck_allowed).collect();
        for &p in &allowed {
            h_tr[p] = Trajectory::constant(grid, od.demand_truck / (allowed.len() as f64 * span));
        }
    }
    log(verbose, || format!("{}: loading", cfg.id));
    let res = load_network(&h_pr, &h_tr, &network, &grid, &params)?;
    let fifo = stackfreight_core::dnl::fifo_check(&res);

    std::fs::create_dir_all(dir)?;
    let stem = cfg.file_stem();
    let series = format!("{stem}.load.csv");
    io::write_loading(create(dir, &series)?, &network, &res)?;
    let summary = format!("{stem}.load.json");
    let private_cost = truck_cost(&h_pr, res.effective_delays())?;
    let truck = truck_cost(&h_tr, res.effective_delays())?;
    let d = res.diagnostics();
    let report = LoadReport {
        scenario: cfg.id.clone(),
        config_hash: cfg.content_hash(),
        private_cost,
        truck_cost: truck,
        total_social_cost: private_cost + truck,
        clamp_count: d.clamp_count,
        den_floor_count: d.den_floor_count,
        max_conservation_residual: d.max_conservation_residual,
        fifo_passed: fifo.passed,
        fifo_violations: fifo.violations,
        files: vec![series, summary.clone()],
    };
    io::write_json(&dir.join(&summary), &report)?;
    Ok(report)
}
