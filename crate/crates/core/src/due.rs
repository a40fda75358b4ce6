//! Dynamic user equilibrium of private vehicles for a fixed truck schedule.
//!
//! The equilibrium is the fixed point `h = Proj_Λ[h − γ·Ψ(h)]` over the
//! demand simplex `Λ = {h ≥ 0, Σ_p ∫ h_p = Q per OD}`. Its quality is
//! measured by the gap `Σ ∫ (Ψ_p − v_od)·h_p dt`, where `v_od` is the grid
//! minimum of `Ψ` over the OD pair's paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::dnl::{Inflows, Loader, LoadingParams};
use crate::math;
use crate::net::Network;
use crate::traj::{TimeGrid, Trajectory};
use crate::{Error, Result};

/// Euclidean projection of the values of one OD pair onto
/// `{z ≥ 0, Σ z·dt = q}`.
///
/// The result is `max(v − λ, 0)` with the scalar `λ` chosen so the integral
/// equals `q`; `λ` is found exactly from the sorted values.
pub fn project_values(values: &mut [f64], dt: f64, q: f64) {
    if q <= 0.0 || values.is_empty() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let target = q / dt;
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut lambda = sorted[0] - target;
    for (k, &v) in sorted.iter().enumerate() {
        prefix += v;
        let cand = (prefix - target) / (k + 1) as f64;
        if v > cand {
            lambda = cand;
        } else {
            break;
        }
    }
    let mut active = 0;
    let mut last = 0;
    for (i, v) in values.iter_mut().enumerate() {
        *v = (*v - lambda).max(0.0);
        if *v > 0.0 {
            active += 1;
            last = i;
        }
    }
    if active == 1 {
        values[last] = target;
    }
}

/// Project the trajectories of one OD pair onto its demand simplex.
pub fn project_demand_simplex(h: &[Trajectory], q: f64) -> Result<Vec<Trajectory>> {
    let Some(first) = h.first() else {
        return if q > 0.0 {
            Err(Error::InvalidParameter("positive demand with no paths".into()))
        } else {
            Ok(Vec::new())
        };
    };
    if !(q >= 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("demand must be >= 0, got {q}")));
    }
    let grid = *first.grid();
    let n = grid.n_intervals();
    let mut flat = Vec::with_capacity(h.len() * n);
    for t in h {
        if t.grid() != &grid {
            return Err(Error::GridMismatch);
        }
        flat.extend_from_slice(t.values());
    }
    project_values(&mut flat, grid.dt(), q);
    Ok(flat
        .chunks(n)
        .map(|c| Trajectory::from_values(grid, c.to_vec()).expect("finite projection"))
        .collect())
}

/// Update rule of the fixed-point iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DueMethod {
    /// `h⁺ = P[h − γΨ(h)]`, halving `γ` whenever the gap increases.
    Projection,
    /// `ȳ = P[h − γΨ(h)]`, `h⁺ = P[h − γΨ(ȳ)]`, with `γ` reduced until
    /// `γ‖Ψ(h) − Ψ(ȳ)‖ ≤ ν‖h − ȳ‖`.
    Extragradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DueOptions {
    pub method: DueMethod,
    /// Initial fixed-point step `γ` (vehicles/time per unit of `Ψ`).
    pub gamma: f64,
    /// Smallest step the adaptive rule may reach, relative to `gamma`.
    pub min_gamma_ratio: f64,
    /// Absolute gap target; `None` uses `1e-4 · ΣQ · v_free`.
    pub gap_tol: Option<f64>,
    /// Relative flow change `‖h⁺ − h‖/‖h‖` counted as converged.
    pub flow_tol: f64,
    pub max_iter: usize,
    /// Keep a per-iteration trace.
    pub trace: bool,
}

impl Default for DueOptions {
    fn default() -> Self {
        Self {
            method: DueMethod::Extragradient,
            gamma: 1.0,
            min_gamma_ratio: 1e-3,
            gap_tol: None,
            flow_tol: 0.0,
            max_iter: 500,
            trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DueTraceRow {
    pub iteration: usize,
    pub gap: f64,
    pub gamma: f64,
    pub flow_change: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DueSolution {
    pub h_pr_star: Vec<Trajectory>,
    /// Minimal effective delay per OD pair.
    pub v: Vec<f64>,
    pub gap: f64,
    pub gap_tol: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `Ψ_p` at `h_pr_star`.
    pub psi: Vec<Trajectory>,
    pub trace: Vec<DueTraceRow>,
}

/// Gap and per-OD minimum of `Ψ` for flat private flows and flat `Ψ`.
pub(crate) fn gap_from_flat(network: &Network, n: usize, dt: f64, h_pr: &[f64], psi: &[f64]) -> (f64, Vec<f64>) {
    let mut gap = 0.0;
    let mut v = Vec::with_capacity(network.od_pairs().len());
    for w in 0..network.od_pairs().len() {
        let r = network.paths_of(w);
        let cells = r.start * n..r.end * n;
        let vmin = psi[cells.clone()].iter().copied().fold(f64::INFINITY, f64::min);
        let vmin = if vmin.is_finite() { vmin } else { 0.0 };
        for i in cells {
            gap += (psi[i] - vmin) * h_pr[i];
        }
        v.push(vmin);
    }
    (gap * dt, v)
}

/// `(gap, v)` for given flows.
pub fn due_gap(
    h_pr: &[Trajectory],
    h_tr: &[Trajectory],
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
) -> Result<(f64, Vec<f64>)> {
    let h = Inflows::from_trajectories(h_pr, h_tr, grid)?;
    let mut loader = Loader::new(network, *grid, params)?;
    let run = loader.run(&h)?;
    Ok(gap_from_flat(network, grid.n_intervals(), grid.dt(), &h.private, run.psi()))
}

/// Private demand spread evenly over every path and cell of each OD pair.
pub fn uniform_private_flows(network: &Network, grid: &TimeGrid) -> Vec<Trajectory> {
    let span = grid.tf() - grid.t0();
    let mut out = Vec::with_capacity(network.paths().len());
    for (w, od) in network.od_pairs().iter().enumerate() {
        let k = network.paths_of(w).len() as f64;
        for _ in network.paths_of(w) {
            out.push(Trajectory::constant(*grid, od.demand_private / (k * span)));
        }
    }
    out
}

/// Default gap target: `1e-4 · ΣQ_pr · max_od v_free`.
pub fn default_gap_tol(network: &Network, grid: &TimeGrid, params: &LoadingParams) -> Result<f64> {
    let free = free_flow_v(network, grid, params)?;
    let total: f64 = network.od_pairs().iter().map(|o| o.demand_private).sum();
    Ok(1e-4 * total * free.iter().copied().fold(0.0, f64::max))
}

fn free_flow_v(network: &Network, grid: &TimeGrid, params: &LoadingParams) -> Result<Vec<f64>> {
    let n = grid.n_intervals();
    let mut loader = Loader::new(network, *grid, params)?;
    let zero = Inflows::zeros(network.paths().len(), n);
    let run = loader.run(&zero)?;
    Ok(gap_from_flat(network, n, grid.dt(), &zero.private, run.psi()).1)
}

/// Solve the equilibrium from uniform initial flows.
pub fn solve_due(
    h_tr: &[Trajectory],
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    opts: &DueOptions,
) -> Result<DueSolution> {
    let h0 = uniform_private_flows(network, grid);
    solve_due_from(&h0, h_tr, network, grid, params, opts)
}

/// Solve the equilibrium starting from `h0` (projected onto the demand
/// simplex first).
///
/// Returns [`Error::DueNotConverged`] carrying the best iterate when neither
/// tolerance is met within `max_iter` iterations.
pub fn solve_due_from(
    h0: &[Trajectory],
    h_tr: &[Trajectory],
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    opts: &DueOptions,
) -> Result<DueSolution> {
    if !(opts.gamma > 0.0) || !(opts.flow_tol >= 0.0) {
        return Err(Error::InvalidParameter("due step and tolerances must be positive".into()));
    }
    let n = grid.n_intervals();
    let dt = grid.dt();
    let np = network.paths().len();
    let mut h = Inflows::from_trajectories(h0, h_tr, grid)?;
    if h.truck.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("truck flows must be nonnegative".into()));
    }
    let gap_tol = match opts.gap_tol {
        Some(t) => t,
        None => default_gap_tol(network, grid, params)?,
    };
    let project = |flat: &mut [f64]| {
        for (w, od) in network.od_pairs().iter().enumerate() {
            let r = network.paths_of(w);
            project_values(&mut flat[r.start * n..r.end * n], dt, od.demand_private);
        }
    };
    project(&mut h.private);

    let mut loader = Loader::new(network, *grid, params)?;
    let mut psi = loader.run(&h)?.psi().to_vec();
    let (mut gap, mut v) = gap_from_flat(network, n, dt, &h.private, &psi);
    let mut best = (gap, h.private.clone(), psi.clone(), v.clone());
    let mut gamma = opts.gamma;
    let min_gamma = opts.gamma * opts.min_gamma_ratio;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = gap <= gap_tol;
    let mut next = vec![0.0; np * n];

    let mut bar = vec![0.0; np * n];
    let mut psi_bar = vec![0.0; np * n];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let step = |out: &mut [f64], base: &[f64], dir: &[f64], gamma: f64| {
            for i in 0..out.len() {
                out[i] = base[i] - gamma * dir[i];
            }
            project(out);
        };
        match opts.method {
            DueMethod::Projection => step(&mut next, &h.private, &psi, gamma),
            DueMethod::Extragradient => loop {
                step(&mut bar, &h.private, &psi, gamma);
                core::mem::swap(&mut h.private, &mut bar);
                let run = loader.run(&h);
                core::mem::swap(&mut h.private, &mut bar);
                psi_bar.copy_from_slice(run?.psi());
                let lhs = gamma * math::sqrt(sq(&psi, &psi_bar));
                let rhs = 0.9 * math::sqrt(sq(&h.private, &bar));
                if lhs <= rhs || gamma <= min_gamma {
                    step(&mut next, &h.private, &psi_bar, gamma);
                    if lhs < 0.5 * rhs {
                        gamma = (1.5 * gamma).min(opts.gamma * 1e3);
                    }
                    break;
                }
                gamma = (0.5 * gamma).max(min_gamma);
            },
        }
        let flow_change = math::sqrt(sq(&next, &h.private))
            / math::sqrt(h.private.iter().map(|x| x * x).sum::<f64>()).max(f64::MIN_POSITIVE);
        core::mem::swap(&mut h.private, &mut next);
        psi.copy_from_slice(loader.run(&h)?.psi());
        let (g, vv) = gap_from_flat(network, n, dt, &h.private, &psi);
        if opts.method == DueMethod::Projection {
            if g > gap {
                gamma = (0.5 * gamma).max(min_gamma);
            } else {
                gamma = (1.05 * gamma).min(opts.gamma);
            }
        }
        gap = g;
        v = vv;
        if opts.trace {
            trace.push(DueTraceRow {
                iteration: iterations,
                gap,
                gamma,
                flow_change,
            });
        }
        if gap < best.0 {
            best = (gap, h.private.clone(), psi.clone(), v.clone());
        }
        converged = gap <= gap_tol || flow_change <= opts.flow_tol;
    }
    let _ = v;

    let (gap, flat, psi, v) = best;
    let to_traj = |flat: &[f64]| -> Vec<Trajectory> {
        flat.chunks(n)
            .map(|c| Trajectory::from_values(*grid, c.to_vec()).expect("finite flows"))
            .collect()
    };
    let sol = DueSolution {
        h_pr_star: to_traj(&flat),
        v,
        gap,
        gap_tol,
        iterations,
        converged,
        psi: to_traj(&psi),
        trace,
    };
    if sol.converged {
        Ok(sol)
    } else {
        Err(Error::DueNotConverged(alloc::boxed::Box::new(sol)))
    }
}
