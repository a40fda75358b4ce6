//! Upper level: truck schedule optimisation through a penalised
//! complementarity reformulation.
//!
//! With `Ψ = Ψ(h_pr, h_tr)` from the loading, the augmented objective is
//!
//! ```text
//! U = Σ_p ∫ Ψ_p h_p^tr dt
//!   + M Σ_p ∫ [(Ψ_p − μ_od)·h_p^pr]² dt
//!   + M Σ_p ∫ [max(μ_od − Ψ_p, 0)]² dt
//! ```
//!
//! and is minimised by projected gradient steps over the two demand
//! simplices while the penalty weight `M` is escalated.

use alloc::vec;
use alloc::vec::Vec;

use crate::dnl::{Inflows, Loader, LoadingParams, LoadingRun};
use crate::due::{self, project_values, DueOptions, DueSolution};
use crate::math;
use crate::net::Network;
use crate::traj::{TimeGrid, Trajectory};
use crate::{Error, Result};

/// Decision vector `u = (h_pr, h_tr, μ)`.
///
/// `h_tr` has one trajectory per path; paths closed to trucks stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    pub h_pr: Vec<Trajectory>,
    pub h_tr: Vec<Trajectory>,
    pub mu: Vec<f64>,
}

impl ControlVector {
    /// `(DUE flows, h_tr, v)`.
    pub fn from_due(due: &DueSolution, h_tr: Vec<Trajectory>) -> Self {
        Self {
            h_pr: due.h_pr_star.clone(),
            h_tr,
            mu: due.v.clone(),
        }
    }

    fn grid(&self) -> Result<TimeGrid> {
        self.h_pr.first().map(|t| *t.grid()).ok_or(Error::GridMismatch)
    }

    /// `sqrt(‖h_pr‖² + ‖h_tr‖² + (tf − t0)·|μ|²)` with L2 norms over time.
    pub fn norm(&self) -> f64 {
        let span = self.grid().map(|g| g.tf() - g.t0()).unwrap_or(1.0);
        let (a, b) = (crate::traj::l2_norm(&self.h_pr), crate::traj::l2_norm(&self.h_tr));
        let flows = a * a + b * b;
        let mu: f64 = self.mu.iter().map(|m| m * m).sum();
        math::sqrt(flows + span * mu)
    }

    /// Distance in the norm of [`ControlVector::norm`].
    pub fn distance(&self, other: &ControlVector) -> Result<f64> {
        if self.mu.len() != other.mu.len() {
            return Err(Error::GridMismatch);
        }
        let g = self.grid()?;
        let a = crate::traj::l2_distance(&self.h_pr, &other.h_pr)?;
        let b = crate::traj::l2_distance(&self.h_tr, &other.h_tr)?;
        let mu: f64 = self.mu.iter().zip(&other.mu).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(math::sqrt(a * a + b * b + (g.tf() - g.t0()) * mu))
    }

    /// Largest demand-constraint violation relative to `max(1, Q)`, or the
    /// most negative flow, whichever is worse. Truck flow on a closed path
    /// counts as a violation.
    pub fn feasibility_error(&self, network: &Network) -> f64 {
        let mut worst = 0.0f64;
        for (w, od) in network.od_pairs().iter().enumerate() {
            let (mut pr, mut tr) = (0.0, 0.0);
            for p in network.paths_of(w) {
                pr += self.h_pr[p].integrate();
                tr += self.h_tr[p].integrate();
                worst = worst.max(-self.h_pr[p].min()).max(-self.h_tr[p].min());
                if !network.paths()[p].truck_allowed {
                    worst = worst.max(self.h_tr[p].max());
                }
            }
            worst = worst.max(math::abs(pr - od.demand_private) / od.demand_private.max(1.0));
            worst = worst.max(math::abs(tr - od.demand_truck) / od.demand_truck.max(1.0));
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyConfig {
    /// Initial penalty weight.
    pub m0: f64,
    /// Escalation factor applied after every outer iteration.
    pub c: f64,
    /// Largest penalty weight.
    pub m_cap: f64,
    /// First trial step.
    pub gamma0: f64,
    /// Outer stopping tolerance on `‖u^{k+1} − u^k‖`; `None` uses
    /// `1e-3·‖u⁰‖`.
    pub eps1: Option<f64>,
    pub max_outer: usize,
    /// Step halvings allowed before a step is declared failed.
    pub max_inner: usize,
    /// Accepted gradient steps per penalty weight.
    pub steps_per_penalty: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Treat `Ψ` as fixed at its value at `u⁰`.
    pub frozen_psi: bool,
    /// Re-equilibrate private flows for the current truck schedule at the
    /// end of every outer iteration, accepted only if `U` does not increase.
    pub restore: bool,
    /// Truck moves per outer iteration (see [`solve_mpcc`]); zero gives the
    /// plain penalty loop.
    pub implicit_steps: usize,
    /// Step halvings tried per truck move.
    pub implicit_trials: usize,
    /// Lower-level options used by the re-equilibration.
    pub due: DueOptions,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            m0: 1e2,
            c: 10.0,
            m_cap: 1e8,
            gamma0: 1e-6,
            eps1: None,
            max_outer: 30,
            max_inner: 40,
            steps_per_penalty: 4,
            fd_step: 1e-4,
            frozen_psi: false,
            restore: true,
            implicit_steps: 3,
            implicit_trials: 8,
            due: DueOptions::default(),
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m0 >= 0.0
            && self.c > 1.0
            && self.m_cap >= self.m0
            && self.gamma0 > 0.0
            && self.eps1.is_none_or(|e| e > 0.0)
            && self.fd_step > 0.0
            && self.max_outer > 0
            && self.steps_per_penalty > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("penalty configuration out of range".into()))
        }
    }
}

/// `Σ_p ∫ Ψ_p·h_p^tr dt`.
pub fn truck_cost(h_tr: &[Trajectory], psi: &[Trajectory]) -> Result<f64> {
    if h_tr.len() != psi.len() {
        return Err(Error::GridMismatch);
    }
    h_tr.iter().zip(psi).map(|(h, p)| h.dot(p)).sum()
}

/// Partial derivatives of `U` with respect to the discretised controls.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub f1: Vec<Trajectory>,
    pub f2: Vec<Trajectory>,
    pub f3: Vec<f64>,
}

/// Kind of an accepted move in the iteration trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Starting point.
    Start,
    /// Exact multiplier update for fixed flows.
    Refit,
    /// Projected gradient step.
    Gradient,
    /// Private flows re-equilibrated for the current truck schedule.
    Restore,
    /// Truck step followed by re-equilibration.
    TruckMove,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Start => "start",
            StepKind::Refit => "refit",
            StepKind::Gradient => "gradient",
            StepKind::Restore => "restore",
            StepKind::TruckMove => "truck_move",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpccTraceRow {
    pub outer: usize,
    pub m: f64,
    pub inner: usize,
    pub gamma: f64,
    pub objective: f64,
    pub truck_cost: f64,
    pub comp_residual: f64,
    /// Distance moved by this step.
    pub step_norm: f64,
    pub kind: StepKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpccReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub gradient_evaluations: usize,
    pub loadings: usize,
    pub eps1: f64,
    pub final_m: f64,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub initial_truck_cost: f64,
    pub final_truck_cost: f64,
    pub final_objective: f64,
    /// `‖u^{k+1} − u^k‖` of the last outer iteration.
    pub last_outer_step: f64,
    pub trace: Vec<MpccTraceRow>,
}

/// Flat working copy of a control vector.
#[derive(Clone)]
struct Point {
    h: Inflows,
    mu: Vec<f64>,
}

struct Eval {
    psi: Vec<f64>,
    run: Option<LoadingRun>,
    truck: f64,
    resid: f64,
}

impl Eval {
    fn objective(&self, m: f64) -> f64 {
        self.truck + m * self.resid
    }
}

struct Problem<'a> {
    network: &'a Network,
    grid: TimeGrid,
    loader: Loader<'a>,
    n: usize,
    dt: f64,
    od_of_path: Vec<usize>,
    frozen: Option<Vec<f64>>,
    loadings: usize,
}

impl<'a> Problem<'a> {
    fn new(network: &'a Network, grid: &TimeGrid, params: &LoadingParams) -> Result<Self> {
        let mut od_of_path = vec![0; network.paths().len()];
        for w in 0..network.od_pairs().len() {
            for p in network.paths_of(w) {
                od_of_path[p] = w;
            }
        }
        Ok(Self {
            network,
            grid: *grid,
            loader: Loader::new(network, *grid, params)?,
            n: grid.n_intervals(),
            dt: grid.dt(),
            od_of_path,
            frozen: None,
            loadings: 0,
        })
    }

    fn to_point(&self, u: &ControlVector) -> Result<Point> {
        if u.mu.len() != self.network.od_pairs().len()
            || u.h_pr.len() != self.network.paths().len()
            || u.h_tr.len() != self.network.paths().len()
        {
            return Err(Error::GridMismatch);
        }
        Ok(Point {
            h: Inflows::from_trajectories(&u.h_pr, &u.h_tr, &self.grid)?,
            mu: u.mu.clone(),
        })
    }

    fn to_control(&self, pt: &Point) -> ControlVector {
        let tr = |flat: &[f64]| -> Vec<Trajectory> {
            flat.chunks(self.n)
                .map(|c| Trajectory::from_values(self.grid, c.to_vec()).expect("finite flows"))
                .collect()
        };
        ControlVector {
            h_pr: tr(&pt.h.private),
            h_tr: tr(&pt.h.truck),
            mu: pt.mu.clone(),
        }
    }

    fn project(&self, h: &mut Inflows) {
        let n = self.n;
        let mut buf = Vec::new();
        for (w, od) in self.network.od_pairs().iter().enumerate() {
            let r = self.network.paths_of(w);
            project_values(&mut h.private[r.start * n..r.end * n], self.dt, od.demand_private);
            buf.clear();
            for p in r.clone() {
                if self.network.paths()[p].truck_allowed {
                    buf.extend_from_slice(&h.truck[p * n..(p + 1) * n]);
                }
            }
            project_values(&mut buf, self.dt, od.demand_truck);
            let mut it = buf.chunks(n);
            for p in r {
                let dst = &mut h.truck[p * n..(p + 1) * n];
                if self.network.paths()[p].truck_allowed {
                    dst.copy_from_slice(it.next().expect("allowed path block"));
                } else {
                    dst.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    fn evaluate(&mut self, pt: &Point) -> Result<Eval> {
        let (psi, run) = match &self.frozen {
            Some(psi) => (psi.clone(), None),
            None => {
                self.loadings += 1;
                let run = self.loader.run(&pt.h)?;
                (run.psi().to_vec(), Some(run))
            }
        };
        let (truck, resid) = self.parts(pt, &psi);
        Ok(Eval { psi, run, truck, resid })
    }

    fn parts(&self, pt: &Point, psi: &[f64]) -> (f64, f64) {
        let (mut truck, mut resid) = (0.0, 0.0);
        for (i, &ps) in psi.iter().enumerate() {
            let mu = pt.mu[self.od_of_path[i / self.n]];
            truck += ps * pt.h.truck[i];
            let e = (ps - mu) * pt.h.private[i];
            let f = (mu - ps).max(0.0);
            resid += e * e + f * f;
        }
        (truck * self.dt, resid * self.dt)
    }

    /// Multipliers minimising the residual for fixed flows and `Ψ`.
    fn refit_mu(&self, h_pr: &[f64], psi: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.network.od_pairs().len());
        let mut sorted = Vec::new();
        for w in 0..self.network.od_pairs().len() {
            let r = self.network.paths_of(w);
            let cells = r.start * n..r.end * n;
            let (mut a, mut b) = (0.0, 0.0);
            for i in cells.clone() {
                let h2 = h_pr[i] * h_pr[i];
                a += h2;
                b += h2 * psi[i];
            }
            sorted.clear();
            sorted.extend_from_slice(&psi[cells]);
            sorted.sort_unstable_by(|x, y| x.total_cmp(y));
            out.push(minimise_piecewise(a, b, &sorted));
        }
        out
    }

    fn weights(&self, pt: &Point, psi: &[f64], m: f64) -> Vec<f64> {
        psi.iter()
            .enumerate()
            .map(|(i, &ps)| {
                let mu = pt.mu[self.od_of_path[i / self.n]];
                let hp = pt.h.private[i];
                self.dt * (pt.h.truck[i] + 2.0 * m * (ps - mu) * hp * hp - 2.0 * m * (mu - ps).max(0.0))
            })
            .collect()
    }

    /// Flat gradient `(F1, F2, F3)` at `pt` with loading `ev`.
    fn gradient(&mut self, pt: &Point, ev: &Eval, m: f64, fd_step: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let dt = self.dt;
        let psi = &ev.psi;
        let mut f1 = vec![0.0; psi.len()];
        let mut f2 = vec![0.0; psi.len()];
        let mut f3 = vec![0.0; pt.mu.len()];
        for (i, &ps) in psi.iter().enumerate() {
            let w = self.od_of_path[i / n];
            let mu = pt.mu[w];
            let hp = pt.h.private[i];
            f1[i] = 2.0 * m * dt * (ps - mu) * (ps - mu) * hp;
            f2[i] = dt * ps;
            f3[w] += dt * (-2.0 * m * (ps - mu) * hp * hp + 2.0 * m * (mu - ps).max(0.0));
        }
        let weights = self.weights(pt, psi, m);
        self.add_sensitivity(pt, ev, &weights, [true, true], fd_step, &mut f1, &mut f2)?;
        Ok((f1, f2, f3))
    }

    /// Adds `Σ_i weights_i·∂Ψ_i/∂h` (forward differences) to `f1`/`f2` for
    /// the selected classes. No-op under frozen `Ψ`.
    #[allow(clippy::too_many_arguments)]
    fn add_sensitivity(
        &mut self,
        pt: &Point,
        ev: &Eval,
        weights: &[f64],
        classes: [bool; 2],
        fd_step: f64,
        f1: &mut [f64],
        f2: &mut [f64],
    ) -> Result<()> {
        let Some(base) = ev.run.as_ref() else {
            return Ok(());
        };
        let n = self.n;
        let dt = self.dt;
        let psi = &ev.psi;
        let last_exit: Vec<f64> = (0..psi.len())
            .map(|i| self.loader.departure_time(i % n) + base.path_delay()[i])
            .collect();
        let weighted: Vec<usize> = (0..psi.len()).filter(|&i| weights[i] != 0.0).collect();
        if weighted.is_empty() {
            return Ok(());
        }
        let horizon = weighted.iter().map(|&i| last_exit[i]).fold(f64::NEG_INFINITY, f64::max);
        let until = (math::floor((horizon - self.grid.t0()) / dt) as usize).saturating_add(3);
        let mut h = pt.h.clone();
        let mut arc_volume = vec![0.0; base.arc_volume.len()];
        let mut psi_new = psi.clone();
        let mut cells = Vec::with_capacity(weighted.len());
        for w in 0..self.network.od_pairs().len() {
            let od = &self.network.od_pairs()[w];
            for p in self.network.paths_of(w) {
                let truck_ok = self.network.paths()[p].truck_allowed && od.demand_truck > 0.0;
                for (class, active) in [(0, classes[0] && od.demand_private > 0.0), (1, classes[1] && truck_ok)] {
                    if !active {
                        continue;
                    }
                    for k in 0..n {
                        let t_from = self.grid.time(k);
                        if t_from >= horizon {
                            break;
                        }
                        cells.clear();
                        cells.extend(weighted.iter().copied().filter(|&i| last_exit[i] > t_from));
                        if cells.is_empty() {
                            continue;
                        }
                        let idx = p * n + k;
                        let vals = if class == 0 { &mut h.private } else { &mut h.truck };
                        let orig = vals[idx];
                        let eps = fd_step * orig.abs().max(1.0);
                        vals[idx] = orig + eps;
                        let res = self.loader.rerun_cells(base, &h, k, until, &cells, &mut arc_volume, &mut psi_new);
                        let vals = if class == 0 { &mut h.private } else { &mut h.truck };
                        vals[idx] = orig;
                        res?;
                        self.loadings += 1;
                        let du: f64 = cells.iter().map(|&i| weights[i] * (psi_new[i] - psi[i])).sum();
                        let g = du / eps;
                        if class == 0 {
                            f1[idx] += g;
                        } else {
                            f2[idx] += g;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Private flows re-equilibrated for the truck schedule of `pt`, with
    /// `μ` refitted.
    fn restored(&mut self, pt: &Point, due_opts: &DueOptions) -> Result<(Point, Eval)> {
        let cur = self.to_control(pt);
        let sol = match due::solve_due_from(&cur.h_pr, &cur.h_tr, self.network, &self.grid, self.loader.params(), due_opts)
        {
            Ok(s) => s,
            Err(Error::DueNotConverged(best)) => *best,
            Err(e) => return Err(e),
        };
        self.loadings += sol.iterations;
        let mut cand = pt.clone();
        for (p, t) in sol.h_pr_star.iter().enumerate() {
            cand.h.private[p * self.n..(p + 1) * self.n].copy_from_slice(t.values());
        }
        let mut cev = self.evaluate(&cand)?;
        self.refit(&mut cand, &mut cev);
        Ok((cand, cev))
    }

    /// One accepted truck move, or `None` when no trial step lowers the
    /// re-equilibrated truck cost.
    fn truck_move(
        &mut self,
        pt: &Point,
        ev: &Eval,
        gamma: &mut Option<f64>,
        cfg: &PenaltyConfig,
    ) -> Result<Option<(Point, Eval, f64)>> {
        let dt = self.dt;
        let weights: Vec<f64> = pt.h.truck.iter().map(|h| dt * h).collect();
        let mut f2: Vec<f64> = ev.psi.iter().map(|p| dt * p).collect();
        let mut unused = vec![0.0; f2.len()];
        self.add_sensitivity(pt, ev, &weights, [false, true], cfg.fd_step, &mut unused, &mut f2)?;
        let g = (vec![0.0; f2.len()], f2, vec![0.0; pt.mu.len()]);
        let mut trial = match *gamma {
            Some(t) => t,
            None => {
                let peak = pt.h.truck.iter().fold(0.0f64, |a, &b| a.max(b));
                let (lo, hi) = g.1.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                if !(peak > 0.0) || !(hi > lo) {
                    return Ok(None);
                }
                peak / (hi - lo)
            }
        };
        let mut best: Option<(Point, Eval, f64)> = None;
        for _ in 0..cfg.implicit_trials {
            let mut cand = self.step(pt, &g, trial);
            cand.mu.copy_from_slice(&pt.mu);
            let (cand, cev) = self.restored(&cand, &cfg.due)?;
            let bar = best.as_ref().map_or(ev.truck, |b| b.1.truck);
            if cev.truck < bar {
                best = Some((cand, cev, trial));
                trial *= 2.0;
            } else if best.is_some() {
                break;
            } else {
                trial *= 0.5;
            }
        }
        *gamma = Some(best.as_ref().map_or(trial, |b| b.2));
        Ok(best)
    }

    fn refit(&self, pt: &mut Point, ev: &mut Eval) -> f64 {
        let mu = self.refit_mu(&pt.h.private, &ev.psi);
        let old = Point {
            h: pt.h.clone(),
            mu: core::mem::replace(&mut pt.mu, mu),
        };
        let (truck, resid) = self.parts(pt, &ev.psi);
        ev.truck = truck;
        ev.resid = resid;
        self.distance(&old, pt)
    }

    fn step(&self, pt: &Point, g: &(Vec<f64>, Vec<f64>, Vec<f64>), gamma: f64) -> Point {
        let mut h = pt.h.clone();
        for (v, d) in h.private.iter_mut().zip(&g.0) {
            *v -= gamma * d;
        }
        for (v, d) in h.truck.iter_mut().zip(&g.1) {
            *v -= gamma * d;
        }
        self.project(&mut h);
        Point {
            h,
            mu: pt.mu.iter().zip(&g.2).map(|(m, d)| m - gamma * d).collect(),
        }
    }

    fn distance(&self, a: &Point, b: &Point) -> f64 {
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        let span = self.grid.tf() - self.grid.t0();
        math::sqrt(
            self.dt * (sq(&a.h.private, &b.h.private) + sq(&a.h.truck, &b.h.truck)) + span * sq(&a.mu, &b.mu),
        )
    }
}

/// Minimiser of `Σ h²(Ψ − μ)² + Σ max(μ − Ψ, 0)²` over `μ`, given
/// `a = Σ h²`, `b = Σ h²Ψ` and the `Ψ` values sorted ascending.
fn minimise_piecewise(a: f64, b: f64, sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return if a > 0.0 { b / a } else { 0.0 };
    }
    let mut prefix = 0.0;
    for m in 0..=sorted.len() {
        let hi = sorted.get(m).copied().unwrap_or(f64::INFINITY);
        let denom = a + m as f64;
        if denom == 0.0 {
            return hi;
        }
        let mu = (b + prefix) / denom;
        if mu <= hi {
            let lo = if m == 0 { f64::NEG_INFINITY } else { sorted[m - 1] };
            return mu.max(lo);
        }
        prefix += sorted[m];
    }
    unreachable!("the last segment is unbounded above")
}

/// `U(u; M)`.
pub fn augmented_objective(
    u: &ControlVector,
    m: f64,
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
) -> Result<f64> {
    let mut prob = Problem::new(network, grid, params)?;
    let pt = prob.to_point(u)?;
    Ok(prob.evaluate(&pt)?.objective(m))
}

/// Unweighted sum of the two penalty integrals.
pub fn complementarity_residual(
    u: &ControlVector,
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
) -> Result<f64> {
    let mut prob = Problem::new(network, grid, params)?;
    let pt = prob.to_point(u)?;
    Ok(prob.evaluate(&pt)?.resid)
}

/// `(F1, F2, F3)` at `u`. Explicit dependence is differentiated exactly; the
/// dependence through `Ψ` uses forward differences of the loading with step
/// `fd_step·max(1, |value|)`, or is dropped when `cfg.frozen_psi` is set.
pub fn gradient(
    u: &ControlVector,
    m: f64,
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    cfg: &PenaltyConfig,
) -> Result<Gradient> {
    let mut prob = Problem::new(network, grid, params)?;
    let pt = prob.to_point(u)?;
    if cfg.frozen_psi {
        let psi = prob.evaluate(&pt)?.psi;
        prob.frozen = Some(psi);
    }
    let ev = prob.evaluate(&pt)?;
    let g = prob.gradient(&pt, &ev, m, cfg.fd_step)?;
    let tr = |flat: &[f64]| -> Vec<Trajectory> {
        flat.chunks(grid.n_intervals())
            .map(|c| Trajectory::from_values(*grid, c.to_vec()).expect("finite gradient"))
            .collect()
    };
    Ok(Gradient {
        f1: tr(&g.0),
        f2: tr(&g.1),
        f3: g.2,
    })
}

/// Minimiser of the step subproblem: projection of `u − γ·F` onto the
/// feasible set (demand simplices for both classes, trucks restricted to
/// allowed paths, `μ` free).
pub fn projected_step(u: &ControlVector, g: &Gradient, gamma: f64, network: &Network) -> Result<ControlVector> {
    let grid = u.grid()?;
    let n = grid.n_intervals();
    let mut h = Inflows::from_trajectories(&u.h_pr, &u.h_tr, &grid)?;
    let gf = Inflows::from_trajectories(&g.f1, &g.f2, &grid)?;
    if g.f3.len() != u.mu.len() {
        return Err(Error::GridMismatch);
    }
    for (v, d) in h.private.iter_mut().zip(&gf.private) {
        *v -= gamma * d;
    }
    for (v, d) in h.truck.iter_mut().zip(&gf.truck) {
        *v -= gamma * d;
    }
    let mut buf = Vec::new();
    for (w, od) in network.od_pairs().iter().enumerate() {
        let r = network.paths_of(w);
        project_values(&mut h.private[r.start * n..r.end * n], grid.dt(), od.demand_private);
        buf.clear();
        for p in r.clone() {
            if network.paths()[p].truck_allowed {
                buf.extend_from_slice(&h.truck[p * n..(p + 1) * n]);
            }
        }
        project_values(&mut buf, grid.dt(), od.demand_truck);
        let mut it = buf.chunks(n);
        for p in r {
            let dst = &mut h.truck[p * n..(p + 1) * n];
            if network.paths()[p].truck_allowed {
                dst.copy_from_slice(it.next().expect("allowed path block"));
            } else {
                dst.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let tr = |flat: &[f64]| -> Vec<Trajectory> {
        flat.chunks(n)
            .map(|c| Trajectory::from_values(grid, c.to_vec()).expect("finite flows"))
            .collect()
    };
    Ok(ControlVector {
        h_pr: tr(&h.private),
        h_tr: tr(&h.truck),
        mu: u.mu.iter().zip(&g.f3).map(|(m, d)| m - gamma * d).collect(),
    })
}

/// Optimum of the truck problem with `Ψ` held fixed: for each OD pair all
/// truck demand goes to the truck-allowed (path, cell) with the smallest
/// `Ψ`, split uniformly over exact ties.
pub fn frozen_truck_schedule(psi: &[Trajectory], network: &Network) -> Result<Vec<Trajectory>> {
    if psi.len() != network.paths().len() {
        return Err(Error::GridMismatch);
    }
    let Some(grid) = psi.first().map(|t| *t.grid()) else {
        return Ok(Vec::new());
    };
    let mut out = vec![Trajectory::zeros(grid); psi.len()];
    for (w, od) in network.od_pairs().iter().enumerate() {
        if od.demand_truck <= 0.0 {
            continue;
        }
        let allowed: Vec<usize> = network.paths_of(w).filter(|&p| network.paths()[p].truck_allowed).collect();
        let best = allowed
            .iter()
            .flat_map(|&p| psi[p].values().iter().copied())
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!(
                "OD pair {}->{} has truck demand but no truck path",
                od.origin,
                od.destination
            )));
        }
        let ties: Vec<(usize, usize)> = allowed
            .iter()
            .flat_map(|&p| {
                psi[p]
                    .values()
                    .iter()
                    .enumerate()
                    .filter(move |(_, v)| **v == best)
                    .map(move |(k, _)| (p, k))
            })
            .collect();
        let rate = od.demand_truck / (ties.len() as f64 * grid.dt());
        for (p, k) in ties {
            out[p].values_mut()[k] = rate;
        }
    }
    Ok(out)
}

/// Starting point: private equilibrium without trucks, the frozen-`Ψ` truck
/// schedule on that equilibrium, and `μ = v`.
///
/// A non-converged equilibrium is used as is (its best iterate).
pub fn initial_control(
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    opts: &DueOptions,
) -> Result<(ControlVector, DueSolution)> {
    let zero = vec![Trajectory::zeros(*grid); network.paths().len()];
    let due = match due::solve_due(&zero, network, grid, params, opts) {
        Ok(s) => s,
        Err(e) => e.into_best_due()?,
    };
    let h_tr = frozen_truck_schedule(&due.psi, network)?;
    Ok((ControlVector::from_due(&due, h_tr), due))
}

/// Penalty loop with projected gradient steps.
///
/// Each outer iteration takes up to `steps_per_penalty` accepted projected
/// gradient steps at the current `M` (Barzilai–Borwein trial steps, halved
/// until `U` does not increase) and refits `μ` exactly after every step.
/// Unless `Ψ` is frozen it then re-equilibrates private flows and takes up
/// to `implicit_steps` truck moves: a projected step on the truck cost with
/// private flows held, followed by re-equilibration, kept only if the truck
/// cost under the new equilibrium drops. Finally `M` is multiplied by `C`
/// (up to `m_cap`). The loop stops once an outer iteration moves `u` by at
/// most `ε₁`; otherwise `converged = false` with the last iterate returned.
pub fn solve_mpcc(
    u0: &ControlVector,
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
    cfg: &PenaltyConfig,
) -> Result<(ControlVector, MpccReport)> {
    cfg.validate()?;
    let mut prob = Problem::new(network, grid, params)?;
    let mut pt = prob.to_point(u0)?;
    if cfg.frozen_psi {
        let psi = prob.evaluate(&pt)?.psi;
        prob.frozen = Some(psi);
    }
    let eps1 = cfg.eps1.unwrap_or(1e-3 * u0.norm());
    let mut m = cfg.m0;
    let mut ev = prob.evaluate(&pt)?;
    let initial_residual = ev.resid;
    let initial_truck_cost = ev.truck;
    let mut trace = Vec::new();
    let row = |outer, m, inner, gamma, ev: &Eval, step_norm, kind| MpccTraceRow {
        outer,
        m,
        inner,
        gamma,
        objective: ev.objective(m),
        truck_cost: ev.truck,
        comp_residual: ev.resid,
        step_norm,
        kind,
    };
    trace.push(row(0, m, 0, 0.0, &ev, 0.0, StepKind::Start));
    let d = prob.refit(&mut pt, &mut ev);
    trace.push(row(0, m, 0, 0.0, &ev, d, StepKind::Refit));

    let mut gamma = cfg.gamma0;
    let mut truck_gamma = None;
    let mut gradients = 0;
    let mut converged = false;
    let mut outer = 0;
    let mut last_outer_step = f64::INFINITY;
    let flat_len = pt.h.private.len();
    while outer < cfg.max_outer {
        outer += 1;
        let start = pt.clone();
        let mut memory: Option<(Vec<f64>, Vec<f64>)> = None;
        for inner in 1..=cfg.steps_per_penalty {
            let g = prob.gradient(&pt, &ev, m, cfg.fd_step)?;
            gradients += 1;
            let flat_g: Vec<f64> = g.0.iter().chain(&g.1).copied().collect();
            let flat_x: Vec<f64> = pt.h.private.iter().chain(&pt.h.truck).copied().collect();
            if let Some((x_prev, g_prev)) = &memory {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..2 * flat_len {
                    let s = flat_x[i] - x_prev[i];
                    let y = flat_g[i] - g_prev[i];
                    ss += s * s;
                    sy += s * y;
                }
                gamma = if sy > 0.0 && ss > 0.0 { ss / sy } else { 4.0 * gamma };
            }
            gamma = gamma.clamp(1e-14, 1e14);
            memory = Some((flat_x, flat_g));

            let u_cur = ev.objective(m);
            let mut accepted = None;
            let mut trial = gamma;
            for halving in 0..=cfg.max_inner {
                let mut cand = prob.step(&pt, &g, trial);
                let mut cev = prob.evaluate(&cand)?;
                prob.refit(&mut cand, &mut cev);
                if cev.objective(m) <= u_cur {
                    accepted = Some((cand, cev, halving));
                    break;
                }
                trial *= 0.5;
            }
            let Some((cand, cev, halvings)) = accepted else {
                break;
            };
            let step = prob.distance(&pt, &cand);
            pt = cand;
            ev = cev;
            trace.push(row(outer, m, inner, trial, &ev, step, StepKind::Gradient));
            gamma = if halvings == 0 { 4.0 * trial } else { trial };
            if step == 0.0 {
                break;
            }
        }

        if prob.frozen.is_none() {
            let mut restored = None;
            if cfg.restore || cfg.implicit_steps > 0 {
                let (cand, cev) = prob.restored(&pt, &cfg.due)?;
                if cfg.restore && cev.objective(m) <= ev.objective(m) {
                    let step = prob.distance(&pt, &cand);
                    pt = cand;
                    ev = cev;
                    trace.push(row(outer, m, 0, 0.0, &ev, step, StepKind::Restore));
                } else {
                    restored = Some((cand, cev));
                }
            }
            let (mut base, mut base_ev) = match restored {
                Some(r) => r,
                None => (pt.clone(), prob.evaluate(&pt)?),
            };
            let mut moved = false;
            for inner in 1..=cfg.implicit_steps {
                let Some((cand, cev, trial)) = prob.truck_move(&base, &base_ev, &mut truck_gamma, cfg)? else {
                    break;
                };
                let step = prob.distance(if moved { &base } else { &pt }, &cand);
                base = cand;
                base_ev = cev;
                moved = true;
                trace.push(row(outer, m, inner, trial, &base_ev, step, StepKind::TruckMove));
            }
            if moved {
                pt = base;
                ev = base_ev;
            }
        }

        last_outer_step = prob.distance(&start, &pt);
        if last_outer_step <= eps1 {
            converged = true;
            break;
        }
        m = (m * cfg.c).min(cfg.m_cap);
    }

    let report = MpccReport {
        converged,
        outer_iterations: outer,
        gradient_evaluations: gradients,
        loadings: prob.loadings,
        eps1,
        final_m: m,
        initial_residual,
        final_residual: ev.resid,
        initial_truck_cost,
        final_truck_cost: ev.truck,
        final_objective: ev.objective(m),
        last_outer_step,
        trace,
    };
    Ok((prob.to_control(&pt), report))
}
