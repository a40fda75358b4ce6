//! Two-class dynamic network loading on a link delay model.
//!
//! Every (path, arc position, class) carries a volume `x`, an exit flow `g`
//! and its time derivative `r`. Volumes follow the arc dynamics
//! `ẋ = inflow − g`; exit flows follow the second-order approximation of the
//! flow propagation constraints
//!
//! ```text
//! ṙ = 2·u / (D² · (1 + D'·ẋ_a)) − 2·(g + r·D) / D²
//! ```
//!
//! where `u` is the position's inflow, `D = A + B·(x_pr + β·x_tr)` is the
//! arc delay at the current arc volume and `ẋ_a` is the class-weighted net
//! inflow of the whole arc. The system is integrated with classical RK4 on
//! the decision grid (with integer substeps), then exit times are chained
//! along each path to produce path delays `D_p(t)` and effective delays
//! `Ψ_p(t) = D_p + α·(t + D_p − T_A)²`.
//!
//! Arc volumes are stored at grid nodes and read between nodes by linear
//! interpolation. The per-cell values of `τ`, `D_p` and `Ψ_p` are evaluated
//! at the cell midpoint, so departures of a cell see half of their own
//! cell's inflow.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::math;
use crate::net::{Arc, Network};
use crate::traj::{TimeGrid, Trajectory};
use crate::{Error, Result};

/// Vehicle class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Private,
    Truck,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Private, Class::Truck];

    pub fn as_str(&self) -> &'static str {
        match self {
            Class::Private => "pr",
            Class::Truck => "tr",
        }
    }

    fn slot(self) -> usize {
        match self {
            Class::Private => 0,
            Class::Truck => 1,
        }
    }
}

/// Numerical controls of the loading integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorOptions {
    /// RK4 steps per grid interval.
    pub substeps: usize,
    /// Smallest magnitude allowed for `1 + D'·ẋ`.
    pub den_floor: f64,
    /// Any state entry above this magnitude aborts the loading.
    pub magnitude_bound: f64,
    /// Extra zero-inflow intervals integrated past `tf`.
    pub slack_intervals: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            substeps: 2,
            den_floor: 1e-6,
            magnitude_bound: 1e9,
            slack_intervals: 0,
        }
    }
}

/// Initial per-position volumes, indexed like [`Layout`] positions.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialVolumes {
    pub private: Vec<f64>,
    pub truck: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadingParams {
    /// Truck equivalence factor `β ≥ 1`.
    pub beta: f64,
    /// Weight `α ≥ 0` of the quadratic early/late arrival penalty.
    pub alpha: f64,
    /// Desired arrival time `T_A`.
    pub desired_arrival: f64,
    /// `None` means the network starts empty.
    pub initial_volumes: Option<InitialVolumes>,
    pub integrator: IntegratorOptions,
}

impl LoadingParams {
    /// β = 1, α = 0.5, T_A = 160, empty start.
    pub fn benchmark() -> Self {
        Self {
            beta: 1.0,
            alpha: 0.5,
            desired_arrival: 160.0,
            initial_volumes: None,
            integrator: IntegratorOptions::default(),
        }
    }

    pub fn validate(&self, grid: &TimeGrid, layout: &Layout) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidParameter(m));
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return bad(alloc::format!("beta must be >= 1, got {}", self.beta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(alloc::format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.desired_arrival >= grid.t0() && self.desired_arrival <= grid.tf()) {
            return bad(alloc::format!(
                "desired arrival {} outside [{}, {}]",
                self.desired_arrival,
                grid.t0(),
                grid.tf()
            ));
        }
        let io = &self.integrator;
        if io.substeps == 0 {
            return bad("substeps must be >= 1".into());
        }
        if !(io.den_floor > 0.0) || !(io.magnitude_bound > 0.0) {
            return bad("den_floor and magnitude_bound must be positive".into());
        }
        if let Some(init) = &self.initial_volumes {
            let n = layout.n_positions();
            if init.private.len() != n || init.truck.len() != n {
                return bad(alloc::format!("initial volumes need {n} entries per class"));
            }
            if init.private.iter().chain(&init.truck).any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad("initial volumes must be finite and nonnegative".into());
            }
        }
        Ok(())
    }
}

/// `A + B·(x_pr + β·x_tr)`.
pub fn arc_delay(arc: &Arc, x_pr: f64, x_tr: f64, beta: f64) -> f64 {
    arc.delay(x_pr + beta * x_tr)
}

/// `D_p + α·(t + D_p − T_A)²`.
pub fn effective_delay(path_delay: f64, t: f64, params: &LoadingParams) -> f64 {
    let dev = t + path_delay - params.desired_arrival;
    path_delay + params.alpha * dev * dev
}

/// Flattened (path, arc position) index used by all state vectors.
#[derive(Clone, Debug)]
pub struct Layout {
    pos_arc: Vec<usize>,
    path_pos: Vec<Range<usize>>,
    arc_a: Vec<f64>,
    arc_b: Vec<f64>,
}

impl Layout {
    pub fn new(network: &Network) -> Self {
        let mut pos_arc = Vec::new();
        let mut path_pos = Vec::with_capacity(network.paths().len());
        for p in network.paths() {
            let start = pos_arc.len();
            for a in &p.arcs {
                pos_arc.push(network.arc_index(*a).expect("path arcs are validated"));
            }
            path_pos.push(start..pos_arc.len());
        }
        Self {
            pos_arc,
            path_pos,
            arc_a: network.arcs().iter().map(|a| a.delay_intercept).collect(),
            arc_b: network.arcs().iter().map(|a| a.delay_slope).collect(),
        }
    }

    pub fn n_positions(&self) -> usize {
        self.pos_arc.len()
    }

    pub fn n_paths(&self) -> usize {
        self.path_pos.len()
    }

    pub fn n_arcs(&self) -> usize {
        self.arc_a.len()
    }

    /// Flat positions of path `p`, in traversal order.
    pub fn positions(&self, p: usize) -> Range<usize> {
        self.path_pos[p].clone()
    }

    /// Arc index (into [`Network::arcs`]) of a flat position.
    pub fn arc_of(&self, pos: usize) -> usize {
        self.pos_arc[pos]
    }

    /// State vector length: `x, g, r` per position and class plus one
    /// cumulative-exit counter per path and class.
    fn state_len(&self) -> usize {
        6 * self.n_positions() + 2 * self.n_paths()
    }
}

/// Per-class states `x`, `g`, `r`, indexed by flat position.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassState {
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub r: Vec<f64>,
}

impl ClassState {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            g: vec![0.0; n],
            r: vec![0.0; n],
        }
    }
}

/// Instantaneous loading state, or its time derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadingState {
    pub private: ClassState,
    pub truck: ClassState,
}

impl LoadingState {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            private: ClassState::zeros(layout.n_positions()),
            truck: ClassState::zeros(layout.n_positions()),
        }
    }

    pub fn class(&self, c: Class) -> &ClassState {
        match c {
            Class::Private => &self.private,
            Class::Truck => &self.truck,
        }
    }

    pub fn class_mut(&mut self, c: Class) -> &mut ClassState {
        match c {
            Class::Private => &mut self.private,
            Class::Truck => &mut self.truck,
        }
    }
}

/// Offsets into the packed state vector.
#[derive(Clone, Copy)]
struct Packing {
    np: usize,
    npaths: usize,
}

impl Packing {
    #[inline]
    fn x(&self, c: usize) -> usize {
        3 * c * self.np
    }
    #[inline]
    fn g(&self, c: usize) -> usize {
        (3 * c + 1) * self.np
    }
    #[inline]
    fn r(&self, c: usize) -> usize {
        (3 * c + 2) * self.np
    }
    #[inline]
    fn e(&self, c: usize) -> usize {
        6 * self.np + c * self.npaths
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LoadingDiagnostics {
    /// Negative volumes reset to zero after an integration step.
    pub clamp_count: u64,
    /// Right-hand-side evaluations where `|1 + D'·ẋ|` hit the floor.
    pub den_floor_count: u64,
    /// Largest `|∫h + x(t0) − exits − x(end)|` over paths and classes.
    pub max_conservation_residual: f64,
}

/// Departure rates per class, flattened `path * n_cells + cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct Inflows {
    pub private: Vec<f64>,
    pub truck: Vec<f64>,
    n_cells: usize,
}

impl Inflows {
    pub fn zeros(n_paths: usize, n_cells: usize) -> Self {
        Self {
            private: vec![0.0; n_paths * n_cells],
            truck: vec![0.0; n_paths * n_cells],
            n_cells,
        }
    }

    pub fn from_trajectories(h_pr: &[Trajectory], h_tr: &[Trajectory], grid: &TimeGrid) -> Result<Self> {
        if h_pr.len() != h_tr.len() {
            return Err(Error::GridMismatch);
        }
        let n = grid.n_intervals();
        let mut out = Self::zeros(h_pr.len(), n);
        for (p, (a, b)) in h_pr.iter().zip(h_tr).enumerate() {
            if !a.grid().same_as(grid) || !b.grid().same_as(grid) {
                return Err(Error::GridMismatch);
            }
            out.private[p * n..(p + 1) * n].copy_from_slice(a.values());
            out.truck[p * n..(p + 1) * n].copy_from_slice(b.values());
        }
        Ok(out)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn class(&self, c: Class) -> &[f64] {
        match c {
            Class::Private => &self.private,
            Class::Truck => &self.truck,
        }
    }

    pub fn class_mut(&mut self, c: Class) -> &mut [f64] {
        match c {
            Class::Private => &mut self.private,
            Class::Truck => &mut self.truck,
        }
    }

    fn value(&self, c: usize, p: usize, k: usize) -> f64 {
        if k >= self.n_cells {
            return 0.0;
        }
        let v = if c == 0 { &self.private } else { &self.truck };
        v[p * self.n_cells + k]
    }
}

/// Derivative of the loading state at one instant.
///
/// `h_pr[p]`, `h_tr[p]` are the departure rates of path `p` at that instant.
pub fn loading_rhs(
    network: &Network,
    state: &LoadingState,
    h_pr: &[f64],
    h_tr: &[f64],
    params: &LoadingParams,
) -> Result<LoadingState> {
    let layout = Layout::new(network);
    let np = layout.n_positions();
    if h_pr.len() != layout.n_paths()
        || h_tr.len() != layout.n_paths()
        || state.private.x.len() != np
        || state.truck.x.len() != np
    {
        return Err(Error::GridMismatch);
    }
    let pk = Packing {
        np,
        npaths: layout.n_paths(),
    };
    let mut y = vec![0.0; layout.state_len()];
    for c in Class::ALL {
        let s = state.class(c);
        let i = c.slot();
        y[pk.x(i)..pk.x(i) + np].copy_from_slice(&s.x);
        y[pk.g(i)..pk.g(i) + np].copy_from_slice(&s.g);
        y[pk.r(i)..pk.r(i) + np].copy_from_slice(&s.r);
    }
    let mut dy = vec![0.0; y.len()];
    let mut ws = RhsWorkspace::new(&layout);
    let active = [vec![true; layout.n_paths()], vec![true; layout.n_paths()]];
    let inflow = |c: usize, p: usize| if c == 0 { h_pr[p] } else { h_tr[p] };
    rhs(&layout, params, &y, &inflow, &active, &mut dy, &mut ws);
    if let Some((arc, delay)) = ws.nonpositive_delay {
        return Err(Error::NonPositiveDelay { arc, delay });
    }
    let mut out = LoadingState::zeros(&layout);
    for c in Class::ALL {
        let i = c.slot();
        let s = out.class_mut(c);
        s.x.copy_from_slice(&dy[pk.x(i)..pk.x(i) + np]);
        s.g.copy_from_slice(&dy[pk.g(i)..pk.g(i) + np]);
        s.r.copy_from_slice(&dy[pk.r(i)..pk.r(i) + np]);
    }
    Ok(out)
}

/// Partial derivatives of `ṙ` at one position with respect to that
/// position's own `x`, `g` and `r` (same class).
///
/// With a linear delay (`D'' = 0`) and `ẋ_a` the weighted net inflow of the
/// arc, for class weight `w` (1 for private vehicles, β for trucks):
///
/// ```text
/// ∂ṙ/∂x = w·[ −4uB/(D³·den) − 2rB/D² + 4(g + rD)·D·B/D⁴ ]
/// ∂ṙ/∂g = 2u·w·B / (D²·den²) − 2/D²
/// ∂ṙ/∂r = −2/D
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhsPartials {
    pub d_volume: f64,
    pub d_exit_flow: f64,
    pub d_exit_rate: f64,
    /// Arc delay `D` at the evaluation point.
    pub delay: f64,
    /// `1 + D'·ẋ_a` at the evaluation point.
    pub den: f64,
}

pub fn rhs_partials(
    network: &Network,
    state: &LoadingState,
    h_pr: &[f64],
    h_tr: &[f64],
    params: &LoadingParams,
    class: Class,
    position: usize,
) -> Result<RhsPartials> {
    let layout = Layout::new(network);
    if position >= layout.n_positions() {
        return Err(Error::GridMismatch);
    }
    let arc = layout.arc_of(position);
    let (mut vol, mut net_in) = (0.0, 0.0);
    for p in 0..layout.n_paths() {
        for j in layout.positions(p) {
            if layout.arc_of(j) != arc {
                continue;
            }
            for c in Class::ALL {
                let w = if c == Class::Private { 1.0 } else { params.beta };
                let s = state.class(c);
                let u = if j == layout.positions(p).start {
                    if c == Class::Private { h_pr[p] } else { h_tr[p] }
                } else {
                    s.g[j - 1]
                };
                vol += w * s.x[j];
                net_in += w * (u - s.g[j]);
            }
        }
    }
    let (a, b) = (layout.arc_a[arc], layout.arc_b[arc]);
    let d = a + b * vol.max(0.0);
    let den = 1.0 + b * net_in;
    let s = state.class(class);
    let path = (0..layout.n_paths())
        .find(|&p| layout.positions(p).contains(&position))
        .expect("position belongs to a path");
    let u = if position == layout.positions(path).start {
        if class == Class::Private { h_pr[path] } else { h_tr[path] }
    } else {
        s.g[position - 1]
    };
    let w = if class == Class::Private { 1.0 } else { params.beta };
    let (g, r) = (s.g[position], s.r[position]);
    let d2 = d * d;
    let d_volume = w
        * (-4.0 * u * b / (d2 * d * den) - 2.0 * r * b / d2 + 4.0 * (g + r * d) * d * b / (d2 * d2));
    let d_exit_flow = 2.0 * u * w * b / (d2 * den * den) - 2.0 / d2;
    let d_exit_rate = -2.0 / d;
    Ok(RhsPartials {
        d_volume,
        d_exit_flow,
        d_exit_rate,
        delay: d,
        den,
    })
}

struct RhsWorkspace {
    vol: Vec<f64>,
    net_in: Vec<f64>,
    delay: Vec<f64>,
    den: Vec<f64>,
    den_floor_hits: u64,
    nonpositive_delay: Option<(usize, f64)>,
}

impl RhsWorkspace {
    fn new(layout: &Layout) -> Self {
        let n = layout.n_arcs();
        Self {
            vol: vec![0.0; n],
            net_in: vec![0.0; n],
            delay: vec![0.0; n],
            den: vec![0.0; n],
            den_floor_hits: 0,
            nonpositive_delay: None,
        }
    }
}

/// Packed right-hand side. Inactive paths are known to be identically zero
/// and are skipped; their derivative entries are written as zero.
fn rhs(
    layout: &Layout,
    params: &LoadingParams,
    y: &[f64],
    inflow: &dyn Fn(usize, usize) -> f64,
    active: &[Vec<bool>; 2],
    dy: &mut [f64],
    ws: &mut RhsWorkspace,
) {
    let pk = Packing {
        np: layout.n_positions(),
        npaths: layout.n_paths(),
    };
    ws.vol.iter_mut().for_each(|v| *v = 0.0);
    ws.net_in.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..2 {
        let w = if c == 0 { 1.0 } else { params.beta };
        let (xo, go) = (pk.x(c), pk.g(c));
        for p in 0..pk.npaths {
            if !active[c][p] {
                continue;
            }
            let range = layout.positions(p);
            let mut u = inflow(c, p);
            for j in range {
                let a = layout.pos_arc[j];
                let g = y[go + j];
                ws.vol[a] += w * y[xo + j];
                ws.net_in[a] += w * (u - g);
                u = g;
            }
        }
    }
    let floor = params.integrator.den_floor;
    for a in 0..layout.n_arcs() {
        let b = layout.arc_b[a];
        let d = layout.arc_a[a] + b * ws.vol[a].max(0.0);
        if !(d > 0.0) {
            ws.nonpositive_delay = Some((a, d));
        }
        ws.delay[a] = d;
        let mut den = 1.0 + b * ws.net_in[a];
        if math::abs(den) < floor {
            den = if den < 0.0 { -floor } else { floor };
            ws.den_floor_hits += 1;
        }
        ws.den[a] = den;
    }
    for c in 0..2 {
        let (xo, go, ro, eo) = (pk.x(c), pk.g(c), pk.r(c), pk.e(c));
        for p in 0..pk.npaths {
            let range = layout.positions(p);
            if !active[c][p] {
                for j in range {
                    dy[xo + j] = 0.0;
                    dy[go + j] = 0.0;
                    dy[ro + j] = 0.0;
                }
                dy[eo + p] = 0.0;
                continue;
            }
            let last = range.end - 1;
            let mut u = inflow(c, p);
            for j in range {
                let a = layout.pos_arc[j];
                let (d, den) = (ws.delay[a], ws.den[a]);
                let g = y[go + j];
                let r = y[ro + j];
                let inv_d2 = 1.0 / (d * d);
                dy[xo + j] = u - g;
                dy[go + j] = r;
                dy[ro + j] = 2.0 * inv_d2 * (u / den - g - r * d);
                u = g;
            }
            dy[eo + p] = y[go + last];
        }
    }
}

/// Reusable loading workspace bound to one network, grid and parameter set.
///
/// [`load_network`] is the convenient entry point; the workspace form lets
/// repeated loadings (equilibrium iterations, finite differences) reuse
/// buffers and restart from stored checkpoints.
pub struct Loader<'a> {
    network: &'a Network,
    layout: Layout,
    grid: TimeGrid,
    state_grid: TimeGrid,
    params: LoadingParams,
    ws: RhsWorkspace,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

/// Node-level output of one integration.
#[derive(Clone, Debug)]
pub struct LoadingRun {
    /// Packed state at every node of the extended grid (`(n_ext + 1) × len`).
    pub(crate) states: Vec<f64>,
    /// Effective arc volume at every node (`(n_ext + 1) × n_arcs`).
    pub(crate) arc_volume: Vec<f64>,
    /// `D_p(t_k)`, flattened `path * n + k`.
    pub(crate) path_delay: Vec<f64>,
    /// `Ψ_p(t_k)`, flattened `path * n + k`.
    pub(crate) psi: Vec<f64>,
    pub(crate) diagnostics: LoadingDiagnostics,
}

impl LoadingRun {
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn path_delay(&self) -> &[f64] {
        &self.path_delay
    }

    pub fn diagnostics(&self) -> &LoadingDiagnostics {
        &self.diagnostics
    }
}

impl<'a> Loader<'a> {
    pub fn new(network: &'a Network, grid: TimeGrid, params: &LoadingParams) -> Result<Self> {
        let layout = Layout::new(network);
        params.validate(&grid, &layout)?;
        let len = layout.state_len();
        let ws = RhsWorkspace::new(&layout);
        Ok(Self {
            network,
            state_grid: grid.extended(params.integrator.slack_intervals),
            grid,
            params: params.clone(),
            ws,
            k: [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]],
            tmp: vec![0.0; len],
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn params(&self) -> &LoadingParams {
        &self.params
    }

    pub fn network(&self) -> &'a Network {
        self.network
    }

    fn n_nodes(&self) -> usize {
        self.state_grid.n_intervals() + 1
    }

    /// Representative departure time of cell `k`: its midpoint.
    pub fn departure_time(&self, k: usize) -> f64 {
        self.grid.time(k) + 0.5 * self.grid.dt()
    }

    fn initial_state(&self) -> Vec<f64> {
        let pk = self.packing();
        let mut y = vec![0.0; self.layout.state_len()];
        if let Some(init) = &self.params.initial_volumes {
            y[pk.x(0)..pk.x(0) + pk.np].copy_from_slice(&init.private);
            y[pk.x(1)..pk.x(1) + pk.np].copy_from_slice(&init.truck);
        }
        y
    }

    fn packing(&self) -> Packing {
        Packing {
            np: self.layout.n_positions(),
            npaths: self.layout.n_paths(),
        }
    }

    fn check_inflows(&self, h: &Inflows) -> Result<()> {
        let n = self.layout.n_paths() * self.grid.n_intervals();
        if h.n_cells != self.grid.n_intervals() || h.private.len() != n || h.truck.len() != n {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// First cell from which each (class, path) may be nonzero.
    fn activation(&self, h: &Inflows) -> [Vec<usize>; 2] {
        let n = self.grid.n_intervals();
        let never = usize::MAX;
        let mut start = [vec![never; self.layout.n_paths()], vec![never; self.layout.n_paths()]];
        for c in 0..2 {
            let vals = if c == 0 { &h.private } else { &h.truck };
            for p in 0..self.layout.n_paths() {
                let seeded = self.params.initial_volumes.as_ref().is_some_and(|init| {
                    let v = if c == 0 { &init.private } else { &init.truck };
                    self.layout.positions(p).any(|j| v[j] != 0.0)
                });
                start[c][p] = if seeded {
                    0
                } else {
                    vals[p * n..(p + 1) * n].iter().position(|&v| v != 0.0).unwrap_or(never)
                };
            }
        }
        start
    }

    /// Full loading from `t0`.
    pub fn run(&mut self, h: &Inflows) -> Result<LoadingRun> {
        self.check_inflows(h)?;
        let len = self.layout.state_len();
        let nn = self.n_nodes();
        let mut run = LoadingRun {
            states: vec![0.0; nn * len],
            arc_volume: vec![0.0; nn * self.layout.n_arcs()],
            path_delay: vec![0.0; self.layout.n_paths() * self.grid.n_intervals()],
            psi: vec![0.0; self.layout.n_paths() * self.grid.n_intervals()],
            diagnostics: LoadingDiagnostics::default(),
        };
        let y0 = self.initial_state();
        run.states[..len].copy_from_slice(&y0);
        let mut diag = LoadingDiagnostics::default();
        let n_ext = self.state_grid.n_intervals();
        self.integrate(h, 0, n_ext, &y0, Some(&mut run.states), &mut run.arc_volume, &mut diag)?;
        self.exit_chain(&run.arc_volume, &mut run.path_delay, &mut run.psi);
        diag.max_conservation_residual = self.conservation_residual(h, &run.states[(nn - 1) * len..]);
        run.diagnostics = diag;
        Ok(run)
    }

    /// Re-run `base` from its checkpoint at node `from` with inflows `h`
    /// that agree with the base inflows before cell `from`, integrating only
    /// up to node `until`, and write `Ψ` for the flat departure `cells` into
    /// `psi_out`. The listed cells must only read volumes at or before node
    /// `until`.
    pub(crate) fn rerun_cells(
        &mut self,
        base: &LoadingRun,
        h: &Inflows,
        from: usize,
        until: usize,
        cells: &[usize],
        arc_volume: &mut [f64],
        psi_out: &mut [f64],
    ) -> Result<()> {
        let len = self.layout.state_len();
        let na = self.layout.n_arcs();
        let until = until.min(self.state_grid.n_intervals()).max(from);
        arc_volume[..(from + 1) * na].copy_from_slice(&base.arc_volume[..(from + 1) * na]);
        let y0 = &base.states[from * len..(from + 1) * len];
        let mut diag = LoadingDiagnostics::default();
        self.integrate(h, from, until, y0, None, arc_volume, &mut diag)?;
        let n = self.grid.n_intervals();
        for &idx in cells {
            psi_out[idx] = self.chain_cell(arc_volume, idx / n, idx % n).1;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate(
        &mut self,
        h: &Inflows,
        from: usize,
        until: usize,
        y0: &[f64],
        mut states: Option<&mut Vec<f64>>,
        arc_volume: &mut [f64],
        diag: &mut LoadingDiagnostics,
    ) -> Result<()> {
        let len = self.layout.state_len();
        let pk = self.packing();
        let substeps = self.params.integrator.substeps;
        let hs = self.grid.dt() / substeps as f64;
        let bound = self.params.integrator.magnitude_bound;
        let start = self.activation(h);
        let mut y = y0.to_vec();
        self.ws.den_floor_hits = 0;
        self.ws.nonpositive_delay = None;
        self.store_arc_volume(&y, from, arc_volume);
        let mut active = [vec![false; pk.npaths], vec![false; pk.npaths]];

        for cell in from..until {
            for c in 0..2 {
                for p in 0..pk.npaths {
                    active[c][p] = start[c][p] <= cell;
                }
            }
            let inflow = |c: usize, p: usize| h.value(c, p, cell);
            for _ in 0..substeps {
                let [k1, k2, k3, k4] = &mut self.k;
                let tmp = &mut self.tmp;
                rhs(&self.layout, &self.params, &y, &inflow, &active, k1, &mut self.ws);
                for i in 0..len {
                    tmp[i] = y[i] + 0.5 * hs * k1[i];
                }
                rhs(&self.layout, &self.params, tmp, &inflow, &active, k2, &mut self.ws);
                for i in 0..len {
                    tmp[i] = y[i] + 0.5 * hs * k2[i];
                }
                rhs(&self.layout, &self.params, tmp, &inflow, &active, k3, &mut self.ws);
                for i in 0..len {
                    tmp[i] = y[i] + hs * k3[i];
                }
                rhs(&self.layout, &self.params, tmp, &inflow, &active, k4, &mut self.ws);
                for i in 0..len {
                    y[i] += hs / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                for c in 0..2 {
                    for v in &mut y[pk.x(c)..pk.x(c) + pk.np] {
                        if *v < 0.0 {
                            *v = 0.0;
                            diag.clamp_count += 1;
                        }
                    }
                }
            }
            if let Some((arc, delay)) = self.ws.nonpositive_delay {
                return Err(Error::NonPositiveDelay { arc, delay });
            }
            let magnitude = y.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
            if !(magnitude <= bound) {
                return Err(Error::Instability {
                    t: self.state_grid.time(cell + 1),
                    magnitude,
                });
            }
            if let Some(st) = states.as_deref_mut() {
                st[(cell + 1) * len..(cell + 2) * len].copy_from_slice(&y);
            }
            self.store_arc_volume(&y, cell + 1, arc_volume);
        }
        diag.den_floor_count += self.ws.den_floor_hits;
        Ok(())
    }

    fn store_arc_volume(&self, y: &[f64], node: usize, arc_volume: &mut [f64]) {
        let pk = self.packing();
        let na = self.layout.n_arcs();
        let out = &mut arc_volume[node * na..(node + 1) * na];
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..2 {
            let w = if c == 0 { 1.0 } else { self.params.beta };
            for (j, &a) in self.layout.pos_arc.iter().enumerate() {
                out[a] += w * y[pk.x(c) + j];
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Effective arc volume at time `t`, linear between nodes and clamped to
    /// the first/last node outside the integrated window.
    fn volume_at(&self, arc_volume: &[f64], arc: usize, t: f64) -> f64 {
        let na = self.layout.n_arcs();
        let n_ext = self.state_grid.n_intervals();
        let s = (t - self.state_grid.t0()) / self.grid.dt();
        if s <= 0.0 {
            return arc_volume[arc];
        }
        if s >= n_ext as f64 {
            return arc_volume[n_ext * na + arc];
        }
        let i = math::floor(s) as usize;
        let f = s - i as f64;
        let lo = arc_volume[i * na + arc];
        let hi = arc_volume[(i + 1) * na + arc];
        lo + f * (hi - lo)
    }

    /// `(D_p, Ψ_p)` for departures of path `p` in cell `k`.
    fn chain_cell(&self, arc_volume: &[f64], p: usize, k: usize) -> (f64, f64) {
        let t = self.departure_time(k);
        let mut tau = t;
        for j in self.layout.positions(p) {
            let a = self.layout.pos_arc[j];
            tau += self.layout.arc_a[a] + self.layout.arc_b[a] * self.volume_at(arc_volume, a, tau);
        }
        let d = tau - t;
        (d, effective_delay(d, t, &self.params))
    }

    fn exit_chain(&self, arc_volume: &[f64], path_delay: &mut [f64], psi: &mut [f64]) {
        let n = self.grid.n_intervals();
        for p in 0..self.layout.n_paths() {
            for k in 0..n {
                let (d, ps) = self.chain_cell(arc_volume, p, k);
                path_delay[p * n + k] = d;
                psi[p * n + k] = ps;
            }
        }
    }

    fn conservation_residual(&self, h: &Inflows, y_end: &[f64]) -> f64 {
        let pk = self.packing();
        let n = self.grid.n_intervals();
        let dt = self.grid.dt();
        let mut worst = 0.0f64;
        for c in 0..2 {
            let vals = if c == 0 { &h.private } else { &h.truck };
            for p in 0..pk.npaths {
                let mut balance = vals[p * n..(p + 1) * n].iter().sum::<f64>() * dt;
                if let Some(init) = &self.params.initial_volumes {
                    let v = if c == 0 { &init.private } else { &init.truck };
                    balance += self.layout.positions(p).map(|j| v[j]).sum::<f64>();
                }
                balance -= y_end[pk.e(c) + p];
                balance -= self.layout.positions(p).map(|j| y_end[pk.x(c) + j]).sum::<f64>();
                worst = worst.max(math::abs(balance));
            }
        }
        worst
    }

    /// Exit times of every arc position for every departure cell.
    fn all_exit_times(&self, arc_volume: &[f64]) -> Vec<Vec<Trajectory>> {
        let n = self.grid.n_intervals();
        (0..self.layout.n_paths())
            .map(|p| {
                let range = self.layout.positions(p);
                let mut per_pos = vec![vec![0.0; n]; range.len()];
                for k in 0..n {
                    let mut tau = self.departure_time(k);
                    for (i, j) in range.clone().enumerate() {
                        let a = self.layout.pos_arc[j];
                        tau += self.layout.arc_a[a] + self.layout.arc_b[a] * self.volume_at(arc_volume, a, tau);
                        per_pos[i][k] = tau;
                    }
                }
                per_pos
                    .into_iter()
                    .map(|v| Trajectory::from_values(self.grid, v).expect("grid sized"))
                    .collect()
            })
            .collect()
    }

    /// Full loading packaged as a [`LoadingResult`].
    pub fn load(&mut self, h: &Inflows) -> Result<LoadingResult> {
        let run = self.run(h)?;
        let n = self.grid.n_intervals();
        let per_path = |flat: &[f64]| -> Vec<Trajectory> {
            flat.chunks(n)
                .map(|c| Trajectory::from_values(self.grid, c.to_vec()).expect("grid sized"))
                .collect()
        };
        let na = self.layout.n_arcs();
        let n_ext = self.state_grid.n_intervals();
        let arc_volumes = (0..na)
            .map(|a| {
                let v = (0..n_ext).map(|k| run.arc_volume[k * na + a]).collect();
                Trajectory::from_values(self.state_grid, v).expect("grid sized")
            })
            .collect();
        let exit_times = self.all_exit_times(&run.arc_volume);
        let len = self.layout.state_len();
        let last = &run.states[n_ext * len..];
        let pk = self.packing();
        let cumulative_exits = [
            last[pk.e(0)..pk.e(0) + pk.npaths].to_vec(),
            last[pk.e(1)..pk.e(1) + pk.npaths].to_vec(),
        ];
        let dt = self.grid.dt();
        let inflow_totals = [
            h.private.chunks(n).map(|c| c.iter().sum::<f64>() * dt).collect(),
            h.truck.chunks(n).map(|c| c.iter().sum::<f64>() * dt).collect(),
        ];
        Ok(LoadingResult {
            grid: self.grid,
            state_grid: self.state_grid,
            layout: self.layout.clone(),
            beta: self.params.beta,
            arc_slopes: self.layout.arc_b.clone(),
            path_delays: per_path(&run.path_delay),
            effective_delays: per_path(&run.psi),
            arc_volumes,
            exit_times,
            cumulative_exits,
            inflow_totals,
            departures: [h.private.clone(), h.truck.clone()],
            arc_volume_nodes: run.arc_volume,
            states: run.states,
            diagnostics: run.diagnostics,
        })
    }
}

/// Output of one network loading.
#[derive(Clone, Debug)]
pub struct LoadingResult {
    grid: TimeGrid,
    state_grid: TimeGrid,
    layout: Layout,
    beta: f64,
    arc_slopes: Vec<f64>,
    path_delays: Vec<Trajectory>,
    effective_delays: Vec<Trajectory>,
    arc_volumes: Vec<Trajectory>,
    exit_times: Vec<Vec<Trajectory>>,
    cumulative_exits: [Vec<f64>; 2],
    inflow_totals: [Vec<f64>; 2],
    departures: [Vec<f64>; 2],
    arc_volume_nodes: Vec<f64>,
    states: Vec<f64>,
    diagnostics: LoadingDiagnostics,
}

impl LoadingResult {
    /// Decision grid on which delays are reported.
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Grid the states were integrated on (decision grid plus slack).
    pub fn state_grid(&self) -> &TimeGrid {
        &self.state_grid
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `D_p(t)` per path.
    pub fn path_delays(&self) -> &[Trajectory] {
        &self.path_delays
    }

    /// `Ψ_p(t)` per path.
    pub fn effective_delays(&self) -> &[Trajectory] {
        &self.effective_delays
    }

    /// Effective arc volume `x_pr + β·x_tr` per arc (value at each cell's
    /// left node, on the state grid).
    pub fn arc_volumes(&self) -> &[Trajectory] {
        &self.arc_volumes
    }

    /// `τ_{a_i}^p(t)` per path, per arc position.
    pub fn exit_times(&self) -> &[Vec<Trajectory>] {
        &self.exit_times
    }

    pub fn diagnostics(&self) -> &LoadingDiagnostics {
        &self.diagnostics
    }

    /// Exit time from arc position `position` of `path` for a departure at
    /// an arbitrary time `t`.
    pub fn exit_time(&self, path: usize, position: usize, t: f64) -> f64 {
        let na = self.layout.n_arcs();
        let n_ext = self.state_grid.n_intervals();
        let dt = self.grid.dt();
        let vol = |a: usize, t: f64| {
            let s = (t - self.state_grid.t0()) / dt;
            if s <= 0.0 {
                return self.arc_volume_nodes[a];
            }
            if s >= n_ext as f64 {
                return self.arc_volume_nodes[n_ext * na + a];
            }
            let i = math::floor(s) as usize;
            let f = s - i as f64;
            let lo = self.arc_volume_nodes[i * na + a];
            lo + f * (self.arc_volume_nodes[(i + 1) * na + a] - lo)
        };
        let mut tau = t;
        for j in self.layout.positions(path).take(position + 1) {
            let a = self.layout.arc_of(j);
            tau += self.layout.arc_a[a] + self.layout.arc_b[a] * vol(a, tau);
        }
        tau
    }

    /// Representative time of cell `k` for `τ`, `D_p` and `Ψ_p`.
    pub fn departure_time(&self, k: usize) -> f64 {
        self.grid.time(k) + 0.5 * self.grid.dt()
    }

    /// `∫ g_{a_m}` accumulated up to the end of the state grid.
    pub fn cumulative_exit(&self, class: Class, path: usize) -> f64 {
        self.cumulative_exits[class.slot()][path]
    }

    /// `∫ h` of the loaded departure rates.
    pub fn inflow_total(&self, class: Class, path: usize) -> f64 {
        self.inflow_totals[class.slot()][path]
    }

    fn node_state(&self, node: usize, class: Class, position: usize) -> (f64, f64, f64) {
        let pk = Packing {
            np: self.layout.n_positions(),
            npaths: self.layout.n_paths(),
        };
        let base = node * self.layout.state_len();
        let c = class.slot();
        (
            self.states[base + pk.x(c) + position],
            self.states[base + pk.g(c) + position],
            self.states[base + pk.r(c) + position],
        )
    }

    /// `(x, g, r)` at node `node` of the state grid.
    pub fn state_at(&self, node: usize, class: Class, path: usize, position: usize) -> (f64, f64, f64) {
        let flat = self.layout.positions(path).start + position;
        self.node_state(node, class, flat)
    }

    /// Volume on arc position `position` of `path` (left-node values).
    pub fn volume(&self, class: Class, path: usize, position: usize) -> Trajectory {
        let n = self.state_grid.n_intervals();
        let v = (0..n).map(|k| self.state_at(k, class, path, position).0).collect();
        Trajectory::from_values(self.state_grid, v).expect("grid sized")
    }

    /// Exit flow on arc position `position` of `path` (left-node values).
    pub fn exit_flow(&self, class: Class, path: usize, position: usize) -> Trajectory {
        let n = self.state_grid.n_intervals();
        let v = (0..n).map(|k| self.state_at(k, class, path, position).1).collect();
        Trajectory::from_values(self.state_grid, v).expect("grid sized")
    }

    /// Total volume still inside the network on `path` at the end of the
    /// state grid.
    pub fn residual_volume(&self, class: Class, path: usize) -> f64 {
        let n = self.state_grid.n_intervals();
        (0..self.layout.positions(path).len())
            .map(|i| self.state_at(n, class, path, i).0)
            .sum()
    }
}

/// Integrate the loading for given departure rates.
pub fn load_network(
    h_pr: &[Trajectory],
    h_tr: &[Trajectory],
    network: &Network,
    grid: &TimeGrid,
    params: &LoadingParams,
) -> Result<LoadingResult> {
    if h_pr.len() != network.paths().len() || h_tr.len() != network.paths().len() {
        return Err(Error::GridMismatch);
    }
    for v in h_pr.iter().chain(h_tr) {
        if v.values().iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidParameter("departure rates must be nonnegative".into()));
        }
    }
    let h = Inflows::from_trajectories(h_pr, h_tr, grid)?;
    Loader::new(network, *grid, params)?.load(&h)
}

/// FIFO diagnostics of a loading.
#[derive(Clone, Debug, PartialEq)]
pub struct FifoReport {
    /// No exit-time sequence fails to increase strictly.
    pub passed: bool,
    /// Smallest `τ(t_{k+1}) − τ(t_k)` over all paths and arc positions.
    pub worst_margin: f64,
    pub violations: usize,
    /// Smallest first-arc slope excess `Δτ/Δt − B·(u_pr + β·u_tr)`.
    pub worst_slope_margin: f64,
    pub slope_violations: usize,
}

/// Check exit-time monotonicity and the first-arc slope bound
/// `τ' > B·(u_pr + β·u_tr)` by finite differences on the grid.
///
/// The arc inflow `u` of a cell is the departure rate of every path starting
/// on that arc plus the mean exit flow feeding it from upstream arcs; the
/// bound between two cell midpoints uses the mean of both cells.
pub fn fifo_check(result: &LoadingResult) -> FifoReport {
    let grid = result.grid();
    let n = grid.n_intervals();
    let dt = grid.dt();
    let layout = result.layout();
    let mut worst_margin = f64::INFINITY;
    let mut violations = 0;
    for per_pos in result.exit_times() {
        for tau in per_pos {
            for w in tau.values().windows(2) {
                let m = w[1] - w[0];
                worst_margin = worst_margin.min(m);
                if !(m > 0.0) {
                    violations += 1;
                }
            }
        }
    }

    // arc inflow per (arc, cell)
    let na = layout.n_arcs();
    let mut inflow = vec![0.0; na * n];
    for p in 0..layout.n_paths() {
        let range = layout.positions(p);
        for (i, j) in range.clone().enumerate() {
            let a = layout.arc_of(j);
            for c in Class::ALL {
                let w = if c == Class::Private { 1.0 } else { result.beta };
                for k in 0..n {
                    let u = if i == 0 {
                        result.inflow_rate(c, p, k)
                    } else {
                        0.5 * (result.state_at(k, c, p, i - 1).1 + result.state_at(k + 1, c, p, i - 1).1)
                    };
                    inflow[a * n + k] += w * u;
                }
            }
        }
    }
    let mut worst_slope_margin = f64::INFINITY;
    let mut slope_violations = 0;
    for (p, per_pos) in result.exit_times().iter().enumerate() {
        let a = layout.arc_of(layout.positions(p).start);
        let b = result.arc_slopes[a];
        let tau = per_pos[0].values();
        for k in 0..n.saturating_sub(1) {
            let slope = (tau[k + 1] - tau[k]) / dt;
            let m = slope - b * 0.5 * (inflow[a * n + k] + inflow[a * n + k + 1]);
            worst_slope_margin = worst_slope_margin.min(m);
            if !(m > 0.0) {
                slope_violations += 1;
            }
        }
    }
    FifoReport {
        passed: violations == 0,
        worst_margin,
        violations,
        worst_slope_margin,
        slope_violations,
    }
}

impl LoadingResult {
    /// Departure rate of `path` in decision cell `cell`.
    pub fn inflow_rate(&self, class: Class, path: usize, cell: usize) -> f64 {
        self.departures[class.slot()][path * self.grid.n_intervals() + cell]
    }
}

/// Vehicle accounting for one (path, class).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConservationEntry {
    pub path: usize,
    pub class: Class,
    /// `∫ h dt`.
    pub entered: f64,
    /// `∫ g_{a_m} dt` over the state grid.
    pub exited: f64,
    /// Volume still on the path at the end of the state grid.
    pub in_network: f64,
    /// `|entered − exited|`: vehicles that have not left by the end of the
    /// state grid, plus integration error.
    pub residual: f64,
}

/// Compare vehicles entered with vehicles exited for every path and class.
/// Load with `slack_intervals` covering the network traversal time to make
/// residuals small.
pub fn conservation_check(result: &LoadingResult) -> Vec<ConservationEntry> {
    let mut out = Vec::new();
    for path in 0..result.layout().n_paths() {
        for class in Class::ALL {
            let entered = result.inflow_total(class, path);
            let exited = result.cumulative_exit(class, path);
            out.push(ConservationEntry {
                path,
                class,
                entered,
                exited,
                in_network: result.residual_volume(class, path),
                residual: math::abs(entered - exited),
            });
        }
    }
    out
}
