use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackfreight_core::dnl::LoadingParams;
use stackfreight_core::due::{solve_due, DueOptions};
use stackfreight_core::mpcc::*;
use stackfreight_core::net::*;
use stackfreight_core::traj::{TimeGrid, Trajectory};

fn toy(q_pr: f64, q_tr: f64) -> Network {
    let nodes = vec![NodeId(1), NodeId(2)];
    let arcs = vec![Arc::new(1, 1, 2, 2.0, 1e-3), Arc::new(2, 1, 2, 2.5, 1e-3)];
    let od = vec![OdPair::new(1, 2, q_pr, q_tr)];
    Network::new(nodes, arcs, od, vec![vec![vec![ArcId(1)], vec![ArcId(2)]]]).unwrap()
}

fn setup(q_pr: f64, q_tr: f64) -> (Network, TimeGrid, LoadingParams) {
    let g = TimeGrid::new(150.0, 160.0, 10).unwrap();
    let mut p = LoadingParams::benchmark();
    p.desired_arrival = 158.0;
    (toy(q_pr, q_tr), g, p)
}

fn traj(g: TimeGrid, v: &[f64]) -> Trajectory {
    Trajectory::from_values(g, v.to_vec()).unwrap()
}

fn random_feasible(net: &Network, g: TimeGrid, rng: &mut ChaCha8Rng) -> ControlVector {
    let n = g.n_intervals();
    let mut block = |q: f64, allowed: &[bool]| -> Vec<Trajectory> {
        let raw: Vec<Vec<f64>> = allowed
            .iter()
            .map(|&a| (0..n).map(|_| if a { rng.gen_range(0.2..1.0) } else { 0.0 }).collect())
            .collect();
        let total: f64 = raw.iter().flatten().sum::<f64>() * g.dt();
        raw.iter().map(|r| traj(g, &r.iter().map(|x| x * q / total).collect::<Vec<_>>())).collect()
    };
    let mut h_pr = Vec::new();
    let mut h_tr = Vec::new();
    for (w, od) in net.od_pairs().iter().enumerate() {
        let r = net.paths_of(w);
        h_pr.extend(block(od.demand_private, &vec![true; r.len()]));
        let allowed: Vec<bool> = r.map(|p| net.paths()[p].truck_allowed).collect();
        h_tr.extend(block(od.demand_truck, &allowed));
    }
    let mu = (0..net.od_pairs().len()).map(|_| rng.gen_range(5.0..9.0)).collect();
    ControlVector { h_pr, h_tr, mu }
}

/// Every (path, cell) assignment of `units` equal truck parcels; returns the
/// cheapest cost.
fn brute_force_lp(psi: &[Vec<f64>], q: f64, dt: f64, units: usize) -> f64 {
    let cells: Vec<f64> = psi.iter().flatten().copied().collect();
    let mut best = f64::INFINITY;
    let mut counts = vec![0usize; cells.len()];
    fn rec(i: usize, left: usize, counts: &mut Vec<usize>, cells: &[f64], q: f64, units: usize, dt: f64, best: &mut f64) {
        if i == cells.len() - 1 {
            counts[i] = left;
            let cost: f64 = counts
                .iter()
                .zip(cells)
                .map(|(&c, &p)| p * (c as f64 * q / units as f64 / dt) * dt)
                .sum();
            *best = best.min(cost);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, counts, cells, q, units, dt, best);
        }
    }
    rec(0, units, &mut counts, &cells, q, units, dt, &mut best);
    best
}

#[test]
fn frozen_schedule_matches_enumeration() {
    let g = TimeGrid::new(0.0, 4.0, 4).unwrap();
    let net = toy(0.0, 12.0);
    let cases = [
        vec![vec![5.0, 3.0, 4.0, 6.0], vec![3.5, 2.5, 7.0, 3.0]],
        vec![vec![2.0, 3.0, 2.0, 6.0], vec![4.0, 2.0, 7.0, 3.0]],
        vec![vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0, 1.0]],
    ];
    for psi in cases {
        let trajs: Vec<Trajectory> = psi.iter().map(|v| traj(g, v)).collect();
        let h = frozen_truck_schedule(&trajs, &net).unwrap();
        let cost = truck_cost(&h, &trajs).unwrap();
        let oracle = brute_force_lp(&psi, 12.0, g.dt(), 4);
        assert_eq!(cost, oracle);
        let mass: f64 = h.iter().map(|t| t.integrate()).sum();
        assert_relative_eq!(mass, 12.0, max_relative = 1e-15);
    }
    let psi = [traj(g, &[5.0, 3.0, 4.0, 6.0]), traj(g, &[3.5, 2.5, 7.0, 3.0])];
    let h = frozen_truck_schedule(&psi, &net).unwrap();
    assert_eq!(h[0].values(), &[0.0; 4]);
    assert_eq!(h[1].values(), &[0.0, 12.0, 0.0, 0.0]);
}

#[test]
fn frozen_schedule_respects_closures() {
    let g = TimeGrid::new(0.0, 4.0, 4).unwrap();
    let net = toy(0.0, 8.0).block_arc_for_trucks(ArcId(2)).unwrap();
    let psi = [traj(g, &[5.0, 3.0, 4.0, 6.0]), traj(g, &[1.0, 1.0, 1.0, 1.0])];
    let h = frozen_truck_schedule(&psi, &net).unwrap();
    assert_eq!(h[0].values(), &[0.0, 8.0, 0.0, 0.0]);
    assert_eq!(h[1].values(), &[0.0; 4]);
}

#[test]
fn frozen_penalty_free_solve_reaches_lp_optimum() {
    let (net, g, p) = setup(200.0, 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u0 = random_feasible(&net, g, &mut rng);
    let cfg = PenaltyConfig {
        m0: 0.0,
        frozen_psi: true,
        eps1: Some(1e-12),
        max_outer: 60,
        ..Default::default()
    };
    let psi_hat = stackfreight_core::dnl::load_network(&u0.h_pr, &u0.h_tr, &net, &g, &p)
        .unwrap()
        .effective_delays()
        .to_vec();
    let lp = frozen_truck_schedule(&psi_hat, &net).unwrap();
    let (u, rep) = solve_mpcc(&u0, &net, &g, &p, &cfg).unwrap();
    assert!(rep.converged);
    let got = truck_cost(&u.h_tr, &psi_hat).unwrap();
    let want = truck_cost(&lp, &psi_hat).unwrap();
    assert_relative_eq!(got, want, max_relative = 1e-12);
    for (a, b) in u.h_tr.iter().zip(&lp) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-9 * 60.0);
        }
    }
}

#[test]
fn projected_step_examples() {
    let (net, g, _) = setup(200.0, 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = random_feasible(&net, g, &mut rng);
    let zero = Gradient {
        f1: vec![Trajectory::zeros(g); 2],
        f2: vec![Trajectory::zeros(g); 2],
        f3: vec![0.0],
    };
    let same = projected_step(&u, &zero, 5.0, &net).unwrap();
    assert!(same.distance(&u).unwrap() <= 1e-10);

    let g3 = Gradient { f3: vec![0.75], ..zero.clone() };
    let moved = projected_step(&u, &g3, 2.0, &net).unwrap();
    assert_eq!(moved.mu[0], u.mu[0] - 1.5);

    let g1 = TimeGrid::new(0.0, 2.0, 2).unwrap();
    let one = Network::new(
        vec![NodeId(1), NodeId(2)],
        vec![Arc::new(1, 1, 2, 1.0, 1e-3)],
        vec![OdPair::new(1, 2, 4.0, 4.0)],
        vec![vec![vec![ArcId(1)]]],
    )
    .unwrap();
    let base = ControlVector {
        h_pr: vec![traj(g1, &[1.0, 3.0])],
        h_tr: vec![traj(g1, &[0.0, 0.0])],
        mu: vec![0.0],
    };
    let grad = Gradient {
        f1: vec![traj(g1, &[-2.0, 4.0])],
        f2: vec![traj(g1, &[0.0, 0.0])],
        f3: vec![0.0],
    };
    let out = projected_step(&base, &grad, 1.0, &one).unwrap();
    assert_relative_eq!(out.h_pr[0].values()[0], 4.0, epsilon = 1e-10);
    assert_relative_eq!(out.h_pr[0].values()[1], 0.0, epsilon = 1e-10);
    assert_relative_eq!(out.h_tr[0].values()[0], 2.0, epsilon = 1e-10);
    assert_relative_eq!(out.h_tr[0].values()[1], 2.0, epsilon = 1e-10);
}

#[test]
fn residual_vanishes_at_equilibrium_and_is_quadratic_in_mu() {
    let (net, g, p) = setup(300.0, 0.0);
    let zero = vec![Trajectory::zeros(g); 2];
    let due = solve_due(&zero, &net, &g, &p, &DueOptions { max_iter: 3000, gap_tol: Some(1e-9), ..Default::default() })
        .unwrap();
    let u = ControlVector::from_due(&due, zero.clone());
    let r0 = complementarity_residual(&u, &net, &g, &p).unwrap();
    assert!(r0 <= 1e-12, "residual {r0}");

    let at = |d: f64| {
        let mut v = u.clone();
        v.mu[0] += d;
        complementarity_residual(&v, &net, &g, &p).unwrap() - r0
    };
    let (a, b) = (at(1e-3) / 1e-6, at(1e-4) / 1e-8);
    assert!(a > 0.0);
    assert_relative_eq!(a, b, max_relative = 1e-3);
}

#[test]
fn mu_gradient_vanishes_without_penalty() {
    let (net, g, p) = setup(200.0, 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = random_feasible(&net, g, &mut rng);
    let grad = gradient(&u, 0.0, &net, &g, &p, &PenaltyConfig::default()).unwrap();
    assert_eq!(grad.f3, vec![0.0]);
}

fn directional_check(net: &Network, g: TimeGrid, p: &LoadingParams, seed: u64, m: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_feasible(net, g, &mut rng);
    let z = random_feasible(net, g, &mut rng);
    let along = |s: f64| ControlVector {
        h_pr: u.h_pr.iter().zip(&z.h_pr).map(|(a, b)| a.lin_comb(1.0 - s, b, s).unwrap()).collect(),
        h_tr: u.h_tr.iter().zip(&z.h_tr).map(|(a, b)| a.lin_comb(1.0 - s, b, s).unwrap()).collect(),
        mu: u.mu.iter().zip(&z.mu).map(|(a, b)| a + s * (b - a)).collect(),
    };
    let grad = gradient(&u, m, net, &g, p, &PenaltyConfig::default()).unwrap();
    let mut predicted = 0.0;
    for (f, (a, b)) in grad.f1.iter().zip(u.h_pr.iter().zip(&z.h_pr)) {
        predicted += f.values().iter().zip(a.values().iter().zip(b.values())).map(|(f, (a, b))| f * (b - a)).sum::<f64>();
    }
    for (f, (a, b)) in grad.f2.iter().zip(u.h_tr.iter().zip(&z.h_tr)) {
        predicted += f.values().iter().zip(a.values().iter().zip(b.values())).map(|(f, (a, b))| f * (b - a)).sum::<f64>();
    }
    predicted += grad.f3.iter().zip(u.mu.iter().zip(&z.mu)).map(|(f, (a, b))| f * (b - a)).sum::<f64>();
    let eps = 1e-4;
    let up = augmented_objective(&along(eps), m, net, &g, p).unwrap();
    let down = augmented_objective(&along(-eps), m, net, &g, p).unwrap();
    let observed = (up - down) / (2.0 * eps);
    (predicted - observed).abs() / observed.abs().max(1e-12)
}

#[test]
fn gradient_matches_directional_difference() {
    let (net, g, p) = setup(200.0, 60.0);
    for seed in 0..5 {
        let err = directional_check(&net, g, &p, seed, 1e2);
        assert!(err <= 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn truck_free_problem_is_a_penalised_equilibrium() {
    let (net, g, p) = setup(300.0, 0.0);
    let zero = vec![Trajectory::zeros(g); 2];
    let (u0, _) = initial_control(&net, &g, &p, &DueOptions::default()).unwrap();
    assert_eq!(u0.h_tr, zero);
    let (u, rep) = solve_mpcc(&u0, &net, &g, &p, &PenaltyConfig::default()).unwrap();
    assert_eq!(rep.final_truck_cost, 0.0);
    assert!(u.h_tr.iter().all(|t| t.values().iter().all(|v| *v == 0.0)));
    assert!(rep.final_residual <= 1e-3 * rep.initial_residual.max(1.0));
}

#[test]
fn penalty_loop_contracts() {
    let (net, g, p) = setup(300.0, 80.0);
    let (u0, _) = initial_control(&net, &g, &p, &DueOptions::default()).unwrap();
    let cfg = PenaltyConfig { max_outer: 6, ..Default::default() };
    let (u, rep) = solve_mpcc(&u0, &net, &g, &p, &cfg).unwrap();
    assert!(u.feasibility_error(&net) <= 1e-8);
    assert!(rep.final_residual < rep.initial_residual);
    for pair in rep.trace.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.kind == StepKind::Gradient && a.m == b.m {
            assert!(b.objective <= a.objective, "{a:?} -> {b:?}");
        }
    }
    assert!(rep.converged || rep.outer_iterations == cfg.max_outer);
    if rep.converged {
        assert!(rep.last_outer_step <= rep.eps1);
    }
}

#[test]
fn invalid_configuration_is_rejected() {
    let (net, g, p) = setup(300.0, 80.0);
    let (u0, _) = initial_control(&net, &g, &p, &DueOptions::default()).unwrap();
    for cfg in [
        PenaltyConfig { c: 1.0, ..Default::default() },
        PenaltyConfig { fd_step: 0.0, ..Default::default() },
        PenaltyConfig { m_cap: 1.0, ..Default::default() },
    ] {
        assert!(solve_mpcc(&u0, &net, &g, &p, &cfg).is_err());
    }
}
