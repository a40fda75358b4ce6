use approx::assert_relative_eq;
use proptest::prelude::*;
use stackfreight_core::dnl::{effective_delay, load_network, LoadingParams};
use stackfreight_core::due::*;
use stackfreight_core::net::*;
use stackfreight_core::traj::{TimeGrid, Trajectory};

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(0.0, n as f64, n).unwrap()
}

fn single(values: &[f64], q: f64) -> Vec<f64> {
    let t = Trajectory::from_values(grid(values.len()), values.to_vec()).unwrap();
    project_demand_simplex(&[t], q).unwrap()[0].values().to_vec()
}

#[test]
fn projection_examples() {
    let a = single(&[3.0, -1.0], 4.0);
    assert_relative_eq!(a[0], 4.0, epsilon = 1e-10);
    assert_relative_eq!(a[1], 0.0, epsilon = 1e-10);
    let b = single(&[1.0, 3.0], 4.0);
    assert_relative_eq!(b[0], 1.0, epsilon = 1e-10);
    assert_relative_eq!(b[1], 3.0, epsilon = 1e-10);
    let c = single(&[0.0, 0.0], 4.0);
    assert_relative_eq!(c[0], 2.0, epsilon = 1e-10);
    assert_relative_eq!(c[1], 2.0, epsilon = 1e-10);
}

#[test]
fn projection_zero_demand() {
    assert_eq!(single(&[5.0, -2.0, 1.0], 0.0), vec![0.0; 3]);
    assert!(project_demand_simplex(&[], 0.0).unwrap().is_empty());
    assert!(project_demand_simplex(&[], 1.0).is_err());
}

/// Water level by bisection, independent of the sort-based solver.
fn bisect_projection(v: &[f64], dt: f64, q: f64) -> Vec<f64> {
    let mass = |lam: f64| v.iter().map(|x| (x - lam).max(0.0)).sum::<f64>() * dt;
    let hi0 = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (hi0 - q / dt - 1.0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    v.iter().map(|x| (x - lam).max(0.0)).collect()
}

fn to_paths(flat: &[f64], paths: usize, g: TimeGrid) -> Vec<Trajectory> {
    flat.chunks(flat.len() / paths)
        .map(|c| Trajectory::from_values(g, c.to_vec()).unwrap())
        .collect()
}

fn flatten(t: &[Trajectory]) -> Vec<f64> {
    t.iter().flat_map(|x| x.values().iter().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_idempotent_and_optimal(
        paths in 1usize..4,
        cells in 1usize..7,
        dt in 0.25f64..2.0,
        q in 0.0f64..50.0,
        seed in prop::collection::vec(-20.0f64..20.0, 18),
        other in prop::collection::vec(0.0f64..1.0, 18),
    ) {
        let g = TimeGrid::new(0.0, dt * cells as f64, cells).unwrap();
        let n = paths * cells;
        let h = &seed[..n];
        let trajs = to_paths(h, paths, g);
        let p = flatten(&project_demand_simplex(&trajs, q).unwrap());
        let tol = 1e-10 * q.max(1.0);

        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() * dt - q).abs() <= tol);
        let oracle = bisect_projection(h, dt, q);
        for (a, b) in p.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-8 * q.max(1.0), "{a} vs {b}");
        }

        let again = flatten(&project_demand_simplex(&to_paths(&p, paths, g), q).unwrap());
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= tol);
        }

        let w: f64 = other[..n].iter().sum::<f64>().max(1e-12) * dt;
        let z: Vec<f64> = other[..n].iter().map(|x| x * q / w).collect();
        let dist = |a: &[f64]| a.iter().zip(h).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        prop_assert!(dist(&p) <= dist(&z) + 1e-9 * (1.0 + dist(&z)));
    }
}

fn toy(q: f64) -> Network {
    let nodes = vec![NodeId(1), NodeId(2)];
    let arcs = vec![Arc::new(1, 1, 2, 2.0, 1e-3), Arc::new(2, 1, 2, 2.0, 1e-3)];
    let od = vec![OdPair::new(1, 2, q, 0.0)];
    Network::new(nodes, arcs, od, vec![vec![vec![ArcId(1)], vec![ArcId(2)]]]).unwrap()
}

fn toy_setup() -> (Network, TimeGrid, LoadingParams) {
    let g = TimeGrid::new(150.0, 160.0, 10).unwrap();
    let mut p = LoadingParams::benchmark();
    p.desired_arrival = 158.0;
    (toy(400.0), g, p)
}

/// Plain fixed-step projection iteration with bisection projection.
fn brute_force_vi(net: &Network, g: &TimeGrid, p: &LoadingParams, start: &[f64]) -> Vec<f64> {
    let q = net.od_pairs()[0].demand_private;
    let zero = vec![Trajectory::zeros(*g); 2];
    let mut h = start.to_vec();
    for _ in 0..4000 {
        let res = load_network(&to_paths(&h, 2, *g), &zero, net, g, p).unwrap();
        let psi = flatten(res.effective_delays());
        let moved: Vec<f64> = h.iter().zip(&psi).map(|(x, s)| x - 0.5 * s).collect();
        h = bisect_projection(&moved, g.dt(), q);
    }
    h
}

#[test]
fn symmetric_toy_splits_equally() {
    let (net, g, p) = toy_setup();
    let zero = vec![Trajectory::zeros(g); 2];
    let sol = solve_due(&zero, &net, &g, &p, &DueOptions { max_iter: 3000, ..Default::default() }).unwrap();
    assert!(sol.converged && sol.gap <= sol.gap_tol);
    let (a, b) = (&sol.h_pr_star[0], &sol.h_pr_star[1]);
    let diff = a.lin_comb(1.0, b, -1.0).unwrap();
    let sum = a.lin_comb(1.0, b, 1.0).unwrap();
    let norm = |t: &Trajectory| t.dot(t).unwrap().sqrt();
    assert!(norm(&diff) / norm(&sum) <= 0.01);

    let start = flatten(&uniform_private_flows(&net, &g));
    let oracle = brute_force_vi(&net, &g, &p, &start);
    let ours = flatten(&sol.h_pr_star);
    let err = ours.iter().zip(&oracle).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = oracle.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(err / scale <= 0.05, "relative distance to brute force {}", err / scale);
}

#[test]
fn zero_demand_gives_free_flow_minimum() {
    let net = build_nguyen_dupuis().with_uniform_demand(0.0, 0.0).unwrap();
    let g = TimeGrid::new(100.0, 175.0, 75).unwrap();
    let p = LoadingParams::benchmark();
    let zero = vec![Trajectory::zeros(g); net.paths().len()];
    let sol = solve_due(&zero, &net, &g, &p, &DueOptions::default()).unwrap();
    assert_eq!(sol.gap, 0.0);
    assert!(sol.h_pr_star.iter().all(|h| h.values().iter().all(|v| *v == 0.0)));
    for (w, v) in sol.v.iter().enumerate() {
        let mut best = f64::INFINITY;
        for path in net.paths_of(w) {
            let free: f64 = net.paths()[path].arcs.iter().map(|a| net.arc(*a).unwrap().delay_intercept).sum();
            for k in 0..g.n_intervals() {
                best = best.min(effective_delay(free, g.time(k) + 0.5 * g.dt(), &p));
            }
        }
        assert_relative_eq!(*v, best, max_relative = 1e-9);
    }
}

#[test]
fn gap_of_single_cell_assignment() {
    let net = toy(300.0);
    let g = TimeGrid::new(150.0, 160.0, 10).unwrap();
    let p = LoadingParams::benchmark();
    let zero = vec![Trajectory::zeros(g); 2];
    let mut h = zero.clone();
    h[0].values_mut()[3] = 300.0 / g.dt();
    let (gap, v) = due_gap(&h, &zero, &net, &g, &p).unwrap();
    let res = load_network(&h, &zero, &net, &g, &p).unwrap();
    let psi = flatten(res.effective_delays());
    let vmin = psi.iter().copied().fold(f64::INFINITY, f64::min);
    assert_relative_eq!(v[0], vmin, max_relative = 1e-12);
    let delta = res.effective_delays()[0].values()[3] - vmin;
    assert!(delta > 0.0);
    assert_relative_eq!(gap, 300.0 * delta, max_relative = 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gap_is_nonnegative(raw in prop::collection::vec(0.0f64..1.0, 20), q in 1.0f64..800.0) {
        let net = toy(q);
        let g = TimeGrid::new(150.0, 160.0, 10).unwrap();
        let p = LoadingParams::benchmark();
        let total: f64 = raw.iter().sum::<f64>().max(1e-9) * g.dt();
        let h: Vec<f64> = raw.iter().map(|x| x * q / total).collect();
        let zero = vec![Trajectory::zeros(g); 2];
        let (gap, _) = due_gap(&to_paths(&h, 2, g), &zero, &net, &g, &p).unwrap();
        prop_assert!(gap >= -1e-9);
    }
}

#[test]
fn best_gap_never_exceeds_start() {
    let (net, g, p) = toy_setup();
    let zero = vec![Trajectory::zeros(g); 2];
    let start = uniform_private_flows(&net, &g);
    let (g0, _) = due_gap(&start, &zero, &net, &g, &p).unwrap();
    let opts = DueOptions { max_iter: 5, gap_tol: Some(0.0), trace: true, ..Default::default() };
    let best = solve_due_from(&start, &zero, &net, &g, &p, &opts).unwrap_err().into_best_due().unwrap();
    assert!(!best.converged);
    assert!(best.gap <= g0);
    let trace_min = best.trace.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    assert_relative_eq!(best.gap, trace_min.min(g0), max_relative = 1e-12);
}

#[test]
fn benchmark_no_trucks_fast_scale() {
    let net = build_nguyen_dupuis().with_uniform_demand(1500.0, 0.0).unwrap();
    let g = TimeGrid::new(100.0, 175.0, 75).unwrap();
    let p = LoadingParams::benchmark();
    let zero = vec![Trajectory::zeros(g); net.paths().len()];
    let sol = solve_due(&zero, &net, &g, &p, &DueOptions::default()).unwrap();
    assert!(sol.gap <= sol.gap_tol);
    let threshold = 1e-2 * 1500.0 / (g.tf() - g.t0());
    for (path, h) in sol.h_pr_star.iter().enumerate() {
        let v = sol.v[net.paths()[path].od];
        for (k, x) in h.values().iter().enumerate() {
            if *x > threshold {
                let psi = sol.psi[path].values()[k];
                assert!((psi - v).abs() / v <= 0.05, "path {path} cell {k}: {psi} vs {v}");
            }
        }
    }
    for (w, od) in net.od_pairs().iter().enumerate() {
        let total: f64 = net.paths_of(w).map(|q| sol.h_pr_star[q].integrate()).sum();
        assert_relative_eq!(total, od.demand_private, max_relative = 1e-9);
    }
}
