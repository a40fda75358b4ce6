use std::path::Path;
use std::process::Command;

use approx::assert_relative_eq;
use serde_json::Value;
use stackfreight::config::{ArcConfig, CustomNetwork, NetworkSource, OdConfig};
use stackfreight::experiments::{braess_sweep, compare_cases, emit_outputs, run_due, run_scenario};
use stackfreight::io::{read_trajectories, write_trajectories};
use stackfreight::{CliError, Scale, ScenarioConfig};
use stackfreight_core::traj::{TimeGrid, Trajectory};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stackfreight"))
}

/// Two parallel arcs feeding a shared exit arc.
fn toy_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::scenario(2, Scale::Fast).unwrap();
    cfg.id = "toy".into();
    let arc = |id, tail, head, intercept| ArcConfig { id, tail, head, intercept, slope: 1e-3 };
    cfg.network = NetworkSource::Custom(CustomNetwork {
        nodes: vec![1, 2, 3],
        arcs: vec![arc(1, 1, 2, 2.0), arc(2, 1, 2, 2.5), arc(3, 2, 3, 1.0)],
        od_pairs: vec![OdConfig { origin: 1, destination: 3 }],
        paths: None,
        max_paths: 20,
    });
    cfg.grid.t0 = 150.0;
    cfg.grid.tf = 160.0;
    cfg.grid.intervals = Some(10);
    cfg.params.desired_arrival = 158.0;
    cfg.demand.private = 2000.0;
    cfg.demand.truck = 600.0;
    cfg
}

fn summary(dir: &Path, cfg: &ScenarioConfig) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("{}.summary.json", cfg.file_stem()))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    for cfg in [ScenarioConfig::scenario(1, Scale::Full).unwrap(), toy_config()] {
        let text = cfg.to_toml_string().unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());
    }
}

#[test]
fn hash_ignores_output_dir_only() {
    let a = ScenarioConfig::scenario(3, Scale::Fast).unwrap();
    let mut b = a.clone();
    b.output_dir = Some("elsewhere".into());
    assert_eq!(a.content_hash(), b.content_hash());
    b.seed = 9;
    assert_ne!(a.content_hash(), b.content_hash());
    assert_eq!(a.content_hash().len(), 12);
    assert!(a.file_stem().starts_with("scenario-3-"));
}

#[test]
fn partial_config_takes_defaults() {
    let cfg = ScenarioConfig::from_toml_str("id = \"x\"\nscale = \"full\"\n[demand]\ntruck = 500.0\n").unwrap();
    assert_eq!(cfg.grid().unwrap().n_intervals(), 300);
    let net = cfg.network().unwrap();
    assert!(net.od_pairs().iter().all(|o| o.demand_truck == 500.0 && o.demand_private == 15000.0));
    assert!(matches!(ScenarioConfig::from_toml_str("bogus = 1"), Err(CliError::Config(_))));
    assert!(ScenarioConfig::scenario(5, Scale::Fast).is_err());
}

#[test]
fn fast_scale_divides_demand() {
    let net = ScenarioConfig::scenario(1, Scale::Fast).unwrap().network().unwrap();
    for od in net.od_pairs() {
        assert_relative_eq!(od.demand_private, 1500.0);
        assert_relative_eq!(od.demand_truck, 500.0);
    }
}

#[test]
fn trajectory_csv_round_trip_is_bit_exact() {
    let g = TimeGrid::new(100.0, 175.0, 75).unwrap();
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        f64::from_bits(state >> 12 | 0x3ff0_0000_0000_0000) * 1e3 - 1e3 + 1e-300
    };
    let trajs: Vec<Trajectory> = (0..3)
        .map(|_| Trajectory::from_values(g, (0..75).map(|_| next()).collect()).unwrap())
        .collect();
    let names = vec!["a".to_string(), "p1:1-5".into(), "c".into()];
    let mut buf = Vec::new();
    write_trajectories(&mut buf, &names, &trajs).unwrap();
    let (n2, t2) = read_trajectories(buf.as_slice(), &g).unwrap();
    assert_eq!(n2, names);
    for (a, b) in trajs.iter().zip(&t2) {
        let bits = |t: &Trajectory| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let wrong = TimeGrid::new(100.0, 175.0, 150).unwrap();
    assert!(read_trajectories(buf.as_slice(), &wrong).is_err());
}

#[test]
fn scenario_four_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::scenario(4, Scale::Fast).unwrap();
    let mut out = run_scenario(&cfg, false).unwrap();
    let files = emit_outputs(&mut out, &cfg, dir.path()).unwrap();
    for f in &files {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(files.last().unwrap().ends_with(".summary.json"));

    let g = cfg.grid().unwrap();
    let truck = std::fs::File::open(dir.path().join(format!("{}.truck.csv", cfg.file_stem()))).unwrap();
    let (_, h_tr) = read_trajectories(truck, &g).unwrap();
    assert!(h_tr.iter().all(|t| t.values().iter().all(|v| *v == 0.0)));

    let s = summary(dir.path(), &cfg);
    assert_eq!(s["truck_cost"].as_f64(), Some(0.0));
    assert!(s["mpcc"].is_null() && s["comp_residual"].is_null());
    assert!(s["due_gap"].as_f64().unwrap() <= s["due_gap_tol"].as_f64().unwrap());

    // Σ_p ∫ Ψ h dt over both classes, from the emitted series.
    let mut rdr = csv::Reader::from_path(dir.path().join(format!("{}.series.csv", cfg.file_stem()))).unwrap();
    let mut total = 0.0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let h: f64 = rec[4].parse().unwrap();
        let psi: f64 = rec[7].parse().unwrap();
        total += h * psi * g.dt();
    }
    let reported = s["total_social_cost"].as_f64().unwrap();
    assert_relative_eq!(total, reported, max_relative = 1e-9);
}

#[test]
fn repeated_runs_give_identical_summaries() {
    let cfg = toy_config();
    let mut texts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut out = run_scenario(&cfg, false).unwrap();
        emit_outputs(&mut out, &cfg, dir.path()).unwrap();
        let mut s = summary(dir.path(), &cfg);
        s.as_object_mut().unwrap().remove("wall_clock_seconds");
        texts.push(serde_json::to_string_pretty(&s).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn toy_total_cost_matches_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let mut out = run_scenario(&cfg, false).unwrap();
    emit_outputs(&mut out, &cfg, dir.path()).unwrap();
    let s = summary(dir.path(), &cfg);
    let dt = cfg.grid().unwrap().dt();
    let mut rdr = csv::Reader::from_path(dir.path().join(format!("{}.series.csv", cfg.file_stem()))).unwrap();
    let (mut pr, mut tr) = (0.0, 0.0);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v = rec[4].parse::<f64>().unwrap() * rec[7].parse::<f64>().unwrap() * dt;
        if &rec[3] == "tr" {
            tr += v;
        } else {
            pr += v;
        }
    }
    assert_relative_eq!(tr, s["truck_cost"].as_f64().unwrap(), max_relative = 1e-9);
    assert_relative_eq!(pr + tr, s["total_social_cost"].as_f64().unwrap(), max_relative = 1e-9);
    assert!(s["mu"].as_array().is_some_and(|m| m.len() == 1));
}

#[test]
fn compare_without_trucks_is_zero() {
    let mut cfg = toy_config();
    cfg.demand.truck = 0.0;
    let c = compare_cases(&cfg, false).unwrap();
    assert_eq!((c.z0, c.z1, c.reduction), (0.0, 0.0, 0.0));
}

#[test]
fn compare_never_reports_a_worse_schedule() {
    let c = compare_cases(&toy_config(), false).unwrap();
    assert!(c.z0 > 0.0);
    assert!(c.z1 <= c.z0);
    assert_relative_eq!(c.reduction, (c.z0 - c.z1) / c.z0);
}

#[test]
fn sweep_keeps_trucks_routed() {
    let cfg = toy_config();
    let s = braess_sweep(&cfg, None, false).unwrap();
    assert_eq!(s.rows.len(), 3);
    let skipped: Vec<u32> = s.rows.iter().filter(|r| r.note.is_some()).map(|r| r.arc).collect();
    assert_eq!(skipped, vec![3]);
    for r in s.rows.iter().filter(|r| r.note.is_none()) {
        assert!(r.truck_routing_error.unwrap() <= 1e-8, "{r:?}");
        assert_relative_eq!(r.delta_total.unwrap(), r.total_social_cost.unwrap() - s.baseline_total_cost);
        assert_eq!(r.paradox, r.delta_total.unwrap() < 0.0);
    }
    let deltas: Vec<f64> = s.rows.iter().filter_map(|r| r.delta_total).collect();
    assert!(deltas.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn due_holds_trucks_at_case_one_schedule() {
    let cfg = toy_config();
    let out = run_due(&cfg, false).unwrap();
    let routed: f64 = out.evaluation.h_tr.iter().map(|t| t.integrate()).sum();
    assert_relative_eq!(routed, 60.0, max_relative = 1e-12);
    assert!(out.report.mpcc.is_none());
    assert!(out.report.truck_cost > 0.0);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("toy.toml");
    std::fs::write(&cfg_path, toy_config().to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("out");

    let ok = bin().args(["load", "--config"]).arg(&cfg_path).arg("--out").arg(&out).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let stem = toy_config().file_stem();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join(format!("{stem}.load.json"))).unwrap()).unwrap();
    assert_eq!(report["fifo_passed"], Value::Bool(true));

    let mut starved = toy_config();
    starved.due.max_iter = 1;
    let starved_path = dir.path().join("starved.toml");
    std::fs::write(&starved_path, starved.to_toml_string().unwrap()).unwrap();
    let r = bin().args(["due", "--config"]).arg(&starved_path).arg("--out").arg(&out).output().unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(out.join(format!("{}.summary.json", starved.file_stem())).exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "scale = \"medium\"\n").unwrap();
    let r = bin().args(["due", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(r.status.code(), Some(2));

    let r = bin().args(["load", "--config"]).arg(&cfg_path).args(["--block", "99"]).arg("--out").arg(&out).output().unwrap();
    assert_eq!(r.status.code(), Some(2));

    let r = bin().args(["load", "7"]).output().unwrap();
    assert_eq!(r.status.code(), Some(2));

    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let r = bin().args(["load", "--config"]).arg(&cfg_path).arg("--out").arg(file.join("sub")).output().unwrap();
    assert_eq!(r.status.code(), Some(3));

    let r = bin().args(["due", "--config"]).arg(dir.path().join("missing.toml")).output().unwrap();
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn block_flag_closes_arcs_for_trucks() {
    let mut cfg = toy_config();
    cfg.blocked_arcs = vec![1];
    let net = cfg.network().unwrap();
    for p in net.paths() {
        assert_eq!(p.truck_allowed, !p.contains(stackfreight_core::net::ArcId(1)));
    }
    cfg.blocked_arcs = vec![3];
    assert!(cfg.network().is_err());
}
