//! CSV and JSON emission.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use stackfreight_core::dnl::{Class, LoadingResult};
use stackfreight_core::due::DueTraceRow;
use stackfreight_core::mpcc::MpccTraceRow;
use stackfreight_core::net::Network;
use stackfreight_core::traj::{TimeGrid, Trajectory};

use crate::error::CliError;

/// One row per interval: `t_k` followed by one column per trajectory.
pub fn write_trajectories<W: Write>(out: W, names: &[String], trajs: &[Trajectory]) -> Result<(), CliError> {
    if names.len() != trajs.len() {
        return Err(CliError::Config("one column name per trajectory".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let Some(first) = trajs.first() else {
        w.flush()?;
        return Ok(());
    };
    let grid = *first.grid();
    for k in 0..grid.n_intervals() {
        let mut row = vec![grid.time(k).to_string()];
        row.extend(trajs.iter().map(|t| t.values()[k].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_trajectories`] on a known grid.
pub fn read_trajectories<R: Read>(input: R, grid: &TimeGrid) -> Result<(Vec<String>, Vec<Trajectory>), CliError> {
    let mut r = csv::Reader::from_reader(input);
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut cols = vec![Vec::with_capacity(grid.n_intervals()); names.len()];
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| CliError::Config(format!("bad number {s:?}: {e}")));
        let t = parse(&rec[0])?;
        if k >= grid.n_intervals() || t != grid.time(k) {
            return Err(CliError::Config(format!("row {k} has t = {t}, not on the grid")));
        }
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(parse(&rec[c + 1])?);
        }
    }
    let trajs = cols
        .into_iter()
        .map(|v| Trajectory::from_values(*grid, v).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((names, trajs))
}

#[derive(Debug, Serialize)]
struct SeriesRow<'a> {
    t: f64,
    path_id: usize,
    arcs: &'a str,
    class: &'static str,
    h: f64,
    x_first_arc: f64,
    d: f64,
    psi: f64,
}

/// Loading export: `(t, path_id, arcs, class, h, x_first_arc, D_p, Ψ_p)`
/// for every path, class and interval.
pub fn write_loading<W: Write>(out: W, network: &Network, res: &LoadingResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let grid = res.grid();
    for class in Class::ALL {
        for (p, path) in network.paths().iter().enumerate() {
            let key = path.key();
            for k in 0..grid.n_intervals() {
                w.serialize(SeriesRow {
                    t: grid.time(k),
                    path_id: p,
                    arcs: &key,
                    class: class.as_str(),
                    h: res.inflow_rate(class, p, k),
                    x_first_arc: res.state_at(k, class, p, 0).0,
                    d: res.path_delays()[p].values()[k],
                    psi: res.effective_delays()[p].values()[k],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_due_trace<W: Write>(out: W, trace: &[DueTraceRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "gap", "gamma", "flow_change"])?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.gap.to_string(),
            r.gamma.to_string(),
            r.flow_change.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mpcc_trace<W: Write>(out: W, trace: &[MpccTraceRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "outer", "m", "inner", "gamma", "objective", "truck_cost", "comp_residual", "step_norm", "kind",
    ])?;
    for r in trace {
        w.write_record([
            r.outer.to_string(),
            r.m.to_string(),
            r.inner.to_string(),
            r.gamma.to_string(),
            r.objective.to_string(),
            r.truck_cost.to_string(),
            r.comp_residual.to_string(),
            r.step_norm.to_string(),
            r.kind.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Column names for per-path trajectory files.
pub fn path_names(network: &Network) -> Vec<String> {
    network.paths().iter().map(|p| format!("p{}:{}", p.id, p.key())).collect()
}
