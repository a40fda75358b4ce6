//! Scenario configuration (TOML) and its translation into solver inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stackfreight_core::dnl::{IntegratorOptions, LoadingParams};
use stackfreight_core::due::{DueMethod, DueOptions};
use stackfreight_core::mpcc::PenaltyConfig;
use stackfreight_core::net::{build_nguyen_dupuis, Arc, ArcId, Network, NodeId, OdPair};
use stackfreight_core::traj::TimeGrid;

use crate::error::CliError;

/// Private demand per OD pair in every benchmark scenario (full scale).
pub const SCENARIO_PRIVATE_DEMAND: f64 = 15000.0;

/// Truck demand per OD pair for scenarios 1 to 4 (full scale).
pub const SCENARIO_TRUCK_DEMAND: [f64; 4] = [5000.0, 2500.0, 500.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 75 intervals, demands divided by 10.
    #[default]
    Fast,
    /// 300 intervals, demands as given.
    Full,
}

impl Scale {
    pub fn demand_factor(self) -> f64 {
        match self {
            Scale::Fast => 0.1,
            Scale::Full => 1.0,
        }
    }

    pub fn intervals(self) -> usize {
        match self {
            Scale::Fast => 75,
            Scale::Full => 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcConfig {
    pub id: u32,
    pub tail: u32,
    pub head: u32,
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdConfig {
    pub origin: u32,
    pub destination: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomNetwork {
    pub nodes: Vec<u32>,
    pub arcs: Vec<ArcConfig>,
    pub od_pairs: Vec<OdConfig>,
    /// Arc sequences per OD pair; enumerated when absent.
    #[serde(default)]
    pub paths: Option<Vec<Vec<Vec<u32>>>>,
    #[serde(default = "default_max_paths")]
    pub max_paths: usize,
}

fn default_max_paths() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum NetworkSource {
    /// Nguyen–Dupuis network with its four OD pairs.
    #[default]
    Benchmark,
    Custom(CustomNetwork),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t0: f64,
    pub tf: f64,
    /// Defaults to the scale's interval count.
    pub intervals: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t0: 100.0,
            tf: 175.0,
            intervals: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub alpha: f64,
    pub beta: f64,
    pub desired_arrival: f64,
    pub substeps: usize,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        let p = LoadingParams::benchmark();
        Self {
            alpha: p.alpha,
            beta: p.beta,
            desired_arrival: p.desired_arrival,
            substeps: p.integrator.substeps,
        }
    }
}

/// Full-scale demands; the scale factor is applied on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemandConfig {
    pub private: f64,
    pub truck: f64,
    /// `[private, truck]` per OD pair, overriding the uniform values.
    pub per_od: Option<Vec<[f64; 2]>>,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            private: SCENARIO_PRIVATE_DEMAND,
            truck: SCENARIO_TRUCK_DEMAND[1],
            per_od: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DueMethodConfig {
    Projection,
    Extragradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DueConfig {
    pub method: DueMethodConfig,
    pub gamma: f64,
    pub gap_tol: Option<f64>,
    pub max_iter: usize,
}

impl Default for DueConfig {
    fn default() -> Self {
        let d = DueOptions::default();
        Self {
            method: DueMethodConfig::Extragradient,
            gamma: d.gamma,
            gap_tol: d.gap_tol,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyToml {
    pub m0: f64,
    pub c: f64,
    pub m_cap: f64,
    pub gamma0: f64,
    pub eps1: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub steps_per_penalty: usize,
    pub fd_step: f64,
    pub implicit_steps: usize,
    pub implicit_trials: usize,
}

impl Default for PenaltyToml {
    fn default() -> Self {
        let p = PenaltyConfig::default();
        Self {
            m0: p.m0,
            c: p.c,
            m_cap: p.m_cap,
            gamma0: p.gamma0,
            eps1: p.eps1,
            max_outer: p.max_outer,
            max_inner: p.max_inner,
            steps_per_penalty: p.steps_per_penalty,
            fd_step: p.fd_step,
            implicit_steps: p.implicit_steps,
            implicit_trials: p.implicit_trials,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub id: String,
    pub scale: Scale,
    pub network: NetworkSource,
    pub grid: GridConfig,
    pub params: ParamsConfig,
    pub demand: DemandConfig,
    /// Arcs closed to trucks.
    pub blocked_arcs: Vec<u32>,
    pub due: DueConfig,
    pub penalty: PenaltyToml,
    pub seed: u64,
    /// Not part of the content hash.
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::scenario(2, Scale::Fast).expect("scenario 2 exists")
    }
}

impl ScenarioConfig {
    /// Benchmark scenario `n` in `1..=4`.
    pub fn scenario(n: u8, scale: Scale) -> Result<Self, CliError> {
        if !(1..=4).contains(&n) {
            return Err(CliError::Config(format!("scenario must be 1..=4, got {n}")));
        }
        Ok(Self {
            id: format!("scenario-{n}"),
            scale,
            network: NetworkSource::Benchmark,
            grid: GridConfig::default(),
            params: ParamsConfig::default(),
            demand: DemandConfig {
                private: SCENARIO_PRIVATE_DEMAND,
                truck: SCENARIO_TRUCK_DEMAND[n as usize - 1],
                per_od: None,
            },
            blocked_arcs: Vec::new(),
            due: DueConfig::default(),
            penalty: PenaltyToml::default(),
            seed: 0,
            output_dir: None,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form, with
    /// the output directory cleared.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(bytes))[..12].to_string()
    }

    /// `<id>-<hash>`, used as the stem of every output file.
    pub fn file_stem(&self) -> String {
        let id: String = self
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{id}-{}", self.content_hash())
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        let n = self.grid.intervals.unwrap_or(self.scale.intervals());
        Ok(TimeGrid::new(self.grid.t0, self.grid.tf, n)?)
    }

    pub fn params(&self) -> LoadingParams {
        LoadingParams {
            beta: self.params.beta,
            alpha: self.params.alpha,
            desired_arrival: self.params.desired_arrival,
            initial_volumes: None,
            integrator: IntegratorOptions {
                substeps: self.params.substeps,
                ..IntegratorOptions::default()
            },
        }
    }

    pub fn due_options(&self) -> DueOptions {
        DueOptions {
            method: match self.due.method {
                DueMethodConfig::Projection => DueMethod::Projection,
                DueMethodConfig::Extragradient => DueMethod::Extragradient,
            },
            gamma: self.due.gamma,
            gap_tol: self.due.gap_tol,
            max_iter: self.due.max_iter,
            ..DueOptions::default()
        }
    }

    pub fn penalty_config(&self) -> PenaltyConfig {
        let p = &self.penalty;
        PenaltyConfig {
            m0: p.m0,
            c: p.c,
            m_cap: p.m_cap,
            gamma0: p.gamma0,
            eps1: p.eps1,
            max_outer: p.max_outer,
            max_inner: p.max_inner,
            steps_per_penalty: p.steps_per_penalty,
            fd_step: p.fd_step,
            implicit_steps: p.implicit_steps,
            implicit_trials: p.implicit_trials,
            due: self.due_options(),
            ..PenaltyConfig::default()
        }
    }

    /// Network without demands or closures.
    pub fn base_network(&self) -> Result<Network, CliError> {
        match &self.network {
            NetworkSource::Benchmark => Ok(build_nguyen_dupuis()),
            NetworkSource::Custom(c) => {
                let nodes = c.nodes.iter().copied().map(NodeId).collect();
                let arcs = c
                    .arcs
                    .iter()
                    .map(|a| Arc::new(a.id, a.tail, a.head, a.intercept, a.slope))
                    .collect();
                let ods = c.od_pairs.iter().map(|o| OdPair::new(o.origin, o.destination, 0.0, 0.0)).collect();
                let net = match &c.paths {
                    Some(paths) => Network::new(
                        nodes,
                        arcs,
                        ods,
                        paths
                            .iter()
                            .map(|g| g.iter().map(|p| p.iter().copied().map(ArcId).collect()).collect())
                            .collect(),
                    )?,
                    None => Network::with_enumerated_paths(nodes, arcs, ods, c.max_paths)?,
                };
                Ok(net)
            }
        }
    }

    /// Scaled per-OD `(private, truck)` demands.
    pub fn demands(&self, n_od: usize) -> Result<Vec<(f64, f64)>, CliError> {
        let f = self.scale.demand_factor();
        match &self.demand.per_od {
            Some(rows) if rows.len() != n_od => Err(CliError::Config(format!(
                "{} demand rows for {n_od} OD pairs",
                rows.len()
            ))),
            Some(rows) => Ok(rows.iter().map(|[p, t]| (p * f, t * f)).collect()),
            None => Ok(vec![(self.demand.private * f, self.demand.truck * f); n_od]),
        }
    }

    /// Network with scaled demands and the configured truck closures.
    pub fn network(&self) -> Result<Network, CliError> {
        let base = self.base_network()?;
        let mut net = base.with_demands(&self.demands(base.od_pairs().len())?)?;
        for &arc in &self.blocked_arcs {
            net = net.block_arc_for_trucks(ArcId(arc))?;
        }
        Ok(net)
    }

    pub fn has_trucks(&self) -> Result<bool, CliError> {
        Ok(self.network()?.od_pairs().iter().any(|o| o.demand_truck > 0.0))
    }
}
