//! Trajectory datasets: analytic generators, the on-disk container and
//! normalization statistics.

mod chain;
mod format;
mod lattice;
mod ode;

pub use chain::{chain_energy, generate_chain, ChainParams};
pub use format::{
    decode_dataset, encode_dataset,
    load_dataset, read_container, save_dataset, write_container, DATASET_MAGIC, DATASET_VERSION,
};
pub use lattice::{generate_lattice, lattice_energy, LatticeParams};
pub use ode::rk4_step;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_edges, edge_features, Edge, MinMax, NormStats, SimGraph};
use crate::layout::StateLayout;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum Connectivity {
    /// Edges built once from the initial positions of each trajectory.
    Static { radius: f64 },
    /// Edges rebuilt from the current positions at every step.
    Dynamic { radius: f64 },
}

impl Connectivity {
    pub fn radius(&self) -> f64 {
        match *self {
            Connectivity::Static { radius } | Connectivity::Dynamic { radius } => radius,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, Connectivity::Dynamic { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dt: f64,
    pub n_steps: usize,
    pub layout: StateLayout,
    pub n_types: usize,
    pub connectivity: Connectivity,
    /// Generator name and parameters, free-form.
    pub generator: serde_json::Value,
}

impl DatasetMeta {
    pub fn n_dof(&self) -> usize {
        self.layout.n_dof()
    }

    pub fn d_space(&self) -> usize {
        self.layout.d_space
    }
}

/// One simulated trajectory: `n_steps + 1` snapshots of `n_v` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub n_v: usize,
    /// `[(n_steps+1) × n_v × n_dof]`.
    pub states: Vec<f64>,
    /// `[n_v × d_space]`, constant over the trajectory.
    pub loads: Vec<f64>,
    pub node_types: Vec<usize>,
}

impl Trajectory {
    pub fn snapshot(&self, t: usize, n_dof: usize) -> &[f64] {
        let w = self.n_v * n_dof;
        &self.states[t * w..(t + 1) * w]
    }

    pub fn n_snapshots(&self, n_dof: usize) -> usize {
        self.states.len() / (self.n_v * n_dof).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn validate(&self) -> Result<()> {
        self.meta.layout.validate()?;
        if !(self.meta.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.meta.dt)));
        }
        let n_dof = self.meta.n_dof();
        let d = self.meta.d_space();
        for (k, tr) in self.trajectories.iter().enumerate() {
            let expected = (self.meta.n_steps + 1) * tr.n_v * n_dof;
            if tr.states.len() != expected {
                return Err(Error::HeaderMismatch(format!(
                    "trajectory {k}: {} state values, expected {expected}",
                    tr.states.len()
                )));
            }
            if tr.loads.len() != tr.n_v * d || tr.node_types.len() != tr.n_v {
                return Err(Error::HeaderMismatch(format!(
                    "trajectory {k}: loads/node types do not match n_v = {}",
                    tr.n_v
                )));
            }
            if let Some(&t) = tr.node_types.iter().find(|&&t| t >= self.meta.n_types) {
                return Err(Error::HeaderMismatch(format!(
                    "trajectory {k}: node type {t} ≥ n_types {}",
                    self.meta.n_types
                )));
            }
            if tr.states.iter().chain(&tr.loads).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("trajectory {k}")));
            }
        }
        Ok(())
    }

    pub fn n_dof(&self) -> usize {
        self.meta.n_dof()
    }

    /// Edges in force at step `t` of trajectory `k`.
    pub fn edges_at(&self, k: usize, t: usize) -> Result<Vec<Edge>> {
        let tr = &self.trajectories[k];
        let step = if self.meta.connectivity.is_dynamic() { t } else { 0 };
        let positions = positions_of(tr.snapshot(step, self.n_dof()), tr.n_v, &self.meta.layout);
        build_edges(&positions, self.meta.d_space(), self.meta.connectivity.radius())
    }

    /// Graph of trajectory `k` at step `t`.
    pub fn graph_at(&self, k: usize, t: usize) -> Result<SimGraph> {
        let tr = &self.trajectories[k];
        SimGraph::new(
            &self.meta.layout,
            tr.snapshot(t, self.n_dof()).to_vec(),
            self.edges_at(k, t)?,
            tr.node_types.clone(),
            self.meta.n_types,
            tr.loads.clone(),
            Some(self.meta.connectivity.radius()),
        )
    }
}

pub fn positions_of(snapshot: &[f64], n_v: usize, layout: &StateLayout) -> Vec<f64> {
    let n_dof = layout.n_dof();
    (0..n_v)
        .flat_map(|i| snapshot[i * n_dof..i * n_dof + layout.d_space].to_vec())
        .collect()
}

/// Per-component statistics over every snapshot and node of the training
/// trajectories, plus edge-feature ranges, rate scales and load scale.
pub fn compute_norm_stats(ds: &TrajectoryDataset, train: &[usize]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Config("normalization needs a nonempty training split".into()));
    }
    let n_dof = ds.n_dof();
    let d = ds.meta.d_space();
    let dt = ds.meta.dt;
    let mut state = MinMax::empty(n_dof);
    let mut edge = MinMax::empty(d + 1);
    let mut max_rate = vec![0.0f64; n_dof];
    let mut load_scale = 0.0f64;
    let mut saw_edge = false;

    for &k in train {
        let tr = ds.trajectories.get(k).ok_or_else(|| {
            Error::Contract(format!("training index {k} out of range"))
        })?;
        for f in &tr.loads {
            load_scale = load_scale.max(f.abs());
        }
        let static_edges = if ds.meta.connectivity.is_dynamic() {
            None
        } else {
            Some(ds.edges_at(k, 0)?)
        };
        for t in 0..=ds.meta.n_steps {
            let snap = tr.snapshot(t, n_dof);
            for row in snap.chunks(n_dof) {
                state.observe(row);
            }
            if t < ds.meta.n_steps {
                let next = tr.snapshot(t + 1, n_dof);
                for (idx, (a, b)) in snap.iter().zip(next).enumerate() {
                    let r = ((b - a) / dt).abs();
                    max_rate[idx % n_dof] = max_rate[idx % n_dof].max(r);
                }
            }
            let dynamic_edges;
            let edges = match &static_edges {
                Some(e) => e,
                None => {
                    dynamic_edges = ds.edges_at(k, t)?;
                    &dynamic_edges
                }
            };
            for &(i, j) in edges {
                let (rel, mag) = edge_features(&snap[i * n_dof..i * n_dof + d], &snap[j * n_dof..j * n_dof + d]);
                let mut row = rel;
                row.push(mag);
                edge.observe(&row);
                saw_edge = true;
            }
        }
    }
    if !saw_edge {
        edge = MinMax {
            min: vec![0.0; d + 1],
            max: vec![0.0; d + 1],
        };
    }
    if max_rate.iter().any(|r| !r.is_finite()) || state.min.iter().chain(&state.max).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("normalization statistics".into()));
    }
    let rate_scale = max_rate.iter().map(|&r| if r > 0.0 { r } else { 1.0 }).collect();
    Ok(NormStats {
        state,
        edge,
        rate_scale,
        load_scale: if load_scale > 0.0 { load_scale } else { 1.0 },
    })
}

/// Energy bookkeeping of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationSummary {
    pub generator: String,
    /// Largest `|E(t) − E(0)|` relative to the trajectory's energy scale.
    pub max_relative_drift: f64,
    /// Whether `Σ e_i` never decreased between consecutive steps.
    pub internal_energy_monotone: bool,
    pub damping: f64,
}

/// Recomputes the total energy of every stored snapshot from the generator
/// parameters recorded in the metadata. `None` for external datasets.
pub fn conservation_summary(ds: &TrajectoryDataset) -> Result<Option<ConservationSummary>> {
    let g = &ds.meta.generator;
    let name = g.get("name").and_then(|n| n.as_str()).unwrap_or_default();
    let params = g.get("params").cloned().unwrap_or_default();
    let n_dof = ds.n_dof();
    let e_col = n_dof - 1;
    // (total, scale) per snapshot
    let energy: Box<dyn Fn(&Trajectory, usize) -> (f64, f64)> = match name {
        "chain" => {
            let p: ChainParams = serde_json::from_value(params)?;
            Box::new(move |tr, t| {
                let e = chain_energy(&p, tr.snapshot(t, n_dof));
                (e, e.abs())
            })
        }
        "lattice" => {
            let p: LatticeParams = serde_json::from_value(params)?;
            Box::new(move |tr, t| {
                let snap = tr.snapshot(t, n_dof);
                let e = lattice_energy(&p, snap, &tr.loads);
                // Scale without the load potential, which can cancel the rest.
                let stored = lattice_energy(&p, snap, &vec![0.0; tr.loads.len()]);
                (e, e.abs().max(stored.abs()))
            })
        }
        _ => return Ok(None),
    };
    let damping = g["params"]["damping"].as_f64().unwrap_or(0.0);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for tr in &ds.trajectories {
        let (e0, _) = energy(tr, 0);
        let mut scale = f64::MIN_POSITIVE;
        let mut drift = 0.0f64;
        let mut prev_internal = f64::NEG_INFINITY;
        for t in 0..=ds.meta.n_steps {
            let (e, s) = energy(tr, t);
            scale = scale.max(s);
            drift = drift.max((e - e0).abs());
            let internal: f64 = tr.snapshot(t, n_dof).chunks(n_dof).map(|z| z[e_col]).sum();
            monotone &= internal >= prev_internal;
            prev_internal = internal;
        }
        worst = worst.max(drift / scale);
    }
    Ok(Some(ConservationSummary {
        generator: name.to_string(),
        max_relative_drift: worst,
        internal_energy_monotone: monotone,
        damping,
    }))
}
