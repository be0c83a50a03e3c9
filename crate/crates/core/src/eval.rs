//! Rollouts, error metrics, per-variable evaluation tables and the memory
//! scaling report.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Connectivity, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::graph::{assemble_features, NormStats, SimGraph};
use crate::layout::StateLayout;
use crate::metriplectic::{energy_entropy_rates, euler_step, GradientField};
use crate::model::Model;
use crate::nn::{Tape, TapeStats};
use crate::training::ground_truth_zdot;

/// Rate produced by a model for the current graph.
pub struct StepOutput {
    /// Physical `ż`, `[n_v × n_dof]`.
    pub zdot: Vec<f64>,
    /// Energy/entropy gradients and the rate in the same coordinates, for
    /// diagnostics. Absent for models without thermodynamic structure.
    pub diagnostics: Option<(GradientField, Vec<f64>)>,
}

/// Anything that maps a graph at rollout step `step` to a time derivative.
pub trait ZdotModel: Sync {
    fn zdot(&self, graph: &SimGraph, step: usize) -> Result<StepOutput>;
}

/// A trained network plus its normalization.
pub struct LearnedModel<'a> {
    pub model: &'a Model,
    pub norm: &'a NormStats,
}

impl ZdotModel for LearnedModel<'_> {
    fn zdot(&self, graph: &SimGraph, _step: usize) -> Result<StepOutput> {
        let feats = assemble_features(graph, self.norm)?;
        let pred = self.model.predict(&feats, &graph.edges)?;
        let zdot = self.norm.unscale_rates(&pred.zdot);
        // Gradients live in the network's rate-scaled coordinates, so the
        // rate paired with them is the unscaled network output.
        let diagnostics = pred.outputs.map(|o| (o.gradients(), pred.zdot));
        Ok(StepOutput { zdot, diagnostics })
    }
}

/// Replays the finite-difference rates of a stored trajectory.
pub struct GroundTruthRates<'a> {
    pub dataset: &'a TrajectoryDataset,
    pub trajectory: usize,
    pub start: usize,
}

impl ZdotModel for GroundTruthRates<'_> {
    fn zdot(&self, _graph: &SimGraph, step: usize) -> Result<StepOutput> {
        let t = self.start + step;
        let tr = &self.dataset.trajectories[self.trajectory];
        let n_dof = self.dataset.n_dof();
        if t >= self.dataset.meta.n_steps {
            return Err(Error::Contract(format!(
                "ground-truth rates end at step {}, asked for {t}",
                self.dataset.meta.n_steps
            )));
        }
        Ok(StepOutput {
            zdot: ground_truth_zdot(tr.snapshot(t, n_dof), tr.snapshot(t + 1, n_dof), self.dataset.meta.dt)?,
            diagnostics: None,
        })
    }
}

/// Predicts `ż = 0` everywhere.
pub struct ZeroModel;

impl ZdotModel for ZeroModel {
    fn zdot(&self, graph: &SimGraph, _step: usize) -> Result<StepOutput> {
        Ok(StepOutput {
            zdot: vec![0.0; graph.states.len()],
            diagnostics: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub n_v: usize,
    pub n_dof: usize,
    /// `[(steps_completed+1) × n_v × n_dof]`; step 0 is the initial state.
    pub states: Vec<f64>,
    /// Per completed step; `None` when the model has no thermodynamic heads.
    pub de_dt: Vec<Option<f64>>,
    pub ds_dt: Vec<Option<f64>>,
    /// Index of the first state that could not be produced.
    pub divergence_step: Option<usize>,
}

impl RolloutResult {
    pub fn n_states(&self) -> usize {
        self.states.len() / (self.n_v * self.n_dof).max(1)
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let w = self.n_v * self.n_dof;
        &self.states[t * w..(t + 1) * w]
    }

    pub fn diverged(&self) -> bool {
        self.divergence_step.is_some()
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::NonFinite(_))
}

/// Autoregressive forward-Euler rollout. Connectivity is rebuilt every step
/// for the dynamic policy; loads and node types stay those of `initial`.
pub fn rollout(
    model: &dyn ZdotModel,
    initial: &SimGraph,
    connectivity: Connectivity,
    n_steps: usize,
    dt: f64,
) -> Result<RolloutResult> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let mut result = RolloutResult {
        n_v: initial.n_v,
        n_dof: initial.n_dof,
        states: initial.states.clone(),
        de_dt: Vec::with_capacity(n_steps),
        ds_dt: Vec::with_capacity(n_steps),
        divergence_step: None,
    };
    let mut graph = initial.clone();
    for step in 0..n_steps {
        let attempt = (|| -> Result<(Vec<f64>, Option<(f64, f64)>)> {
            if step > 0 && connectivity.is_dynamic() {
                graph = graph.rebuild_connectivity(connectivity.radius())?;
            }
            let out = model.zdot(&graph, step)?;
            let rates = match &out.diagnostics {
                Some((g, r)) => Some(energy_entropy_rates(g, r)?),
                None => None,
            };
            let next = euler_step(&graph.states, &out.zdot, dt, step + 1)?;
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { step: step + 1 });
            }
            Ok((next, rates))
        })();
        match attempt {
            Ok((next, rates)) => {
                result.states.extend_from_slice(&next);
                result.de_dt.push(rates.map(|r| r.0));
                result.ds_dt.push(rates.map(|r| r.1));
                graph.states = next;
            }
            Err(e) if is_divergence(&e) => {
                warn!("rollout diverged at step {}: {e}", step + 1);
                result.divergence_step = Some(step + 1);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(result)
}

fn check_samples(y: &[f64], y_hat: &[f64], dim: usize) -> Result<usize> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape {
            context: "metric inputs",
            expected: y.len(),
            actual: y_hat.len(),
        });
    }
    if dim == 0 || y.len() % dim != 0 {
        return Err(Error::Contract(format!("{} values do not split into samples of {dim}", y.len())));
    }
    if y.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(y.len() / dim)
}

/// `sqrt(mean_i ‖y_i − ŷ_i‖²)` over samples of length `dim`.
pub fn rmse(y: &[f64], y_hat: &[f64], dim: usize) -> Result<f64> {
    let n = check_samples(y, y_hat, dim)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rrmse {
    pub value: f64,
    /// Samples dropped because `‖ŷ_i‖∞ < 1e-12`.
    pub excluded: usize,
}

pub const RRMSE_FLOOR: f64 = 1e-12;

/// `sqrt(mean_i (‖y_i − ŷ_i‖ / ‖ŷ_i‖∞)²)`, skipping samples whose reference
/// is (numerically) zero.
pub fn rrmse(y: &[f64], y_hat: &[f64], dim: usize) -> Result<Rrmse> {
    let n = check_samples(y, y_hat, dim)?;
    let mut acc = 0.0;
    let mut kept = 0usize;
    for (a, b) in y.chunks(dim).zip(y_hat.chunks(dim)) {
        let inf = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if inf < RRMSE_FLOOR {
            continue;
        }
        let d2: f64 = a.iter().zip(b).map(|(x, z)| (x - z) * (x - z)).sum();
        acc += d2 / (inf * inf);
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Contract(format!("all {n} samples have a zero reference")));
    }
    Ok(Rrmse {
        value: (acc / kept as f64).sqrt(),
        excluded: n - kept,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub rmse: f64,
    pub rrmse: Option<f64>,
    pub rrmse_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub trajectory: usize,
    /// Rollout steps compared against ground truth.
    pub steps: usize,
    pub divergence_step: Option<usize>,
    pub variables: BTreeMap<String, VariableMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rmse_mean: f64,
    pub rmse_median: f64,
    /// Standard error across trajectories; absent with a single trajectory.
    pub rmse_se: Option<f64>,
    pub rrmse_mean: Option<f64>,
    pub rrmse_se: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n_v: usize,
    pub n_e: usize,
    pub n_dof: usize,
    pub nodal_entries: u64,
    pub global_entries: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trajectories: Vec<TrajectoryMetrics>,
    pub summary: BTreeMap<String, Summary>,
    pub n_diverged: usize,
    pub memory: Option<MemoryReport>,
}

/// Stored operator entries of the nodal form versus the assembled global one.
pub fn memory_report(n_v: usize, n_e: usize, n_dof: usize) -> Result<MemoryReport> {
    if n_v == 0 || n_dof == 0 {
        return Err(Error::Config("memory report needs positive n_v and n_dof".into()));
    }
    let sq = (n_dof as u64) * (n_dof as u64);
    let nodal_entries = 2 * (n_v as u64 + n_e as u64) * sq;
    let side = n_v as u64 * n_dof as u64;
    let global_entries = 2 * side * side;
    Ok(MemoryReport {
        n_v,
        n_e,
        n_dof,
        nodal_entries,
        global_entries,
        ratio: global_entries as f64 / nodal_entries as f64,
    })
}

/// Buffer accounting of one recorded forward pass.
pub fn forward_memory(model: &Model, graph: &SimGraph, norm: &NormStats) -> Result<TapeStats> {
    let feats = assemble_features(graph, norm)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    bound.forward(&mut tape, &feats, &graph.edges)?;
    Ok(tape.stats())
}

fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-variable errors of a rollout against the stored trajectory over the
/// compared steps `1..=steps`.
pub fn trajectory_metrics(
    result: &RolloutResult,
    ds: &TrajectoryDataset,
    trajectory: usize,
    start: usize,
) -> Result<TrajectoryMetrics> {
    let layout: &StateLayout = &ds.meta.layout;
    let n_dof = ds.n_dof();
    let tr = &ds.trajectories[trajectory];
    let available = ds.meta.n_steps.saturating_sub(start);
    let steps = (result.n_states() - 1).min(available);
    let mut variables = BTreeMap::new();
    if steps == 0 {
        return Ok(TrajectoryMetrics {
            trajectory,
            steps,
            divergence_step: result.divergence_step,
            variables,
        });
    }
    for span in &layout.variables {
        let mut pred = Vec::with_capacity(steps * tr.n_v * span.len);
        let mut truth = Vec::with_capacity(steps * tr.n_v * span.len);
        for t in 1..=steps {
            let p = result.state(t);
            let g = tr.snapshot(start + t, n_dof);
            for i in 0..tr.n_v {
                pred.extend_from_slice(&p[i * n_dof..][span.range()]);
                truth.extend_from_slice(&g[i * n_dof..][span.range()]);
            }
        }
        let r = rmse(&pred, &truth, span.len)?;
        let rel = rrmse(&pred, &truth, span.len).ok();
        variables.insert(
            span.name.clone(),
            VariableMetrics {
                rmse: r,
                rrmse: rel.map(|x| x.value),
                rrmse_excluded: rel.map(|x| x.excluded).unwrap_or(steps * tr.n_v),
            },
        );
    }
    Ok(TrajectoryMetrics {
        trajectory,
        steps,
        divergence_step: result.divergence_step,
        variables,
    })
}

/// Rolls out every listed trajectory from step 0 over the dataset horizon
/// and tabulates per-variable RMSE/RRMSE.
pub fn evaluate<'m, F>(make_model: F, ds: &TrajectoryDataset, trajectories: &[usize]) -> Result<EvalReport>
where
    F: Fn(usize) -> Box<dyn ZdotModel + 'm> + Sync,
{
    if trajectories.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let per: Vec<TrajectoryMetrics> = trajectories
        .par_iter()
        .map(|&k| {
            let model = make_model(k);
            let graph = ds.graph_at(k, 0)?;
            let res = rollout(model.as_ref(), &graph, ds.meta.connectivity, ds.meta.n_steps, ds.meta.dt)?;
            trajectory_metrics(&res, ds, k, 0)
        })
        .collect::<Result<_>>()?;

    let mut summary = BTreeMap::new();
    for span in &ds.meta.layout.variables {
        let rm: Vec<f64> = per
            .iter()
            .filter_map(|t| t.variables.get(&span.name).map(|v| v.rmse))
            .collect();
        if rm.is_empty() {
            continue;
        }
        let rr: Vec<f64> = per
            .iter()
            .filter_map(|t| t.variables.get(&span.name).and_then(|v| v.rrmse))
            .collect();
        let (rmse_mean, rmse_se) = mean_se(&rm);
        let (rrmse_mean, rrmse_se) = if rr.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_se(&rr);
            (Some(m), s)
        };
        summary.insert(
            span.name.clone(),
            Summary {
                rmse_mean,
                rmse_median: median(&rm),
                rmse_se,
                rrmse_mean,
                rrmse_se,
            },
        );
    }
    let n_diverged = per.iter().filter(|t| t.divergence_step.is_some()).count();
    Ok(EvalReport {
        trajectories: per,
        summary,
        n_diverged,
        memory: None,
    })
}

impl EvalReport {
    /// Long format: `trajectory,variable,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory,variable,metric,value\n");
        for t in &self.trajectories {
            for (name, m) in &t.variables {
                out.push_str(&format!("{},{name},rmse,{:e}\n", t.trajectory, m.rmse));
                if let Some(r) = m.rrmse {
                    out.push_str(&format!("{},{name},rrmse,{:e}\n", t.trajectory, r));
                }
            }
        }
        out
    }

    /// `{trajectories: {k: {variable: {rmse, rrmse}}}, summary, ...}`.
    pub fn to_json(&self) -> Result<String> {
        let mut nested: BTreeMap<String, &BTreeMap<String, VariableMetrics>> = BTreeMap::new();
        let mut divergence: BTreeMap<String, Option<usize>> = BTreeMap::new();
        for t in &self.trajectories {
            nested.insert(t.trajectory.to_string(), &t.variables);
            divergence.insert(t.trajectory.to_string(), t.divergence_step);
        }
        let v = serde_json::json!({
            "trajectories": nested,
            "divergence_step": divergence,
            "summary": self.summary,
            "n_diverged": self.n_diverged,
            "memory": self.memory,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Per-step diagnostics as CSV: `step,de_dt,ds_dt` (empty when unavailable).
pub fn diagnostics_csv(result: &RolloutResult) -> String {
    let mut out = String::from("step,de_dt,ds_dt\n");
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    for (k, (e, s)) in result.de_dt.iter().zip(&result.ds_dt).enumerate() {
        out.push_str(&format!("{k},{},{}\n", fmt(*e), fmt(*s)));
    }
    out
}
