use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ode::rk4_step;
use super::{Connectivity, DatasetMeta, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::layout::StateLayout;
use crate::seed::derive_seed;

/// 1-D mass-spring-damper chain with clamped ends. Each node carries
/// `(q, v, e)` where `e` accumulates the power dissipated by its damper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub n_masses: usize,
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    /// Rest length between neighbours.
    pub spacing: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_trajectories: usize,
    /// Amplitude bound for each of the low-mode displacement coefficients.
    pub displacement_amplitude: f64,
    /// Amplitude bound for each of the low-mode velocity coefficients.
    pub velocity_amplitude: f64,
    /// Number of standing-wave modes mixed into the initial condition.
    pub n_modes: usize,
    /// Connectivity radius, in units of length.
    pub radius: f64,
    /// RK4 substeps per saved step.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            n_masses: 20,
            mass: 1.0,
            stiffness: 1.0,
            damping: 0.1,
            spacing: 1.0,
            dt: 0.1,
            n_steps: 50,
            n_trajectories: 40,
            displacement_amplitude: 0.1,
            velocity_amplitude: 0.05,
            n_modes: 3,
            radius: 1.5,
            substeps: 10,
            seed: 0,
        }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_masses < 2 {
            return Err(Error::Config("a chain needs at least 2 masses".into()));
        }
        if !(self.mass > 0.0 && self.stiffness > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("mass, stiffness and dt must be positive".into()));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config("damping must be non-negative".into()));
        }
        if self.substeps == 0 || !(self.radius > 0.0) || !(self.spacing > 0.0) {
            return Err(Error::Config("substeps, radius and spacing must be positive".into()));
        }
        Ok(())
    }

    fn rhs(&self) -> impl Fn(&[f64], &mut [f64]) + '_ {
        let n = self.n_masses;
        let (m, k, c) = (self.mass, self.stiffness, self.damping);
        move |y: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let (q, v) = (y[3 * i], y[3 * i + 1]);
                if i == 0 || i == n - 1 {
                    out[3 * i] = 0.0;
                    out[3 * i + 1] = 0.0;
                    out[3 * i + 2] = 0.0;
                    continue;
                }
                let left = y[3 * (i - 1)];
                let right = y[3 * (i + 1)];
                out[3 * i] = v;
                out[3 * i + 1] = (k * (right - 2.0 * q + left) - c * v) / m;
                out[3 * i + 2] = c * v * v;
            }
        }
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.n_masses;
        let modes = |amp: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let coeffs: Vec<f64> = (0..self.n_modes)
                .map(|_| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 })
                .collect();
            (0..n)
                .map(|i| {
                    let x = i as f64 / (n - 1) as f64;
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(m, a)| a * ((m + 1) as f64 * std::f64::consts::PI * x).sin())
                        .sum()
                })
                .collect()
        };
        let u = modes(self.displacement_amplitude, rng);
        let w = modes(self.velocity_amplitude, rng);
        let mut y = vec![0.0; 3 * n];
        for i in 0..n {
            let clamped = i == 0 || i == n - 1;
            y[3 * i] = i as f64 * self.spacing + if clamped { 0.0 } else { u[i] };
            y[3 * i + 1] = if clamped { 0.0 } else { w[i] };
        }
        y
    }

    /// Integrates one trajectory from a given initial state.
    pub fn integrate(&self, mut y: Vec<f64>) -> Vec<f64> {
        let f = self.rhs();
        let h = self.dt / self.substeps as f64;
        let mut out = Vec::with_capacity((self.n_steps + 1) * y.len());
        out.extend_from_slice(&y);
        for _ in 0..self.n_steps {
            for _ in 0..self.substeps {
                rk4_step(&f, &mut y, h);
            }
            out.extend_from_slice(&y);
        }
        out
    }
}

/// Total energy of one chain snapshot: kinetic + spring + internal.
pub fn chain_energy(params: &ChainParams, snapshot: &[f64]) -> f64 {
    let n = params.n_masses;
    let mut e = 0.0;
    for i in 0..n {
        let v = snapshot[3 * i + 1];
        e += 0.5 * params.mass * v * v + snapshot[3 * i + 2];
        if i + 1 < n {
            let stretch = snapshot[3 * (i + 1)] - snapshot[3 * i] - params.spacing;
            e += 0.5 * params.stiffness * stretch * stretch;
        }
    }
    e
}

pub fn generate_chain(params: &ChainParams) -> Result<TrajectoryDataset> {
    params.validate()?;
    let n = params.n_masses;
    let trajectories = (0..params.n_trajectories)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "chain", k as u64));
            let y0 = params.initial_state(&mut rng);
            Trajectory {
                n_v: n,
                states: params.integrate(y0),
                loads: vec![0.0; n],
                node_types: (0..n).map(|i| usize::from(i == 0 || i == n - 1)).collect(),
            }
        })
        .collect();
    let ds = TrajectoryDataset {
        meta: DatasetMeta {
            dt: params.dt,
            n_steps: params.n_steps,
            layout: StateLayout::new(1, &[("e", 1)])?,
            n_types: 2,
            connectivity: Connectivity::Static {
                radius: params.radius * params.spacing,
            },
            generator: serde_json::json!({ "name": "chain", "params": params }),
        },
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}
