use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ode::rk4_step;
use super::{Connectivity, DatasetMeta, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::layout::StateLayout;
use crate::seed::derive_seed;

/// 2-D grid of masses joined by axial and diagonal springs, left column
/// clamped, constant external loads. Node state is `(qx, qy, vx, vy, e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeParams {
    pub nx: usize,
    pub ny: usize,
    pub mass: f64,
    pub stiffness: f64,
    /// Mass-proportional damping coefficient; power `c·|v|²` feeds `e`.
    pub damping: f64,
    pub spacing: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_trajectories: usize,
    /// Transverse load on the free (right) column is drawn from `±load_max`.
    pub load_max: f64,
    pub radius: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for LatticeParams {
    fn default() -> Self {
        Self {
            nx: 6,
            ny: 4,
            mass: 1.0,
            stiffness: 10.0,
            damping: 0.5,
            spacing: 1.0,
            dt: 0.05,
            n_steps: 100,
            n_trajectories: 30,
            load_max: 0.5,
            radius: 1.5,
            substeps: 10,
            seed: 0,
        }
    }
}

/// Spring `(a, b, rest_length)`.
type Spring = (usize, usize, f64);

impl LatticeParams {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config(format!(
                "lattice needs at least 2×2 nodes, got {}×{}",
                self.nx, self.ny
            )));
        }
        if !(self.mass > 0.0 && self.stiffness > 0.0 && self.dt > 0.0 && self.spacing > 0.0) {
            return Err(Error::Config("mass, stiffness, spacing and dt must be positive".into()));
        }
        if !(self.damping >= 0.0) || self.substeps == 0 || !(self.radius > 0.0) {
            return Err(Error::Config("invalid damping, substeps or radius".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn is_clamped(&self, i: usize) -> bool {
        i % self.nx == 0
    }

    fn springs(&self) -> Vec<Spring> {
        let a = self.spacing;
        let d = a * std::f64::consts::SQRT_2;
        let mut s = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let i = self.node(ix, iy);
                if ix + 1 < self.nx {
                    s.push((i, self.node(ix + 1, iy), a));
                }
                if iy + 1 < self.ny {
                    s.push((i, self.node(ix, iy + 1), a));
                }
                if ix + 1 < self.nx && iy + 1 < self.ny {
                    s.push((i, self.node(ix + 1, iy + 1), d));
                    s.push((self.node(ix + 1, iy), self.node(ix, iy + 1), d));
                }
            }
        }
        s
    }

    fn rest_state(&self) -> Vec<f64> {
        let mut y = vec![0.0; 5 * self.n_nodes()];
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let i = self.node(ix, iy);
                y[5 * i] = ix as f64 * self.spacing;
                y[5 * i + 1] = iy as f64 * self.spacing;
            }
        }
        y
    }

    /// Integrates one trajectory under constant per-node loads `[n_v × 2]`.
    pub fn integrate(&self, mut y: Vec<f64>, loads: &[f64]) -> Vec<f64> {
        let n = self.n_nodes();
        let springs = self.springs();
        let clamped: Vec<bool> = (0..n).map(|i| self.is_clamped(i)).collect();
        let (m, k, c) = (self.mass, self.stiffness, self.damping);
        let f = |y: &[f64], out: &mut [f64]| {
            let mut force = vec![0.0; 2 * n];
            for &(a, b, rest) in &springs {
                let dx = y[5 * b] - y[5 * a];
                let dy = y[5 * b + 1] - y[5 * a + 1];
                let len = (dx * dx + dy * dy).sqrt();
                let s = k * (len - rest) / len;
                force[2 * a] += s * dx;
                force[2 * a + 1] += s * dy;
                force[2 * b] -= s * dx;
                force[2 * b + 1] -= s * dy;
            }
            for i in 0..n {
                let o = &mut out[5 * i..5 * i + 5];
                if clamped[i] {
                    o.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let (vx, vy) = (y[5 * i + 2], y[5 * i + 3]);
                o[0] = vx;
                o[1] = vy;
                o[2] = (force[2 * i] + loads[2 * i] - c * vx) / m;
                o[3] = (force[2 * i + 1] + loads[2 * i + 1] - c * vy) / m;
                o[4] = c * (vx * vx + vy * vy);
            }
        };
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

    fn random_loads(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut loads = vec![0.0; 2 * self.n_nodes()];
        let fy = if self.load_max > 0.0 {
            rng.random_range(-self.load_max..=self.load_max)
        } else {
            0.0
        };
        for iy in 0..self.ny {
            loads[2 * self.node(self.nx - 1, iy) + 1] = fy;
        }
        loads
    }

    pub fn generate_with_loads(&self, loads: &[f64]) -> Trajectory {
        let n = self.n_nodes();
        Trajectory {
            n_v: n,
            states: self.integrate(self.rest_state(), loads),
            loads: loads.to_vec(),
            node_types: (0..n).map(|i| usize::from(self.is_clamped(i))).collect(),
        }
    }
}

/// Kinetic + spring + internal energy minus the work potential of the
/// constant loads (measured from the rest configuration).
pub fn lattice_energy(params: &LatticeParams, snapshot: &[f64], loads: &[f64]) -> f64 {
    let rest = params.rest_state();
    let mut e = 0.0;
    for i in 0..params.n_nodes() {
        let z = &snapshot[5 * i..5 * i + 5];
        e += 0.5 * params.mass * (z[2] * z[2] + z[3] * z[3]) + z[4];
        e -= loads[2 * i] * (z[0] - rest[5 * i]) + loads[2 * i + 1] * (z[1] - rest[5 * i + 1]);
    }
    for (a, b, l0) in params.springs() {
        let dx = snapshot[5 * b] - snapshot[5 * a];
        let dy = snapshot[5 * b + 1] - snapshot[5 * a + 1];
        let s = (dx * dx + dy * dy).sqrt() - l0;
        e += 0.5 * params.stiffness * s * s;
    }
    e
}

pub fn generate_lattice(params: &LatticeParams) -> Result<TrajectoryDataset> {
    params.validate()?;
    let trajectories = (0..params.n_trajectories)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "lattice", k as u64));
            let loads = params.random_loads(&mut rng);
            params.generate_with_loads(&loads)
        })
        .collect();
    let ds = TrajectoryDataset {
        meta: DatasetMeta {
            dt: params.dt,
            n_steps: params.n_steps,
            layout: StateLayout::new(2, &[("e", 1)])?,
            n_types: 2,
            connectivity: Connectivity::Static {
                radius: params.radius * params.spacing,
            },
            generator: serde_json::json!({ "name": "lattice", "params": params }),
        },
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}
