//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured quantities, then asserts.
//!
//! The training criteria (6 and 10) share one pair of chain runs; expect
//! several minutes for those on a single core.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tignn_core::data::{
    conservation_summary, generate_chain, generate_lattice, load_dataset, save_dataset, ChainParams, Connectivity,
    LatticeParams, TrajectoryDataset,
};
use tignn_core::eval::{
    evaluate, forward_memory, memory_report, median, rmse, rollout, rrmse, LearnedModel, StepOutput, ZdotModel,
};
use tignn_core::graph::{build_edges, Edge, MinMax, NormStats, SimGraph};
use tignn_core::layout::StateLayout;
use tignn_core::metriplectic::{build_l, build_m, flat_len, global_assemble, nodal_zdot, GradientField, MetriplecticOps};
use tignn_core::model::{Model, ModelConfig, ModelKind};
use tignn_core::nn::finite_diff_check;
use tignn_core::training::{
    batch_loss, load_checkpoint, loss_and_gradients, split_dataset, train, PairSource, TrainConfig, TrainOutcome,
    TrainOutputs,
};

fn report(n: usize, what: &str, pass: bool, detail: String) {
    println!("criterion {n:>2}: {} — {what}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn criterion_01_structural_exactness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut skew_ok = true;
    let mut worst_psd = f64::INFINITY;
    for &n in &[3usize, 5, 7, 12] {
        for _ in 0..1000 {
            let flat = rand_vec(&mut rng, flat_len(n), 1.0);
            let l = build_l(&flat, n).unwrap();
            for r in 0..n {
                for c in 0..n {
                    skew_ok &= l[r * n + c] + l[c * n + r] == 0.0;
                }
            }
            let m = build_m(&flat, n).unwrap();
            let m_norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            for _ in 0..100 {
                let x = rand_vec(&mut rng, n, 1.0);
                let mut quad = 0.0;
                for r in 0..n {
                    for c in 0..n {
                        quad += x[r] * m[r * n + c] * x[c];
                    }
                }
                let x2: f64 = x.iter().map(|v| v * v).sum();
                // Margin above the allowed floor; positive means satisfied.
                worst_psd = worst_psd.min(quad + 1e-12 * x2 * m_norm);
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = skew_ok && worst_psd >= 0.0 && elapsed < Duration::from_secs(5);
    report(
        1,
        "L+Lᵀ=0 exactly, xᵀMx ≥ −1e-12‖x‖²‖M‖, n_dof ∈ {3,5,7,12}",
        pass,
        format!("skew exact {skew_ok}, min PSD margin {worst_psd:.3e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

fn five_node_chain(seed: u64) -> TrajectoryDataset {
    generate_chain(&ChainParams {
        n_masses: 5,
        n_steps: 8,
        n_trajectories: 3,
        seed,
        ..ChainParams::default()
    })
    .unwrap()
}

/// Sixth-order central differences: two 5-point stencils (h, h/2) combined by
/// Richardson extrapolation. Some parameters have gradients near 1e-8 against
/// a loss of O(1), so a two-point stencil at small h drowns them in round-off
/// (≈ ε·|L|/h); the high-order stencil lets h stay large instead.
fn richardson_central(f: &mut impl FnMut(&[f64]) -> tignn_core::Result<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut at = |k: usize, v: f64, p: &mut Vec<f64>| {
        p[k] = v;
        let y = f(p).unwrap();
        p[k] = x[k];
        y
    };
    (0..x.len())
        .map(|k| {
            let mut five = |h: f64| {
                (-at(k, x[k] + 2.0 * h, &mut p) + 8.0 * at(k, x[k] + h, &mut p) - 8.0 * at(k, x[k] - h, &mut p)
                    + at(k, x[k] - 2.0 * h, &mut p))
                    / (12.0 * h)
            };
            let (coarse, fine) = (five(h), five(h / 2.0));
            (16.0 * fine - coarse) / 15.0
        })
        .collect()
}

#[test]
fn criterion_02_autodiff_matches_finite_differences() {
    let t0 = Instant::now();
    let (mut worst, mut plain_worst) = (0.0f64, 0.0f64);
    let mut n_params = 0;
    for seed in 0..10u64 {
        let ds = five_node_chain(seed);
        let split = split_dataset(3, seed).unwrap();
        let norm = tignn_core::data::compute_norm_stats(&ds, &split.train).unwrap();
        let mut src = PairSource::new(&ds, &norm);
        let samples = vec![src.sample(split.train[0], (seed as usize) % 8).unwrap()];
        let cfg = TrainConfig {
            hidden_dim: 8,
            n_passes: 2,
            mlp_layers: 2,
            ..TrainConfig::default()
        };
        let model = Model::new(cfg.model_config(ModelKind::Tignn, &ds), 1000 + seed).unwrap();
        let lambda = cfg.lambda_data;
        let (_, grads) = loss_and_gradients(&model, &samples, lambda).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        let x0 = model.flat_params();
        n_params = x0.len();
        let mut probe = model.clone();
        let mut loss = |x: &[f64]| -> tignn_core::Result<f64> {
            probe.set_flat_params(x)?;
            Ok(batch_loss(&probe, &samples, lambda)?.total)
        };
        let oracle = richardson_central(&mut loss, &x0, 3e-2);
        let err = analytic
            .iter()
            .zip(&oracle)
            .map(|(a, d)| (a - d).abs() / d.abs().max(1e-8))
            .fold(0.0, f64::max);
        worst = worst.max(err);
        plain_worst = plain_worst.max(finite_diff_check(&mut loss, &x0, &analytic, 1e-6).unwrap());
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(60);
    report(
        2,
        "full TIGNN loss gradient vs central differences, 5-node graph, 10 seeds",
        pass,
        format!(
            "max relative error {worst:.3e} over {n_params} parameters \
             (plain two-point differences at h = 1e-6: {plain_worst:.3e}), {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

fn random_symmetric_edges(rng: &mut ChaCha8Rng, n_v: usize) -> Vec<Edge> {
    let mut edges = Vec::new();
    for i in 0..n_v {
        for j in i + 1..n_v {
            if rng.random_bool(0.4) {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    edges.sort_unstable();
    edges
}

#[test]
fn criterion_03_nodal_equals_global() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n_v = rng.random_range(1..=10);
        let n = *[3usize, 5, 7].get(rng.random_range(0..3)).unwrap();
        let t = flat_len(n);
        let edges = random_symmetric_edges(&mut rng, n_v);
        let ops = MetriplecticOps::from_flat(
            n,
            &rand_vec(&mut rng, n_v * t, 1.0),
            &rand_vec(&mut rng, n_v * t, 1.0),
            &rand_vec(&mut rng, edges.len() * t, 1.0),
            &rand_vec(&mut rng, edges.len() * t, 1.0),
        )
        .unwrap();
        let grads = GradientField {
            n_dof: n,
            grad_e: rand_vec(&mut rng, n_v * n, 1.0),
            grad_s: rand_vec(&mut rng, n_v * n, 1.0),
        };
        let nodal = nodal_zdot(&ops, &grads, &edges).unwrap();
        let global = global_assemble(&ops, &grads, &edges).unwrap().zdot();
        let diff: Vec<f64> = nodal.iter().zip(&global).map(|(a, b)| a - b).collect();
        worst = worst.max(norm_inf(&diff));
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-12 && elapsed < Duration::from_secs(10);
    report(
        3,
        "nodal ż vs assembled global matvec, 50 graphs with n_v ≤ 10",
        pass,
        format!("max ‖Δ‖∞ {worst:.3e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

/// A closed system whose global operators are projected so that `𝕃∇S = 0`
/// and `𝕄∇E = 0` hold exactly at every state, then split into nodal and
/// edge blocks.
struct ProjectedSystem {
    n_v: usize,
    n: usize,
    /// Skew generator and dissipation factor, `[size × size]`.
    a: Vec<f64>,
    b: Vec<f64>,
    edges: Vec<Edge>,
}

impl ProjectedSystem {
    fn new(n_v: usize, n: usize, seed: u64) -> Self {
        let size = n_v * n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rand_vec(&mut rng, size * size, 1.0);
        let mut a = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                a[i * size + j] = r[i * size + j] - r[j * size + i];
            }
        }
        let b = rand_vec(&mut rng, size * size, 0.5);
        let edges = (0..n_v)
            .flat_map(|i| (0..n_v).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Self { n_v, n, a, b, edges }
    }

    /// Quadratic energy plus a weak coupling between nodes; entropy with a
    /// state-dependent gradient so the projections change every step.
    fn gradients(&self, z: &[f64]) -> GradientField {
        let mean: Vec<f64> = (0..self.n)
            .map(|k| (0..self.n_v).map(|i| z[i * self.n + k]).sum::<f64>() / self.n_v as f64)
            .collect();
        let mut ge = vec![0.0; z.len()];
        let mut gs = vec![0.0; z.len()];
        for i in 0..self.n_v {
            for k in 0..self.n {
                let x = z[i * self.n + k];
                ge[i * self.n + k] = (1.0 + 0.5 * k as f64) * x + 0.3 * (x - mean[k]);
                gs[i * self.n + k] = 1.0 + 0.2 * k as f64 + 0.1 * (x + i as f64).cos();
            }
        }
        GradientField {
            n_dof: self.n,
            grad_e: ge,
            grad_s: gs,
        }
    }

    fn projector(v: &[f64]) -> Vec<f64> {
        let size = v.len();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut p = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                p[i * size + j] = f64::from(u8::from(i == j)) - v[i] * v[j] / vv;
            }
        }
        p
    }

    fn matmul(x: &[f64], y: &[f64], size: usize, transpose_y: bool) -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                out[i * size + j] = (0..size)
                    .map(|k| x[i * size + k] * if transpose_y { y[j * size + k] } else { y[k * size + j] })
                    .sum();
            }
        }
        out
    }

    fn operators(&self, grads: &GradientField) -> MetriplecticOps {
        let size = self.n_v * self.n;
        let p = Self::projector(&grads.grad_s);
        let q = Self::projector(&grads.grad_e);
        let l = Self::matmul(&Self::matmul(&p, &self.a, size, false), &p, size, false);
        let qb = Self::matmul(&q, &self.b, size, false);
        let m = Self::matmul(&qb, &qb, size, true);
        let n = self.n;
        let block = |g: &[f64], i: usize, j: usize, sign: f64| -> Vec<f64> {
            (0..n)
                .flat_map(|r| (0..n).map(move |c| sign * g[(i * n + r) * size + j * n + c]))
                .collect()
        };
        MetriplecticOps {
            n_dof: n,
            node_l: (0..self.n_v).flat_map(|i| block(&l, i, i, 1.0)).collect(),
            node_m: (0..self.n_v).flat_map(|i| block(&m, i, i, 1.0)).collect(),
            edge_l: self.edges.iter().flat_map(|&(i, j)| block(&l, i, j, -1.0)).collect(),
            edge_m: self.edges.iter().flat_map(|&(i, j)| block(&m, i, j, -1.0)).collect(),
        }
    }
}

impl ZdotModel for ProjectedSystem {
    fn zdot(&self, graph: &SimGraph, _step: usize) -> tignn_core::Result<StepOutput> {
        let grads = self.gradients(&graph.states);
        let ops = self.operators(&grads);
        let zdot = nodal_zdot(&ops, &grads, &graph.edges)?;
        Ok(StepOutput {
            zdot: zdot.clone(),
            diagnostics: Some((grads, zdot)),
        })
    }
}

#[test]
fn criterion_04_closed_system_thermodynamics() {
    let layout = StateLayout::new(1, &[("e", 1)]).unwrap();
    let mut worst_de = 0.0f64;
    let mut worst_ds = f64::INFINITY;
    let mut steps = 0;
    for (n_v, seed) in [(1usize, 41u64), (2, 42)] {
        let sys = ProjectedSystem::new(n_v, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut states = rand_vec(&mut rng, n_v * 3, 1.0);
        for i in 0..n_v {
            states[i * 3] += i as f64;
        }
        let graph = SimGraph::new(
            &layout,
            states,
            sys.edges.clone(),
            vec![0; n_v],
            1,
            vec![0.0; n_v],
            None,
        )
        .unwrap();
        let res = rollout(&sys, &graph, Connectivity::Static { radius: 10.0 }, 100, 0.01).unwrap();
        assert!(!res.diverged());
        for (de, ds) in res.de_dt.iter().zip(&res.ds_dt) {
            worst_de = worst_de.max(de.unwrap().abs());
            worst_ds = worst_ds.min(ds.unwrap());
            steps += 1;
        }
    }
    let pass = worst_de < 1e-10 && worst_ds >= -1e-12 && steps == 200;
    report(
        4,
        "projected closed systems (1 and 2 nodes), 100 rollout steps each",
        pass,
        format!("max |dE/dt| {worst_de:.3e}, min dS/dt {worst_ds:.3e} over {steps} steps"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_generators_conserve_energy() {
    let chain = generate_chain(&ChainParams {
        n_steps: 1000,
        n_trajectories: 4,
        seed: 5,
        ..ChainParams::default()
    })
    .unwrap();
    let lattice = generate_lattice(&LatticeParams {
        n_steps: 1000,
        n_trajectories: 4,
        seed: 5,
        ..LatticeParams::default()
    })
    .unwrap();
    let c = conservation_summary(&chain).unwrap().unwrap();
    let l = conservation_summary(&lattice).unwrap().unwrap();
    let pass = c.max_relative_drift <= 1e-8
        && l.max_relative_drift <= 1e-8
        && c.internal_energy_monotone
        && l.internal_energy_monotone
        && c.damping > 0.0
        && l.damping > 0.0;
    report(
        5,
        "chain and lattice: relative E drift ≤ 1e-8 over 1000 steps, Σe non-decreasing",
        pass,
        format!(
            "chain drift {:.3e} monotone {}, lattice drift {:.3e} monotone {}",
            c.max_relative_drift, c.internal_energy_monotone, l.max_relative_drift, l.internal_energy_monotone
        ),
    );
    assert!(pass);
}

struct ChainRuns {
    ds: TrajectoryDataset,
    tignn: TrainOutcome,
    vanilla: TrainOutcome,
    elapsed: Duration,
}

/// The chain dataset and both models trained identically on it.
fn chain_runs() -> &'static ChainRuns {
    static RUNS: OnceLock<ChainRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let ds = generate_chain(&ChainParams::default()).unwrap();
        let cfg = TrainConfig::default();
        let tignn = train(&ds, &cfg, ModelKind::Tignn, None).unwrap();
        let vanilla = train(&ds, &cfg, ModelKind::Vanilla, None).unwrap();
        ChainRuns {
            ds,
            tignn,
            vanilla,
            elapsed: t0.elapsed(),
        }
    })
}

fn median_test_q_rmse(runs: &ChainRuns, o: &TrainOutcome) -> f64 {
    let rep = evaluate(
        |_| {
            Box::new(LearnedModel {
                model: &o.model,
                norm: &o.norm,
            }) as Box<dyn ZdotModel>
        },
        &runs.ds,
        &o.split.test,
    )
    .unwrap();
    let q: Vec<f64> = rep.trajectories.iter().map(|t| t.variables["q"].rmse).collect();
    median(&q)
}

#[test]
fn criterion_06_training_efficacy() {
    let runs = chain_runs();
    let rec = &runs.tignn.records;
    let (first, last) = (rec.first().unwrap(), rec.last().unwrap());
    let ratio = last.loss_deg / first.loss_deg;
    let q_tignn = median_test_q_rmse(runs, &runs.tignn);
    let q_vanilla = median_test_q_rmse(runs, &runs.vanilla);
    let pass_a = ratio <= 0.1;
    let pass_b = q_tignn <= q_vanilla;
    let in_time = runs.elapsed < Duration::from_secs(30 * 60);
    report(
        6,
        "(a) degeneracy loss, final epoch ≤ 0.1 × first epoch",
        pass_a,
        format!(
            "{:.3e} → {:.3e} (ratio {ratio:.3e}); at initialization {:.3e}, after training {:.3e}",
            first.loss_deg, last.loss_deg, runs.tignn.initial_train_loss.deg, runs.tignn.final_train_loss.deg
        ),
    );
    report(
        6,
        "(b) median test position RMSE, TIGNN ≤ matched vanilla GNN",
        pass_b,
        format!(
            "{q_tignn:.3e} vs {q_vanilla:.3e} ({} vs {} parameters)",
            runs.tignn.model.param_count(),
            runs.vanilla.model.param_count()
        ),
    );
    report(6, "both trainings within 30 min", in_time, format!("{:.1?}", runs.elapsed));
    assert!(pass_a && pass_b && in_time);
}

#[test]
fn criterion_07_memory_scaling() {
    let (n_v, n_dof) = (756usize, 12usize);
    let mut ok = true;
    let mut min_ratio = f64::INFINITY;
    let mut global = 0;
    for k in [0usize, 1, 5, 10, 20, 30] {
        let r = memory_report(n_v, k * n_v, n_dof).unwrap();
        global = r.global_entries;
        ok &= r.global_entries == 164_602_368;
        min_ratio = min_ratio.min(r.ratio);
    }

    // Measured: one TIGNN forward on a 756-node 3-D grid with 12 dof per node.
    let layout = StateLayout::new(3, &[("sigma", 6)]).unwrap();
    let (nx, ny, nz) = (12usize, 9, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut states = Vec::with_capacity(n_v * n_dof);
    let mut positions = Vec::with_capacity(n_v * 3);
    for i in 0..n_v {
        let p = [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
        positions.extend_from_slice(&p);
        states.extend_from_slice(&p);
        states.extend(rand_vec(&mut rng, n_dof - 3, 1.0));
    }
    assert_eq!(nx * ny * nz, n_v);
    let radius = 1.5;
    let edges = build_edges(&positions, 3, radius).unwrap();
    let n_e = edges.len();
    let graph = SimGraph::new(&layout, states, edges, vec![0; n_v], 1, vec![0.0; n_v * 3], Some(radius)).unwrap();
    let hidden = 16;
    let model = Model::new(
        ModelConfig {
            kind: ModelKind::Tignn,
            n_dof,
            d_space: 3,
            n_types: 1,
            hidden_dim: hidden,
            n_passes: 2,
            mlp_layers: 2,
        },
        7,
    )
    .unwrap();
    let norm = NormStats {
        state: MinMax {
            min: vec![-1.0; n_dof],
            max: vec![12.0; n_dof],
        },
        edge: MinMax {
            min: vec![-radius, -radius, -radius, 0.0],
            max: vec![radius, radius, radius, radius],
        },
        rate_scale: vec![1.0; n_dof],
        load_scale: 1.0,
    };
    let stats = forward_memory(&model, &graph, &norm).unwrap();
    let nodal = memory_report(n_v, n_e, n_dof).unwrap();
    // Everything else on the tape is a latent or hidden activation, one row
    // of width ≤ 3·F_h per node or edge; bounded-degree graphs make that
    // O(n_v·F_h).
    let latent_bound = 3 * hidden * (n_v + n_e);
    let ops_ok = stats.operator_entries as u64 <= nodal.nodal_entries;
    let peak_ok = (stats.largest_buffer as u64) <= nodal.nodal_entries + latent_bound as u64;
    let pass = ok && min_ratio >= 10.0 && ops_ok && peak_ok;
    report(
        7,
        "memory report for n_v=756, n_dof=12 and measured nodal forward",
        pass,
        format!(
            "global {global}, min ratio {min_ratio:.1}× (n_e ≤ 30·n_v); forward on n_e={n_e}: operator entries {} ≤ {}, largest buffer {} (latent bound {latent_bound})",
            stats.operator_entries, nodal.nodal_entries, stats.largest_buffer
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(1..6);
        let n = rng.random_range(1..40);
        let y = rand_vec(&mut rng, n * dim, 2.0);
        let y_hat = rand_vec(&mut rng, n * dim, 2.0);
        let (mut sq, mut rel) = (0.0, 0.0);
        for i in 0..n {
            let mut d2 = 0.0;
            let mut inf = 0.0f64;
            for k in 0..dim {
                let d = y[i * dim + k] - y_hat[i * dim + k];
                d2 += d * d;
                inf = inf.max(y_hat[i * dim + k].abs());
            }
            sq += d2;
            rel += d2 / (inf * inf);
        }
        let r_oracle = (sq / n as f64).sqrt();
        let rr_oracle = (rel / n as f64).sqrt();
        worst = worst.max((rmse(&y, &y_hat, dim).unwrap() - r_oracle).abs());
        worst = worst.max((rrmse(&y, &y_hat, dim).unwrap().value - rr_oracle).abs());
    }
    let y = rand_vec(&mut rng, 30, 1.0);
    let perfect = rrmse(&y, &y, 3).unwrap().value;
    let pass = worst <= 1e-12 && perfect == 0.0;
    report(
        8,
        "rmse/rrmse vs scalar loops on 100 instances; perfect rrmse",
        pass,
        format!("max deviation {worst:.3e}, perfect rrmse {perfect}"),
    );
    assert!(pass);
}

/// generate → save → load → train 5 epochs → reload checkpoint → evaluate.
fn end_to_end(dir: &std::path::Path, seed: u64) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let ds = generate_chain(&ChainParams {
        n_masses: 6,
        n_steps: 20,
        n_trajectories: 8,
        seed,
        ..ChainParams::default()
    })
    .unwrap();
    let data_path = dir.join("chain.tgd");
    save_dataset(&ds, &data_path).unwrap();
    let ds = load_dataset(&data_path).unwrap();
    let cfg = TrainConfig {
        hidden_dim: 8,
        n_passes: 2,
        n_epochs: 5,
        pairs_per_epoch: Some(32),
        eval_pairs: 16,
        seed,
        ..TrainConfig::default()
    };
    let out = TrainOutputs { dir: dir.join("run") };
    train(&ds, &cfg, ModelKind::Tignn, Some(&out)).unwrap();
    let ck = load_checkpoint(&out.checkpoint()).unwrap();
    let split = split_dataset(ds.trajectories.len(), ck.train_config.seed).unwrap();
    let rep = evaluate(
        |_| {
            Box::new(LearnedModel {
                model: &ck.model,
                norm: &ck.norm,
            }) as Box<dyn ZdotModel>
        },
        &ds,
        &split.test,
    )
    .unwrap();
    (
        rep.to_csv().into_bytes(),
        rep.to_json().unwrap().into_bytes(),
        std::fs::read(out.metrics_log()).unwrap(),
    )
}

#[test]
fn criterion_09_end_to_end_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = end_to_end(a.path(), 9);
    let rb = end_to_end(b.path(), 9);
    let pass = ra == rb;
    report(
        9,
        "two generate → train(5) → eval runs, same seed",
        pass,
        format!(
            "metrics csv identical {}, json identical {}, training log identical {}",
            ra.0 == rb.0,
            ra.1 == rb.1,
            ra.2 == rb.2
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_long_horizon_stability() {
    let runs = chain_runs();
    let o = &runs.tignn;
    let horizon = runs.ds.meta.n_steps;
    let model = LearnedModel {
        model: &o.model,
        norm: &o.norm,
    };
    let mut stable = 0;
    let mut detail = Vec::new();
    for &k in o.split.test.iter().take(4) {
        let res = rollout(
            &model,
            &runs.ds.graph_at(k, 0).unwrap(),
            runs.ds.meta.connectivity,
            4 * horizon,
            runs.ds.meta.dt,
        )
        .unwrap();
        let finite = res.states.iter().all(|x| x.is_finite());
        let ok = !res.diverged() && finite && res.n_states() == 4 * horizon + 1;
        stable += usize::from(ok);
        detail.push(match res.divergence_step {
            Some(s) => format!("traj {k}: diverged at {s}"),
            None => format!("traj {k}: ok"),
        });
    }
    let pass = stable >= 3;
    report(
        10,
        &format!("TIGNN rollout of {} steps (4× horizon) on 4 test trajectories", 4 * horizon),
        pass,
        format!("{stable}/4 stable [{}]", detail.join(", ")),
    );
    assert!(pass);
}
