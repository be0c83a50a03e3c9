//! Loss assembly, dataset splitting, the epoch loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_norm_stats, read_container, write_container, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::graph::{add_noise, assemble_features, Edge, FeatureSet, NormStats};
use crate::metriplectic::{degeneracy_residuals, GradientField, MetriplecticOps};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::{adam_step, multistep_lr, AdamState, DenseTensor, Tape, Var};
use crate::seed::derive_seed;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub n_passes: usize,
    /// Hidden layers per MLP.
    pub mlp_layers: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub n_epochs: usize,
    /// Variance of the Gaussian input noise on normalized node state.
    pub sigma_noise: f64,
    pub lambda_data: f64,
    pub seed: u64,
    /// Pairs drawn (without replacement) per epoch; `None` uses every pair.
    pub pairs_per_epoch: Option<usize>,
    /// Cap on the validation / monitoring pairs evaluated each epoch.
    pub eval_pairs: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            n_passes: 3,
            mlp_layers: 2,
            batch_size: 4,
            base_lr: 8e-4,
            lr_milestones: vec![100, 150],
            lr_gamma: 0.3,
            n_epochs: 200,
            sigma_noise: 4e-5,
            lambda_data: 10.0,
            seed: 0,
            pairs_per_epoch: Some(256),
            eval_pairs: 128,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("n_passes", self.n_passes),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.base_lr > 0.0) || !(self.lr_gamma > 0.0) {
            return Err(Error::Config("base_lr and lr_gamma must be positive".into()));
        }
        if !(self.lambda_data > 0.0) {
            return Err(Error::Config(format!("lambda_data must be positive, got {}", self.lambda_data)));
        }
        if !(self.sigma_noise >= 0.0) {
            return Err(Error::Config("sigma_noise must be non-negative".into()));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("pairs_per_epoch must be positive when set".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, kind: ModelKind, ds: &TrajectoryDataset) -> ModelConfig {
        ModelConfig {
            kind,
            n_dof: ds.n_dof(),
            d_space: ds.meta.d_space(),
            n_types: ds.meta.n_types,
            hidden_dim: self.hidden_dim,
            n_passes: self.n_passes,
            mlp_layers: self.mlp_layers,
        }
    }
}

pub fn ground_truth_zdot(z_t: &[f64], z_next: &[f64], dt: f64) -> Result<Vec<f64>> {
    if z_t.len() != z_next.len() {
        return Err(Error::Shape {
            context: "ground_truth_zdot",
            expected: z_t.len(),
            actual: z_next.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    Ok(z_t.iter().zip(z_next).map(|(a, b)| (b - a) / dt).collect())
}

/// Mean squared difference over every entry.
pub fn loss_data(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() || target.is_empty() {
        return Err(Error::Shape {
            context: "loss_data",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let s: f64 = target.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / target.len() as f64)
}

/// Mean over nodes of `‖L_i ∇s_i‖² + ‖M_i ∇e_i‖²`.
pub fn loss_degeneracy(ops: &MetriplecticOps, grads: &GradientField) -> Result<f64> {
    let (rl, rm) = degeneracy_residuals(ops, grads)?;
    let n_v = grads.n_nodes();
    if n_v == 0 {
        return Ok(0.0);
    }
    let s: f64 = rl.iter().chain(&rm).map(|x| x * x).sum();
    Ok(s / n_v as f64)
}

pub fn total_loss(l_deg: f64, l_data: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    Ok(l_deg + lambda * l_data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 by whole trajectory: `⌊0.8n⌋` to train (leaving at least one
/// each for val and test), the remainder halved between val and test.
pub fn split_dataset(n_trajectories: usize, seed: u64) -> Result<Split> {
    let n = n_trajectories;
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 trajectories to split, got {n}")));
    }
    let n_train = (n * 8 / 10).min(n - 2).max(1);
    let rest = n - n_train;
    let n_val = rest / 2;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0)));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// One labelled transition ready for the network: features of `z(t)` and
/// the scaled rate target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub feats: FeatureSet,
    pub edges: Vec<Edge>,
    pub target: Vec<f64>,
}

/// Builds samples for `(trajectory, step)` pairs, caching static edge lists.
pub struct PairSource<'a> {
    ds: &'a TrajectoryDataset,
    norm: &'a NormStats,
    static_edges: Vec<Option<Vec<Edge>>>,
}

impl<'a> PairSource<'a> {
    pub fn new(ds: &'a TrajectoryDataset, norm: &'a NormStats) -> Self {
        Self {
            ds,
            norm,
            static_edges: vec![None; ds.trajectories.len()],
        }
    }

    pub fn pairs(&self, trajectories: &[usize]) -> Vec<(usize, usize)> {
        trajectories
            .iter()
            .flat_map(|&k| (0..self.ds.meta.n_steps).map(move |t| (k, t)))
            .collect()
    }

    fn edges(&mut self, k: usize, t: usize) -> Result<Vec<Edge>> {
        if self.ds.meta.connectivity.is_dynamic() {
            return self.ds.edges_at(k, t);
        }
        if self.static_edges[k].is_none() {
            self.static_edges[k] = Some(self.ds.edges_at(k, 0)?);
        }
        Ok(self.static_edges[k].clone().unwrap_or_default())
    }

    pub fn sample(&mut self, k: usize, t: usize) -> Result<Sample> {
        let ds = self.ds;
        let tr = &ds.trajectories[k];
        let n_dof = ds.n_dof();
        let edges = self.edges(k, t)?;
        let graph = crate::graph::SimGraph::new(
            &ds.meta.layout,
            tr.snapshot(t, n_dof).to_vec(),
            edges.clone(),
            tr.node_types.clone(),
            ds.meta.n_types,
            tr.loads.clone(),
            Some(ds.meta.connectivity.radius()),
        )?;
        let feats = assemble_features(&graph, self.norm)?;
        let zdot = ground_truth_zdot(tr.snapshot(t, n_dof), tr.snapshot(t + 1, n_dof), ds.meta.dt)?;
        Ok(Sample {
            feats,
            edges,
            target: self.norm.scale_rates(&zdot),
        })
    }
}

/// Loss components, averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub deg: f64,
}

struct SampleLossVars {
    total: Var,
    data: Var,
    deg: Option<Var>,
}

fn record_sample_loss(tape: &mut Tape, model: &Model, sample: &Sample, lambda: f64) -> Result<(SampleLossVars, Vec<Var>)> {
    let bound = model.bind(tape);
    let params = bound.param_vars();
    let rec = bound.forward(tape, &sample.feats, &sample.edges)?;
    let n_dof = model.config.n_dof;
    let target = tape.leaf(sample.feats.n_v, n_dof, sample.target.clone())?;
    let diff = tape.sub(rec.zdot, target)?;
    let sq = tape.square(diff);
    let data = tape.mean(sq);
    let weighted = tape.scale(data, lambda);
    let (total, deg) = match (rec.residual_l, rec.residual_m) {
        (Some(rl), Some(rm)) => {
            let a = tape.square(rl);
            let a = tape.sum(a);
            let b = tape.square(rm);
            let b = tape.sum(b);
            let s = tape.add(a, b)?;
            let deg = tape.scale(s, 1.0 / sample.feats.n_v.max(1) as f64);
            (tape.add(deg, weighted)?, Some(deg))
        }
        _ => (weighted, None),
    };
    Ok((SampleLossVars { total, data, deg }, params))
}

fn parts(tape: &Tape, vars: &SampleLossVars) -> LossParts {
    LossParts {
        total: tape.scalar(vars.total),
        data: tape.scalar(vars.data),
        deg: vars.deg.map(|d| tape.scalar(d)).unwrap_or(0.0),
    }
}

fn mean_parts(all: &[LossParts]) -> LossParts {
    let n = all.len().max(1) as f64;
    let mut acc = LossParts::default();
    for p in all {
        acc.total += p.total;
        acc.data += p.data;
        acc.deg += p.deg;
    }
    LossParts {
        total: acc.total / n,
        data: acc.data / n,
        deg: acc.deg / n,
    }
}

/// Batch-mean loss without gradients.
pub fn batch_loss(model: &Model, samples: &[Sample], lambda: f64) -> Result<LossParts> {
    let per: Vec<LossParts> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (vars, _) = record_sample_loss(&mut tape, model, s, lambda)?;
            Ok(parts(&tape, &vars))
        })
        .collect::<Result<_>>()?;
    Ok(mean_parts(&per))
}

/// Batch-mean loss and its gradient with respect to every parameter tensor
/// (in [`Model::params`] order). Per-sample tapes may run in parallel; the
/// accumulation is in batch order.
pub fn loss_and_gradients(model: &Model, samples: &[Sample], lambda: f64) -> Result<(LossParts, Vec<Vec<f64>>)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let per: Vec<(LossParts, Vec<Vec<f64>>)> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (vars, params) = record_sample_loss(&mut tape, model, s, lambda)?;
            let g = tape.backward(vars.total)?;
            let grads = params.iter().zip(&sizes).map(|(&v, &n)| g.get_or_zeros(v, n)).collect();
            Ok((parts(&tape, &vars), grads))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / samples.len() as f64;
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for (_, g) in &per {
        for (a, b) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x *= inv);
    }
    let losses: Vec<LossParts> = per.iter().map(|(p, _)| *p).collect();
    Ok((mean_parts(&losses), acc))
}

/// Evenly strided subset of at most `cap` items.
fn strided<T: Copy>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap || cap == 0 {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_data: f64,
    pub loss_deg: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub norm: NormStats,
    pub split: Split,
    pub records: Vec<EpochRecord>,
    /// Noise-free loss on the monitoring subset of training pairs before the
    /// first update and after the last.
    pub initial_train_loss: LossParts,
    pub final_train_loss: LossParts,
}

/// Model, normalization and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: NormStats,
    pub train_config: TrainConfig,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: TrainConfig,
    norm: NormStats,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let named = ck.model.named_params();
    let header = CheckpointHeader {
        model_config: ck.model.config.clone(),
        train_config: ck.train_config.clone(),
        norm: ck.norm.clone(),
        epoch: ck.epoch,
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let payload: Vec<f64> = named.iter().flat_map(|(_, t)| t.values.iter().copied()).collect();
    write_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &serde_json::to_value(&header)?, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: CheckpointHeader = serde_json::from_value(header)?;
    let mut model = Model::new(header.model_config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::HeaderMismatch(format!(
            "checkpoint lists {} tensors, model expects {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::HeaderMismatch(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    model.set_flat_params(&payload)?;
    Ok(Checkpoint {
        model,
        norm: header.norm,
        train_config: header.train_config,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.dir.join("metrics.ndjson")
    }
}

fn samples_for(source: &mut PairSource, pairs: &[(usize, usize)]) -> Result<Vec<Sample>> {
    pairs.iter().map(|&(k, t)| source.sample(k, t)).collect()
}

/// Trains `kind` on the training split of `ds`. With `out`, writes the
/// rolling checkpoint every `checkpoint_every` epochs and at the end, the
/// best-validation checkpoint, and an NDJSON metrics log (one line per epoch).
pub fn train(ds: &TrajectoryDataset, config: &TrainConfig, kind: ModelKind, out: Option<&TrainOutputs>) -> Result<TrainOutcome> {
    config.validate()?;
    ds.validate()?;
    let split = split_dataset(ds.trajectories.len(), config.seed)?;
    let norm = compute_norm_stats(ds, &split.train)?;
    let mut model = Model::new(config.model_config(kind, ds), derive_seed(config.seed, "init", 0))?;
    let names = model.param_names();
    let mut adam = AdamState::new(&model.params());

    let mut source = PairSource::new(ds, &norm);
    let train_pairs = source.pairs(&split.train);
    let val_pairs = strided(&source.pairs(&split.val), config.eval_pairs);
    let monitor_pairs = strided(&train_pairs, config.eval_pairs);
    let val_samples = samples_for(&mut source, &val_pairs)?;
    let monitor_samples = samples_for(&mut source, &monitor_pairs)?;
    let lambda = config.lambda_data;

    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let p = o.metrics_log();
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let save = |model: &Model, epoch: usize, path: &Path| -> Result<()> {
        save_checkpoint(
            &Checkpoint {
                model: model.clone(),
                norm: norm.clone(),
                train_config: config.clone(),
                epoch,
            },
            path,
        )
    };

    if let Some(o) = out {
        save(&model, 0, &o.checkpoint())?;
    }
    let initial = batch_loss(&model, &monitor_samples, lambda)?;
    info!(
        "{kind:?}: {} parameters, {} training pairs, initial loss {:.4e} (deg {:.4e})",
        model.param_count(),
        train_pairs.len(),
        initial.total,
        initial.deg
    );
    let mut records = Vec::with_capacity(config.n_epochs);
    let mut best_val = f64::INFINITY;
    let mut step = 0usize;

    for epoch in 0..config.n_epochs {
        let lr = multistep_lr(epoch, config.base_lr, &config.lr_milestones, config.lr_gamma);
        let mut order = train_pairs.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", epoch as u64)));
        if let Some(p) = config.pairs_per_epoch {
            order.truncate(p);
        }
        let mut epoch_parts = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let mut samples = samples_for(&mut source, batch)?;
            for (b, s) in samples.iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    "noise",
                    (step * config.batch_size + b) as u64,
                ));
                add_noise(&mut s.feats, config.sigma_noise, &mut rng)?;
            }
            let (p, grads) = loss_and_gradients(&model, &samples, lambda)?;
            if !p.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| x.is_nan())) {
                return Err(Error::NanLoss { epoch, step });
            }
            let mut params: Vec<&mut DenseTensor> = model.params_mut();
            adam_step(&mut params, &grads, &names, &mut adam, lr)?;
            epoch_parts.push(p);
            step += 1;
        }
        let mean = mean_parts(&epoch_parts);
        let val_loss = if val_samples.is_empty() {
            None
        } else {
            Some(batch_loss(&model, &val_samples, lambda)?.total)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            loss_total: mean.total,
            loss_data: mean.data,
            loss_deg: mean.deg,
            val_loss,
        };
        if let Some((file, path)) = log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(o) = out {
            if let Some(v) = val_loss.filter(|v| *v < best_val) {
                best_val = v;
                save(&model, epoch + 1, &o.best_checkpoint())?;
            }
            if (epoch + 1) % config.checkpoint_every == 0 {
                save(&model, epoch + 1, &o.checkpoint())?;
            }
        }
        if epoch % 10 == 0 || epoch + 1 == config.n_epochs {
            info!(
                "epoch {epoch}: lr {lr:.2e} loss {:.4e} (data {:.4e}, deg {:.4e}) val {:?}",
                mean.total, mean.data, mean.deg, val_loss
            );
        }
        records.push(rec);
    }

    if let Some(o) = out {
        save(&model, config.n_epochs, &o.checkpoint())?;
    }
    let final_train_loss = batch_loss(&model, &monitor_samples, lambda)?;
    if !final_train_loss.total.is_finite() {
        warn!("final training loss is not finite");
    }
    Ok(TrainOutcome {
        model,
        norm,
        split,
        records,
        initial_train_loss: initial,
        final_train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_chain, ChainParams};
    use crate::metriplectic::{build_l, build_m, flat_len};
    use rand::Rng;

    #[test]
    fn ground_truth_rate_examples() {
        assert_eq!(ground_truth_zdot(&[1.0, 2.0], &[1.0, 2.0], 0.1).unwrap(), vec![0.0, 0.0]);
        let r = ground_truth_zdot(&[0.0], &[0.1], 0.05).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15);
        let z = [0.3, -1.7, 2.5];
        let next = [0.31, -1.65, 2.4];
        let dt = 0.125;
        let r = ground_truth_zdot(&z, &next, dt).unwrap();
        let back = crate::metriplectic::euler_step(&z, &r, dt, 0).unwrap();
        for (a, b) in back.iter().zip(&next) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn data_loss_examples_and_oracle() {
        assert_eq!(loss_data(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_data(&[1.0; 7], &[0.0; 7]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..50);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut s = 0.0;
            for i in 0..n {
                s += (a[i] - b[i]).powi(2);
            }
            assert!((loss_data(&a, &b).unwrap() - s / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn degeneracy_loss_examples_and_oracle() {
        let n = 3;
        let t = flat_len(n);
        let zero = MetriplecticOps::from_flat(n, &vec![0.0; 2 * t], &vec![0.0; 2 * t], &[], &[]).unwrap();
        let g = GradientField {
            n_dof: n,
            grad_e: vec![1.0; 6],
            grad_s: vec![-2.0; 6],
        };
        assert_eq!(loss_degeneracy(&zero, &g).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_v = 4;
        let l: Vec<f64> = (0..n_v * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..n_v * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ge: Vec<f64> = (0..n_v * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gs: Vec<f64> = (0..n_v * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ops = MetriplecticOps::from_flat(n, &l, &m, &[], &[]).unwrap();
        let grads = GradientField {
            n_dof: n,
            grad_e: ge.clone(),
            grad_s: gs.clone(),
        };
        let mut oracle = 0.0;
        for i in 0..n_v {
            let li = build_l(&l[i * t..(i + 1) * t], n).unwrap();
            let mi = build_m(&m[i * t..(i + 1) * t], n).unwrap();
            for r in 0..n {
                let mut a = 0.0;
                let mut b = 0.0;
                for c in 0..n {
                    a += li[r * n + c] * gs[i * n + c];
                    b += mi[r * n + c] * ge[i * n + c];
                }
                oracle += a * a + b * b;
            }
        }
        oracle /= n_v as f64;
        assert!((loss_degeneracy(&ops, &grads).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.3, 10.0).unwrap(), 3.0);
        assert_eq!(total_loss(0.5, 0.5, 1.0).unwrap(), 1.0);
        assert!(total_loss(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_dataset(38, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 4, 4));
        assert_eq!(split_dataset(38, 1).unwrap(), s);
        assert_ne!(split_dataset(38, 2).unwrap(), s);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..38).collect::<Vec<_>>());
        assert!(split_dataset(2, 0).is_err());
        let s = split_dataset(3, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    fn tiny_chain() -> TrajectoryDataset {
        generate_chain(&ChainParams {
            n_masses: 5,
            n_steps: 6,
            n_trajectories: 4,
            seed: 2,
            ..ChainParams::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden_dim: 6,
            n_passes: 2,
            mlp_layers: 1,
            batch_size: 3,
            n_epochs: 3,
            pairs_per_epoch: None,
            eval_pairs: 8,
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn norm_stats_come_from_the_training_split_only() {
        let mut ds = tiny_chain();
        let split = split_dataset(ds.trajectories.len(), 0).unwrap();
        // Make the validation trajectory unmistakable.
        for row in ds.trajectories[split.val[0]].states.chunks_mut(3) {
            row[1] *= 10.0;
        }
        let train_only = compute_norm_stats(&ds, &split.train).unwrap();
        let mut with_val = split.train.clone();
        with_val.extend(&split.val);
        assert_ne!(compute_norm_stats(&ds, &with_val).unwrap(), train_only);
        let outcome = train(&ds, &TrainConfig { n_epochs: 0, ..tiny_config() }, ModelKind::Tignn, None).unwrap();
        assert_eq!(outcome.norm, train_only);
    }

    #[test]
    fn gradient_is_affine_in_lambda() {
        let ds = tiny_chain();
        let split = split_dataset(4, 0).unwrap();
        let norm = compute_norm_stats(&ds, &split.train).unwrap();
        let mut src = PairSource::new(&ds, &norm);
        let samples = samples_for(&mut src, &[(split.train[0], 1), (split.train[1], 3)]).unwrap();
        let model = Model::new(tiny_config().model_config(ModelKind::Tignn, &ds), 4).unwrap();
        let flat = |g: Vec<Vec<f64>>| g.into_iter().flatten().collect::<Vec<f64>>();
        let lambdas = [0.5, 3.0, 10.0];
        let g: Vec<Vec<f64>> = lambdas
            .iter()
            .map(|&l| flat(loss_and_gradients(&model, &samples, l).unwrap().1))
            .collect();
        let ratio = (lambdas[2] - lambdas[0]) / (lambdas[1] - lambdas[0]);
        for i in 0..g[0].len() {
            let predicted = g[0][i] + ratio * (g[1][i] - g[0][i]);
            assert!((predicted - g[2][i]).abs() <= 1e-9 * (1.0 + g[2][i].abs()));
        }
        // And each λ agrees with finite differences on a few coordinates.
        for &l in &lambdas {
            let (_, analytic) = loss_and_gradients(&model, &samples, l).unwrap();
            let analytic = flat(analytic);
            let x0 = model.flat_params();
            for &i in &[0usize, x0.len() / 3, x0.len() - 1] {
                let h = 1e-6;
                let eval = |v: f64| {
                    let mut m = model.clone();
                    let mut x = x0.clone();
                    x[i] = v;
                    m.set_flat_params(&x).unwrap();
                    batch_loss(&m, &samples, l).unwrap().total
                };
                let fd = (eval(x0[i] + h) - eval(x0[i] - h)) / ((x0[i] + h) - (x0[i] - h));
                assert!((fd - analytic[i]).abs() <= 1e-5 * (1e-3 + fd.abs().max(analytic[i].abs())));
            }
        }
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let ds = tiny_chain();
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs { dir: dir.path().to_path_buf() };
        let cfg = TrainConfig { n_epochs: 0, ..tiny_config() };
        let outcome = train(&ds, &cfg, ModelKind::Tignn, Some(&out)).unwrap();
        assert!(outcome.records.is_empty());
        let ck = load_checkpoint(&out.checkpoint()).unwrap();
        assert_eq!(ck.epoch, 0);
        let fresh = Model::new(cfg.model_config(ModelKind::Tignn, &ds), derive_seed(cfg.seed, "init", 0)).unwrap();
        assert_eq!(ck.model, fresh);
        assert!(!out.best_checkpoint().exists());
        assert_eq!(fs::read_to_string(out.metrics_log()).unwrap(), "");
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let ds = tiny_chain();
        let cfg = tiny_config();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let out = TrainOutputs { dir: dir.path().to_path_buf() };
            let o = train(&ds, &cfg, ModelKind::Tignn, Some(&out)).unwrap();
            (o, fs::read(out.checkpoint()).unwrap(), fs::read_to_string(out.metrics_log()).unwrap())
        };
        let (a, ck_a, log_a) = run();
        let (b, ck_b, log_b) = run();
        assert_eq!(ck_a, ck_b);
        assert_eq!(log_a, log_b);
        assert_eq!(a.records, b.records);
        assert_eq!(log_a.lines().count(), cfg.n_epochs);
        let rec: EpochRecord = serde_json::from_str(log_a.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 0);
        assert!(rec.loss_deg > 0.0 && rec.val_loss.is_some());
        assert_ne!(a.model, Model::new(cfg.model_config(ModelKind::Tignn, &ds), derive_seed(0, "init", 0)).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_head_layouts() {
        let ds = tiny_chain();
        let cfg = tiny_config();
        let norm = compute_norm_stats(&ds, &[0, 1]).unwrap();
        for kind in [ModelKind::Tignn, ModelKind::Vanilla] {
            let ck = Checkpoint {
                model: Model::new(cfg.model_config(kind, &ds), 3).unwrap(),
                norm: norm.clone(),
                train_config: cfg.clone(),
                epoch: 7,
            };
            let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
            assert_eq!(back, ck);
        }
        let t = Model::new(cfg.model_config(ModelKind::Tignn, &ds), 3).unwrap();
        let v = Model::new(cfg.model_config(ModelKind::Vanilla, &ds), 3).unwrap();
        assert!(t.param_names().iter().any(|n| n.starts_with("head_l.")));
        assert!(v.param_names().iter().any(|n| n.starts_with("head_zdot.")));
        assert!(!v.param_names().iter().any(|n| n.starts_with("head_l.")));
    }

    #[test]
    fn dataset_file_is_not_a_checkpoint() {
        let bytes = crate::data::encode_dataset(&tiny_chain()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn nan_data_aborts_with_context() {
        let ds = tiny_chain();
        let cfg = TrainConfig { base_lr: 1e300, ..tiny_config() };
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs { dir: dir.path().to_path_buf() };
        let err = train(&ds, &cfg, ModelKind::Tignn, Some(&out)).unwrap_err();
        assert!(matches!(err, Error::NanLoss { step, .. } if step > 0), "{err}");
        assert!(err.to_string().contains("epoch"));
        assert_eq!(load_checkpoint(&out.checkpoint()).unwrap().epoch, 0);
    }
}
