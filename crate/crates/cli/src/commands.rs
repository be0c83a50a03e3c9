use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use tignn_core::data::{
    conservation_summary, generate_chain, generate_lattice, load_dataset, save_dataset, DatasetMeta, Trajectory,
    TrajectoryDataset,
};
use tignn_core::eval::{
    diagnostics_csv, evaluate, forward_memory, memory_report, rollout as run_rollout, trajectory_metrics,
    GroundTruthRates, LearnedModel, ZdotModel,
};
use tignn_core::training::{load_checkpoint, split_dataset, train as run_train, Checkpoint, TrainOutputs};
use tignn_core::Error;

use crate::config::{resolve_output, GeneratorKind, RunConfig, SplitKind};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NAN: u8 = 4;
pub const EXIT_DIVERGED: u8 = 5;

/// Failures that need a dedicated exit code but do not come from the library.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("rollout diverged at step {step}; partial output written to {path}")]
    Diverged { step: usize, path: PathBuf },
}

impl CliError {
    pub fn validation(e: impl std::fmt::Display) -> anyhow::Error {
        CliError::Validation(format!("{e:#}")).into()
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Validation(_) => EXIT_VALIDATION,
                CliError::Diverged { .. } => EXIT_DIVERGED,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NanLoss { .. } => EXIT_NAN,
                Error::Divergence { .. } => EXIT_DIVERGED,
                Error::Io { .. } => EXIT_FAILURE,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_FAILURE
}

fn output_path(cfg: &RunConfig, default: &str) -> PathBuf {
    resolve_output(cfg.output.as_deref().unwrap_or(Path::new(default)))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::validation(format!("no {what} given (use --{what} or the config file)")))
}

fn load_checked_dataset(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let path = required(&cfg.dataset, "dataset")?;
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if let Some(n) = cfg.n_dof {
        if n != ds.n_dof() {
            return Err(CliError::validation(format!(
                "config expects n_dof = {n}, dataset {} has {}",
                path.display(),
                ds.n_dof()
            )));
        }
    }
    Ok(ds)
}

fn load_matching_checkpoint(cfg: &RunConfig, ds: &TrajectoryDataset) -> Result<Checkpoint> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.norm.n_dof() != ds.n_dof() {
        return Err(CliError::validation(format!(
            "checkpoint was trained on n_dof = {}, dataset has {}",
            ck.norm.n_dof(),
            ds.n_dof()
        )));
    }
    Ok(ck)
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let ds = match cfg.generator {
        GeneratorKind::Chain => generate_chain(&cfg.chain),
        GeneratorKind::Lattice => generate_lattice(&cfg.lattice),
    }
    .map_err(CliError::validation)?;
    let path = output_path(cfg, "dataset.tgd");
    ensure_parent(&path)?;
    save_dataset(&ds, &path)?;

    let mut text = format!(
        "dataset: {}\ntrajectories: {}\nsteps: {}\ndt: {}\nnodes: {}\nn_dof: {}\n",
        path.display(),
        ds.trajectories.len(),
        ds.meta.n_steps,
        ds.meta.dt,
        ds.trajectories.first().map_or(0, |t| t.n_v),
        ds.n_dof()
    );
    if let Some(c) = conservation_summary(&ds)? {
        text.push_str(&format!(
            "generator: {}\nmax relative energy drift: {:e}\ninternal energy monotone: {}\n",
            c.generator, c.max_relative_drift, c.internal_energy_monotone
        ));
        if c.max_relative_drift > 1e-8 {
            warn!("energy drift {:e} exceeds 1e-8; consider more substeps", c.max_relative_drift);
        }
    }
    write(&path.with_extension("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.train.validate().map_err(CliError::validation)?;
    let ds = load_checked_dataset(cfg)?;
    let out = TrainOutputs {
        dir: output_path(cfg, "run"),
    };
    fs::create_dir_all(&out.dir).with_context(|| format!("creating {}", out.dir.display()))?;
    write(&out.dir.join("config.toml"), cfg.to_toml()?)?;
    info!(
        "training {:?} for {} epochs on {} trajectories",
        cfg.model,
        cfg.train.n_epochs,
        ds.trajectories.len()
    );
    let outcome = run_train(&ds, &cfg.train, cfg.model, Some(&out))?;
    let val = outcome.records.last().and_then(|r| r.val_loss);
    println!("checkpoint: {}", out.checkpoint().display());
    println!(
        "train loss: {:e} (data {:e}, degeneracy {:e})",
        outcome.final_train_loss.total, outcome.final_train_loss.data, outcome.final_train_loss.deg
    );
    match val {
        Some(v) => println!("val loss: {v:e}"),
        None => println!("val loss: n/a"),
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ds = load_checked_dataset(cfg)?;
    let ck = load_matching_checkpoint(cfg, &ds)?;
    let split = split_dataset(ds.trajectories.len(), ck.train_config.seed)?;
    let ids = match cfg.eval.split {
        SplitKind::Train => split.train,
        SplitKind::Val => split.val,
        SplitKind::Test => split.test,
    };
    if ids.is_empty() {
        return Err(CliError::validation(format!("the {:?} split is empty", cfg.eval.split)));
    }
    let mut report = if cfg.eval.oracle {
        evaluate(
            |k| {
                Box::new(GroundTruthRates {
                    dataset: &ds,
                    trajectory: k,
                    start: 0,
                }) as Box<dyn ZdotModel>
            },
            &ds,
            &ids,
        )?
    } else {
        evaluate(
            |_| {
                Box::new(LearnedModel {
                    model: &ck.model,
                    norm: &ck.norm,
                }) as Box<dyn ZdotModel>
            },
            &ds,
            &ids,
        )?
    };
    let g = ds.graph_at(ids[0], 0)?;
    report.memory = Some(memory_report(g.n_v, g.n_e(), ds.n_dof())?);

    let dir = output_path(cfg, "eval");
    write(&dir.join("metrics.csv"), report.to_csv())?;
    write(&dir.join("metrics.json"), report.to_json()?)?;
    for (name, s) in &report.summary {
        let se = s.rmse_se.map_or("n/a".to_string(), |v| format!("{v:e}"));
        println!(
            "{name}: rmse mean {:e} ± {se}, median {:e}, rrmse mean {}",
            s.rmse_mean,
            s.rmse_median,
            s.rrmse_mean.map_or("n/a".to_string(), |v| format!("{v:e}"))
        );
    }
    println!("diverged: {}/{}", report.n_diverged, report.trajectories.len());
    if let Some(m) = report.memory {
        println!(
            "operator storage: nodal {} vs global {} entries (×{:.1})",
            m.nodal_entries, m.global_entries, m.ratio
        );
    }
    Ok(())
}

pub fn rollout(cfg: &RunConfig) -> Result<()> {
    let ds = load_checked_dataset(cfg)?;
    let ck = load_matching_checkpoint(cfg, &ds)?;
    let (k, start) = (cfg.rollout.trajectory, cfg.rollout.start);
    if k >= ds.trajectories.len() || start > ds.meta.n_steps {
        return Err(CliError::validation(format!(
            "initial condition (trajectory {k}, step {start}) is outside the dataset ({} trajectories, {} steps)",
            ds.trajectories.len(),
            ds.meta.n_steps
        )));
    }
    let steps = cfg.rollout.steps.unwrap_or(ds.meta.n_steps - start);
    let model = LearnedModel {
        model: &ck.model,
        norm: &ck.norm,
    };
    let initial = ds.graph_at(k, start)?;
    let res = run_rollout(&model, &initial, ds.meta.connectivity, steps, ds.meta.dt)?;

    let tr = &ds.trajectories[k];
    let out = TrajectoryDataset {
        meta: DatasetMeta {
            n_steps: res.n_states() - 1,
            generator: serde_json::json!({
                "name": "rollout",
                "source": { "trajectory": k, "start": start },
                "model": ck.model.config.kind,
                "divergence_step": res.divergence_step,
            }),
            ..ds.meta.clone()
        },
        trajectories: vec![Trajectory {
            n_v: tr.n_v,
            states: res.states.clone(),
            loads: tr.loads.clone(),
            node_types: tr.node_types.clone(),
        }],
    };
    let dir = output_path(cfg, "rollout");
    let traj_path = dir.join("rollout.tgd");
    ensure_parent(&traj_path)?;
    save_dataset(&out, &traj_path)?;
    write(&dir.join("diagnostics.csv"), diagnostics_csv(&res))?;
    println!("trajectory: {}", traj_path.display());

    if start + steps <= ds.meta.n_steps {
        let m = trajectory_metrics(&res, &ds, k, start)?;
        for (name, v) in &m.variables {
            println!("{name}: rmse {:e}", v.rmse);
        }
    }
    if let Some(step) = res.divergence_step {
        return Err(CliError::Diverged { step, path: dir }.into());
    }
    Ok(())
}

pub fn report_memory(cfg: &RunConfig, n_v: Option<usize>, n_e: Option<usize>, n_dof: Option<usize>) -> Result<()> {
    // Dimensions come from the flags, falling back to the first dataset graph.
    let (mut v, mut e, mut d) = (n_v, n_e, n_dof.or(cfg.n_dof));
    let mut tape = None;
    if cfg.dataset.is_some() {
        let ds = load_checked_dataset(cfg)?;
        let g = ds.graph_at(0, 0)?;
        v = v.or(Some(g.n_v));
        e = e.or(Some(g.n_e()));
        d = d.or(Some(ds.n_dof()));
        if cfg.checkpoint.is_some() {
            let ck = load_matching_checkpoint(cfg, &ds)?;
            tape = Some(forward_memory(&ck.model, &g, &ck.norm)?);
        }
    }
    let (Some(v), Some(d)) = (v, d) else {
        return Err(CliError::validation("need --n-v and --n-dof, or a dataset"));
    };
    let report = memory_report(v, e.unwrap_or(0), d).map_err(CliError::validation)?;
    let mut json = serde_json::to_value(report)?;
    if let Some(t) = tape {
        json["forward_pass"] = serde_json::json!({
            "operator_entries": t.operator_entries,
            "largest_buffer": t.largest_buffer,
            "total_entries": t.total_entries,
        });
    }
    let text = serde_json::to_string_pretty(&json)?;
    if cfg.output.is_some() {
        write(&output_path(cfg, "memory.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}
