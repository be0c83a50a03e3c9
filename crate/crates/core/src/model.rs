//! Encode-process-decode graph network.
//!
//! Two encoders lift node and edge features to width `hidden_dim`. A shared
//! processor block runs `n_passes` residual message-passing rounds with the
//! external load injected into every node update. The thermodynamic variant
//! ends in four heads: `∂e/∂z`, `∂s/∂z`, and the flattened `l`/`m` operators.
//! The `l`/`m` heads read `[v_i ‖ v_j ‖ e_ij]` for edges and
//! `[v_i ‖ v_i ‖ 0]` for the node's own operators. The vanilla variant maps
//! node latents straight to `ż`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge_feature_dim, node_feature_dim, Edge, FeatureSet};
use crate::metriplectic::{self, flat_len, GradientField, MetriplecticOps};
use crate::nn::{Activation, BoundMlp, DenseTensor, Mlp, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tignn,
    Vanilla,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tignn" => Ok(ModelKind::Tignn),
            "vanilla" => Ok(ModelKind::Vanilla),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_dof: usize,
    pub d_space: usize,
    pub n_types: usize,
    pub hidden_dim: usize,
    pub n_passes: usize,
    /// Hidden layers inside every MLP.
    pub mlp_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_dof == 0 || self.hidden_dim == 0 || self.n_passes == 0 || self.n_types == 0 {
            return Err(Error::Config(
                "n_dof, hidden_dim, n_passes and n_types must be positive".into(),
            ));
        }
        if self.d_space == 0 || 2 * self.d_space > self.n_dof {
            return Err(Error::Config(format!(
                "n_dof {} cannot hold position and velocity of dimension {}",
                self.n_dof, self.d_space
            )));
        }
        Ok(())
    }

    pub fn node_in(&self) -> usize {
        node_feature_dim(self.n_dof, self.d_space, self.n_types)
    }

    pub fn edge_in(&self) -> usize {
        edge_feature_dim(self.d_space)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Heads {
    Thermo {
        grad_e: Mlp,
        grad_s: Mlp,
        l: Mlp,
        m: Mlp,
    },
    Vanilla {
        zdot: Mlp,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub edge_update: Mlp,
    pub node_update: Mlp,
    pub heads: Heads,
}

fn thermo_head_params(c: &ModelConfig) -> usize {
    let f = c.hidden_dim;
    let t = flat_len(c.n_dof);
    let mlp = |i: usize, o: usize| {
        let mut dims = vec![i];
        dims.extend(std::iter::repeat_n(f, c.mlp_layers));
        dims.push(o);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>()
    };
    2 * mlp(f, c.n_dof) + 2 * mlp(3 * f, t)
}

fn vanilla_head_params(c: &ModelConfig, width: usize) -> usize {
    let mut dims = vec![c.hidden_dim];
    dims.extend(std::iter::repeat_n(width, c.mlp_layers.max(1)));
    dims.push(c.n_dof);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Hidden width for the vanilla head so its parameter count matches the
/// four thermodynamic heads as closely as possible.
pub fn matched_vanilla_width(c: &ModelConfig) -> usize {
    let target = thermo_head_params(c) as i64;
    (1..=8 * c.hidden_dim.max(8) * c.n_dof.max(1))
        .min_by_key(|&w| (vanilla_head_params(c, w) as i64 - target).abs())
        .unwrap_or(c.hidden_dim)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.hidden_dim;
        let h = config.mlp_layers;
        let act = Activation::Swish;
        let node_encoder = Mlp::new(config.node_in(), f, f, h, act, &mut rng);
        let edge_encoder = Mlp::new(config.edge_in(), f, f, h, act, &mut rng);
        let edge_update = Mlp::new(3 * f, f, f, h, act, &mut rng);
        let node_update = Mlp::new(2 * f + config.d_space, f, f, h, act, &mut rng);
        let heads = match config.kind {
            ModelKind::Tignn => {
                let t = flat_len(config.n_dof);
                Heads::Thermo {
                    grad_e: Mlp::new(f, f, config.n_dof, h, act, &mut rng),
                    grad_s: Mlp::new(f, f, config.n_dof, h, act, &mut rng),
                    l: Mlp::new(3 * f, f, t, h, act, &mut rng),
                    m: Mlp::new(3 * f, f, t, h, act, &mut rng),
                }
            }
            ModelKind::Vanilla => {
                let w = matched_vanilla_width(&config);
                Heads::Vanilla {
                    zdot: Mlp::new(f, w, config.n_dof, h.max(1), act, &mut rng),
                }
            }
        };
        Ok(Self {
            config,
            node_encoder,
            edge_encoder,
            edge_update,
            node_update,
            heads,
        })
    }

    fn named_mlps(&self) -> Vec<(&'static str, &Mlp)> {
        let mut v = vec![
            ("node_encoder", &self.node_encoder),
            ("edge_encoder", &self.edge_encoder),
            ("edge_update", &self.edge_update),
            ("node_update", &self.node_update),
        ];
        match &self.heads {
            Heads::Thermo { grad_e, grad_s, l, m } => {
                v.extend([("head_grad_e", grad_e), ("head_grad_s", grad_s), ("head_l", l), ("head_m", m)])
            }
            Heads::Vanilla { zdot } => v.push(("head_zdot", zdot)),
        }
        v
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![
            &mut self.node_encoder,
            &mut self.edge_encoder,
            &mut self.edge_update,
            &mut self.node_update,
        ];
        match &mut self.heads {
            Heads::Thermo { grad_e, grad_s, l, m } => v.extend([grad_e, grad_s, l, m]),
            Heads::Vanilla { zdot } => v.push(zdot),
        }
        v
    }

    /// Parameter tensors with stable dotted names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = Vec::new();
        for (name, mlp) in self.named_mlps() {
            for (k, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{k}.weight"), &layer.weight));
                out.push((format!("{name}.{k}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.mlps_mut().into_iter().flat_map(|m| m.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// All parameters concatenated in binding order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::Shape {
                context: "Model::set_flat_params",
                expected: total,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let heads = match &self.heads {
            Heads::Thermo { grad_e, grad_s, l, m } => BoundHeads::Thermo {
                grad_e: grad_e.bind(tape),
                grad_s: grad_s.bind(tape),
                l: l.bind(tape),
                m: m.bind(tape),
            },
            Heads::Vanilla { zdot } => BoundHeads::Vanilla { zdot: zdot.bind(tape) },
        };
        BoundModel {
            config: self.config.clone(),
            node_encoder: self.node_encoder.bind(tape),
            edge_encoder: self.edge_encoder.bind(tape),
            edge_update: self.edge_update.bind(tape),
            node_update: self.node_update.bind(tape),
            heads,
        }
    }

    /// Node and edge latents for the given features.
    pub fn encode(&self, feats: &FeatureSet) -> Result<LatentGraph> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let inputs = b.inputs(&mut tape, feats)?;
        let lat = b.encode(&mut tape, &inputs)?;
        Ok(lat.values(&tape, self.config.hidden_dim))
    }

    /// Runs the processor on given latents.
    pub fn process(&self, latent: &LatentGraph, loads: &[f64], edges: &[Edge]) -> Result<LatentGraph> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let f = self.config.hidden_dim;
        let n_v = latent.node.len() / f;
        let lat = LatentVars {
            node: tape.leaf(n_v, f, latent.node.clone())?,
            edge: tape.leaf(edges.len(), f, latent.edge.clone())?,
        };
        let loads = tape.leaf(n_v, self.config.d_space, loads.to_vec())?;
        let out = b.process(&mut tape, lat, loads, edges)?;
        Ok(out.values(&tape, f))
    }

    /// Thermodynamic heads applied to given latents.
    pub fn decode(&self, latent: &LatentGraph, edges: &[Edge]) -> Result<NodalOutputs> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let f = self.config.hidden_dim;
        let n_v = latent.node.len() / f;
        let lat = LatentVars {
            node: tape.leaf(n_v, f, latent.node.clone())?,
            edge: tape.leaf(edges.len(), f, latent.edge.clone())?,
        };
        let out = b.decode_thermo(&mut tape, &lat, edges)?;
        out.values(&tape, self.config.n_dof)
    }

    /// Full forward pass without gradient tracking.
    pub fn predict(&self, feats: &FeatureSet, edges: &[Edge]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let rec = b.forward(&mut tape, feats, edges)?;
        rec.prediction(&tape, self.config.n_dof)
    }
}

/// Node and edge latents, `[n × hidden_dim]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGraph {
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub node: Var,
    pub edge: Var,
}

impl LatentVars {
    fn values(&self, tape: &Tape, _f: usize) -> LatentGraph {
        LatentGraph {
            node: tape.value(self.node).to_vec(),
            edge: tape.value(self.edge).to_vec(),
        }
    }
}

/// Raw decoder outputs, flattened per node and per directed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalOutputs {
    pub n_dof: usize,
    pub grad_e: Vec<f64>,
    pub grad_s: Vec<f64>,
    pub node_l: Vec<f64>,
    pub node_m: Vec<f64>,
    pub edge_l: Vec<f64>,
    pub edge_m: Vec<f64>,
}

impl NodalOutputs {
    pub fn gradients(&self) -> GradientField {
        GradientField {
            n_dof: self.n_dof,
            grad_e: self.grad_e.clone(),
            grad_s: self.grad_s.clone(),
        }
    }

    pub fn operators(&self) -> Result<MetriplecticOps> {
        MetriplecticOps::from_flat(self.n_dof, &self.node_l, &self.node_m, &self.edge_l, &self.edge_m)
    }

    fn check(&self, n_v: usize, n_e: usize) -> Result<()> {
        let t = flat_len(self.n_dof);
        let checks = [
            (self.grad_e.len(), n_v * self.n_dof),
            (self.grad_s.len(), n_v * self.n_dof),
            (self.node_l.len(), n_v * t),
            (self.node_m.len(), n_v * t),
            (self.edge_l.len(), n_e * t),
            (self.edge_m.len(), n_e * t),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::Shape {
                    context: "decoder output size",
                    expected,
                    actual,
                });
            }
        }
        let all = [&self.grad_e, &self.grad_s, &self.node_l, &self.node_m, &self.edge_l, &self.edge_m];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("decoder outputs".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub grad_e: Var,
    pub grad_s: Var,
    pub node_l: Var,
    pub node_m: Var,
    pub edge_l: Option<Var>,
    pub edge_m: Option<Var>,
}

impl OutputVars {
    fn values(&self, tape: &Tape, n_dof: usize) -> Result<NodalOutputs> {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).to_vec()).unwrap_or_default();
        let out = NodalOutputs {
            n_dof,
            grad_e: tape.value(self.grad_e).to_vec(),
            grad_s: tape.value(self.grad_s).to_vec(),
            node_l: tape.value(self.node_l).to_vec(),
            node_m: tape.value(self.node_m).to_vec(),
            edge_l: get(self.edge_l),
            edge_m: get(self.edge_m),
        };
        let n_v = out.grad_e.len() / n_dof;
        let n_e = out.edge_l.len() / flat_len(n_dof);
        out.check(n_v, n_e)?;
        Ok(out)
    }
}

/// Model output in normalized-rate coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[n_v × n_dof]` time derivative in model coordinates.
    pub zdot: Vec<f64>,
    /// Present for the thermodynamic model only.
    pub outputs: Option<NodalOutputs>,
}

/// What one forward pass left on the tape.
pub struct Recorded {
    pub zdot: Var,
    pub outputs: Option<OutputVars>,
    pub residual_l: Option<Var>,
    pub residual_m: Option<Var>,
}

impl Recorded {
    pub fn prediction(&self, tape: &Tape, n_dof: usize) -> Result<Prediction> {
        let outputs = match &self.outputs {
            Some(o) => Some(o.values(tape, n_dof)?),
            None => None,
        };
        Ok(Prediction {
            zdot: tape.value(self.zdot).to_vec(),
            outputs,
        })
    }
}

/// Inputs of one graph, recorded as tape leaves.
pub struct InputVars {
    pub node: Var,
    pub edge: Var,
    pub loads: Var,
    pub n_v: usize,
}

#[derive(Clone, Debug)]
pub enum BoundHeads {
    Thermo {
        grad_e: BoundMlp,
        grad_s: BoundMlp,
        l: BoundMlp,
        m: BoundMlp,
    },
    Vanilla {
        zdot: BoundMlp,
    },
}

/// A [`Model`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    node_encoder: BoundMlp,
    edge_encoder: BoundMlp,
    edge_update: BoundMlp,
    node_update: BoundMlp,
    heads: BoundHeads,
}

impl BoundModel {
    /// Parameter leaves in the same order as [`Model::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for m in [&self.node_encoder, &self.edge_encoder, &self.edge_update, &self.node_update] {
            v.extend(m.param_vars());
        }
        match &self.heads {
            BoundHeads::Thermo { grad_e, grad_s, l, m } => {
                for h in [grad_e, grad_s, l, m] {
                    v.extend(h.param_vars());
                }
            }
            BoundHeads::Vanilla { zdot } => v.extend(zdot.param_vars()),
        }
        v
    }

    pub fn inputs(&self, tape: &mut Tape, feats: &FeatureSet) -> Result<InputVars> {
        let c = &self.config;
        if feats.node_cols != c.node_in() {
            return Err(Error::Shape {
                context: "node features vs encoder in-dim",
                expected: c.node_in(),
                actual: feats.node_cols,
            });
        }
        if feats.edge_cols != c.edge_in() {
            return Err(Error::Shape {
                context: "edge features vs encoder in-dim",
                expected: c.edge_in(),
                actual: feats.edge_cols,
            });
        }
        Ok(InputVars {
            node: tape.leaf(feats.n_v, feats.node_cols, feats.node.clone())?,
            edge: tape.leaf(feats.n_e, feats.edge_cols, feats.edge.clone())?,
            loads: tape.leaf(feats.n_v, c.d_space, feats.loads.clone())?,
            n_v: feats.n_v,
        })
    }

    pub fn encode(&self, tape: &mut Tape, inputs: &InputVars) -> Result<LatentVars> {
        Ok(LatentVars {
            node: self.node_encoder.forward(tape, inputs.node)?,
            edge: self.edge_encoder.forward(tape, inputs.edge)?,
        })
    }

    /// Residual message passing with shared weights across passes.
    pub fn process(&self, tape: &mut Tape, mut lat: LatentVars, loads: Var, edges: &[Edge]) -> Result<LatentVars> {
        let senders: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let receivers: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let (n_v, f) = tape.dims(lat.node);
        for _ in 0..self.config.n_passes {
            let new_edge = if edges.is_empty() {
                lat.edge
            } else {
                let v_i = tape.gather_rows(lat.node, &senders)?;
                let v_j = tape.gather_rows(lat.node, &receivers)?;
                let cat = tape.concat_cols(&[lat.edge, v_i, v_j])?;
                let delta = self.edge_update.forward(tape, cat)?;
                tape.add(lat.edge, delta)?
            };
            let agg = if edges.is_empty() {
                tape.zeros(n_v, f)
            } else {
                tape.scatter_add_rows(new_edge, &receivers, n_v)?
            };
            let cat = tape.concat_cols(&[lat.node, agg, loads])?;
            let delta = self.node_update.forward(tape, cat)?;
            lat = LatentVars {
                node: tape.add(lat.node, delta)?,
                edge: new_edge,
            };
        }
        Ok(lat)
    }

    pub fn decode_thermo(&self, tape: &mut Tape, lat: &LatentVars, edges: &[Edge]) -> Result<OutputVars> {
        let BoundHeads::Thermo { grad_e, grad_s, l, m } = &self.heads else {
            return Err(Error::Contract("decode needs thermodynamic heads".into()));
        };
        let (n_v, f) = tape.dims(lat.node);
        let ge = grad_e.forward(tape, lat.node)?;
        let gs = grad_s.forward(tape, lat.node)?;
        let zero = tape.zeros(n_v, f);
        let self_pair = tape.concat_cols(&[lat.node, lat.node, zero])?;
        let node_l = l.forward(tape, self_pair)?;
        let node_m = m.forward(tape, self_pair)?;
        let (edge_l, edge_m) = if edges.is_empty() {
            (None, None)
        } else {
            let senders: Vec<usize> = edges.iter().map(|e| e.0).collect();
            let receivers: Vec<usize> = edges.iter().map(|e| e.1).collect();
            let v_i = tape.gather_rows(lat.node, &senders)?;
            let v_j = tape.gather_rows(lat.node, &receivers)?;
            let pair = tape.concat_cols(&[v_i, v_j, lat.edge])?;
            (Some(l.forward(tape, pair)?), Some(m.forward(tape, pair)?))
        };
        Ok(OutputVars {
            grad_e: ge,
            grad_s: gs,
            node_l,
            node_m,
            edge_l,
            edge_m,
        })
    }

    /// Encode, process, decode and (for the thermodynamic model) assemble ż.
    pub fn forward(&self, tape: &mut Tape, feats: &FeatureSet, edges: &[Edge]) -> Result<Recorded> {
        if feats.n_e != edges.len() {
            return Err(Error::Shape {
                context: "edge features vs edge list",
                expected: edges.len(),
                actual: feats.n_e,
            });
        }
        let inputs = self.inputs(tape, feats)?;
        let lat = self.encode(tape, &inputs)?;
        let lat = self.process(tape, lat, inputs.loads, edges)?;
        match &self.heads {
            BoundHeads::Vanilla { zdot } => Ok(Recorded {
                zdot: zdot.forward(tape, lat.node)?,
                outputs: None,
                residual_l: None,
                residual_m: None,
            }),
            BoundHeads::Thermo { .. } => {
                let out = self.decode_thermo(tape, &lat, edges)?;
                let n = self.config.n_dof;
                let dynamics = match (out.edge_l, out.edge_m) {
                    (Some(el), Some(em)) => metriplectic::record_dynamics(
                        tape, n, out.grad_e, out.grad_s, out.node_l, out.node_m, el, em, edges, inputs.n_v,
                    )?,
                    _ => {
                        let empty = tape.zeros(0, flat_len(n));
                        metriplectic::record_dynamics(
                            tape, n, out.grad_e, out.grad_s, out.node_l, out.node_m, empty, empty, edges,
                            inputs.n_v,
                        )?
                    }
                };
                Ok(Recorded {
                    zdot: dynamics.zdot,
                    outputs: Some(out),
                    residual_l: Some(dynamics.residual_l),
                    residual_m: Some(dynamics.residual_m),
                })
            }
        }
    }
}
