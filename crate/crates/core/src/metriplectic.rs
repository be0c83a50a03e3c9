//! Port-metriplectic evolution at node level.
//!
//! Every node `i` carries its own Poisson matrix `L_i` (skew-symmetric) and
//! friction matrix `M_i` (positive semi-definite). Every directed edge
//! `(i, j)` carries port operators `L_ij`, `M_ij` acting on the neighbour's
//! gradients:
//!
//! ```text
//! ż_i = L_i ∂e_i + M_i ∂s_i − Σ_(i,j) [ L_ij ∂e_j + M_ij ∂s_j ]
//! ```
//!
//! The first law and second law hold per node when `L_i ∂s_i = 0` and
//! `M_i ∂e_i = 0`; the model is trained to satisfy those softly.
//!
//! Matrices are stored row-major, `n_dof × n_dof`, one per node/edge.

use crate::error::{Error, Result};
use crate::graph::Edge;
use crate::nn::{Tape, Var};

/// Guard for [`global_assemble`]: largest `n_v · n_dof` accepted.
pub const GLOBAL_ASSEMBLY_LIMIT: usize = 2000;

pub fn flat_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Column map from a flat lower triangle into a row-major `n×n` matrix.
pub fn lower_index_map(n: usize) -> Vec<Option<usize>> {
    let mut map = vec![None; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            map[i * n + j] = Some(k);
            k += 1;
        }
    }
    map
}

/// Row-major fill of the lower triangle (diagonal included).
pub fn unflatten_lower(flat: &[f64], n: usize) -> Result<Vec<f64>> {
    if flat.len() != flat_len(n) {
        return Err(Error::Shape {
            context: "unflatten_lower",
            expected: flat_len(n),
            actual: flat.len(),
        });
    }
    Ok(lower_index_map(n)
        .into_iter()
        .map(|src| src.map_or(0.0, |k| flat[k]))
        .collect())
}

/// `L = l − lᵀ`.
pub fn build_l(flat: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = unflatten_lower(flat, n)?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = l[i * n + j] - l[j * n + i];
        }
    }
    Ok(out)
}

/// `M = m mᵀ`.
pub fn build_m(flat: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = unflatten_lower(flat, n)?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

fn matvec(mat: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = mat[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// Reshaped operators for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MetriplecticOps {
    pub n_dof: usize,
    pub node_l: Vec<f64>,
    pub node_m: Vec<f64>,
    pub edge_l: Vec<f64>,
    pub edge_m: Vec<f64>,
}

impl MetriplecticOps {
    /// Builds `L`/`M` from flattened lower-triangular rows.
    pub fn from_flat(
        n_dof: usize,
        node_l: &[f64],
        node_m: &[f64],
        edge_l: &[f64],
        edge_m: &[f64],
    ) -> Result<Self> {
        let t = flat_len(n_dof);
        let map = |flat: &[f64], f: fn(&[f64], usize) -> Result<Vec<f64>>| -> Result<Vec<f64>> {
            if flat.len() % t != 0 {
                return Err(Error::Shape {
                    context: "MetriplecticOps::from_flat",
                    expected: t,
                    actual: flat.len() % t,
                });
            }
            let mut out = Vec::with_capacity(flat.len() / t * n_dof * n_dof);
            for row in flat.chunks(t) {
                out.extend(f(row, n_dof)?);
            }
            Ok(out)
        };
        let ops = Self {
            n_dof,
            node_l: map(node_l, build_l)?,
            node_m: map(node_m, build_m)?,
            edge_l: map(edge_l, build_l)?,
            edge_m: map(edge_m, build_m)?,
        };
        if ops.node_l.len() != ops.node_m.len() || ops.edge_l.len() != ops.edge_m.len() {
            return Err(Error::Contract("L and M operator counts differ".into()));
        }
        Ok(ops)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_l.len() / (self.n_dof * self.n_dof)
    }

    pub fn n_edges(&self) -> usize {
        self.edge_l.len() / (self.n_dof * self.n_dof)
    }

    fn block(data: &[f64], k: usize, n: usize) -> &[f64] {
        &data[k * n * n..(k + 1) * n * n]
    }

    pub fn l_node(&self, i: usize) -> &[f64] {
        Self::block(&self.node_l, i, self.n_dof)
    }

    pub fn m_node(&self, i: usize) -> &[f64] {
        Self::block(&self.node_m, i, self.n_dof)
    }

    pub fn l_edge(&self, e: usize) -> &[f64] {
        Self::block(&self.edge_l, e, self.n_dof)
    }

    pub fn m_edge(&self, e: usize) -> &[f64] {
        Self::block(&self.edge_m, e, self.n_dof)
    }
}

/// Per-node `∂e_i/∂z_i` and `∂s_i/∂z_i`, `[n_v × n_dof]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub n_dof: usize,
    pub grad_e: Vec<f64>,
    pub grad_s: Vec<f64>,
}

impl GradientField {
    pub fn n_nodes(&self) -> usize {
        self.grad_e.len() / self.n_dof
    }

    pub fn e(&self, i: usize) -> &[f64] {
        &self.grad_e[i * self.n_dof..(i + 1) * self.n_dof]
    }

    pub fn s(&self, i: usize) -> &[f64] {
        &self.grad_s[i * self.n_dof..(i + 1) * self.n_dof]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            n_dof: self.n_dof,
            grad_e: self.grad_e.iter().map(|x| x * alpha).collect(),
            grad_s: self.grad_s.iter().map(|x| x * alpha).collect(),
        }
    }
}

fn check_nodes(ops: &MetriplecticOps, grads: &GradientField) -> Result<usize> {
    if ops.n_dof != grads.n_dof {
        return Err(Error::Shape {
            context: "operator vs gradient n_dof",
            expected: ops.n_dof,
            actual: grads.n_dof,
        });
    }
    let n_v = grads.n_nodes();
    if ops.n_nodes() != n_v || grads.grad_s.len() != grads.grad_e.len() {
        return Err(Error::Contract(format!(
            "operators cover {} nodes, gradients cover {n_v}",
            ops.n_nodes()
        )));
    }
    Ok(n_v)
}

fn check_coverage(ops: &MetriplecticOps, grads: &GradientField, edges: &[Edge]) -> Result<usize> {
    let n_v = check_nodes(ops, grads)?;
    if ops.n_edges() != edges.len() {
        return Err(Error::Contract(format!(
            "{} edges listed but only {} edge operators",
            edges.len(),
            ops.n_edges()
        )));
    }
    Ok(n_v)
}

/// Nodal port-metriplectic time derivative, `[n_v × n_dof]`.
pub fn nodal_zdot(ops: &MetriplecticOps, grads: &GradientField, edges: &[Edge]) -> Result<Vec<f64>> {
    let n_v = check_coverage(ops, grads, edges)?;
    let n = ops.n_dof;
    let mut zdot = vec![0.0; n_v * n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut port = vec![0.0; n_v * n];
    for i in 0..n_v {
        matvec(ops.l_node(i), grads.e(i), &mut a);
        matvec(ops.m_node(i), grads.s(i), &mut b);
        for k in 0..n {
            zdot[i * n + k] = a[k] + b[k];
        }
    }
    for (e, &(i, j)) in edges.iter().enumerate() {
        if i >= n_v || j >= n_v {
            return Err(Error::Contract(format!("edge ({i},{j}) out of range")));
        }
        matvec(ops.l_edge(e), grads.e(j), &mut a);
        matvec(ops.m_edge(e), grads.s(j), &mut b);
        for k in 0..n {
            port[i * n + k] += a[k] + b[k];
        }
    }
    for (z, p) in zdot.iter_mut().zip(&port) {
        *z -= p;
    }
    Ok(zdot)
}

/// Per-node `(L_i ∂s_i, M_i ∂e_i)`, each `[n_v × n_dof]`.
pub fn degeneracy_residuals(ops: &MetriplecticOps, grads: &GradientField) -> Result<(Vec<f64>, Vec<f64>)> {
    check_nodes(ops, grads)?;
    let n = ops.n_dof;
    let n_v = grads.n_nodes();
    let mut r_l = vec![0.0; n_v * n];
    let mut r_m = vec![0.0; n_v * n];
    for i in 0..n_v {
        matvec(ops.l_node(i), grads.s(i), &mut r_l[i * n..(i + 1) * n]);
        matvec(ops.m_node(i), grads.e(i), &mut r_m[i * n..(i + 1) * n]);
    }
    Ok((r_l, r_m))
}

/// `z + ż·dt`. A non-finite rate is reported as divergence at `step`.
pub fn euler_step(z: &[f64], zdot: &[f64], dt: f64, step: usize) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if z.len() != zdot.len() {
        return Err(Error::Shape {
            context: "euler_step",
            expected: z.len(),
            actual: zdot.len(),
        });
    }
    if zdot.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { step });
    }
    Ok(z.iter().zip(zdot).map(|(a, b)| a + b * dt).collect())
}

/// `(dE/dt, dS/dt) = (Σ ∂e_i·ż_i, Σ ∂s_i·ż_i)`.
pub fn energy_entropy_rates(grads: &GradientField, zdot: &[f64]) -> Result<(f64, f64)> {
    if zdot.len() != grads.grad_e.len() {
        return Err(Error::Shape {
            context: "energy_entropy_rates",
            expected: grads.grad_e.len(),
            actual: zdot.len(),
        });
    }
    let de = grads.grad_e.iter().zip(zdot).map(|(a, b)| a * b).sum();
    let ds = grads.grad_s.iter().zip(zdot).map(|(a, b)| a * b).sum();
    Ok((de, ds))
}

/// Dense block assembly of the whole-graph operators.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSystem {
    pub size: usize,
    pub l: Vec<f64>,
    pub m: Vec<f64>,
    pub grad_e: Vec<f64>,
    pub grad_s: Vec<f64>,
}

impl GlobalSystem {
    /// `𝕃·∇E + 𝕄·∇S`.
    pub fn zdot(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.size];
        let mut b = vec![0.0; self.size];
        matvec(&self.l, &self.grad_e, &mut a);
        matvec(&self.m, &self.grad_s, &mut b);
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }
}

/// Assembles `𝕃`, `𝕄` of size `(n_v·n_dof)²`: diagonal blocks `L_i`/`M_i`,
/// off-diagonal block `(i, j)` equal to `−L_ij`/`−M_ij`.
pub fn global_assemble(ops: &MetriplecticOps, grads: &GradientField, edges: &[Edge]) -> Result<GlobalSystem> {
    let n_v = check_coverage(ops, grads, edges)?;
    let n = ops.n_dof;
    let size = n_v * n;
    if size > GLOBAL_ASSEMBLY_LIMIT {
        return Err(Error::AssemblyTooLarge {
            size,
            limit: GLOBAL_ASSEMBLY_LIMIT,
            entries: 2 * size * size,
        });
    }
    let mut l = vec![0.0; size * size];
    let mut m = vec![0.0; size * size];
    let put = |dst: &mut Vec<f64>, bi: usize, bj: usize, blk: &[f64], sign: f64| {
        for r in 0..n {
            for c in 0..n {
                dst[(bi * n + r) * size + bj * n + c] += sign * blk[r * n + c];
            }
        }
    };
    for i in 0..n_v {
        put(&mut l, i, i, ops.l_node(i), 1.0);
        put(&mut m, i, i, ops.m_node(i), 1.0);
    }
    for (e, &(i, j)) in edges.iter().enumerate() {
        put(&mut l, i, j, ops.l_edge(e), -1.0);
        put(&mut m, i, j, ops.m_edge(e), -1.0);
    }
    Ok(GlobalSystem {
        size,
        l,
        m,
        grad_e: grads.grad_e.clone(),
        grad_s: grads.grad_s.clone(),
    })
}

/// Tape handles for the reparametrized dynamics of one graph.
pub struct TapeDynamics {
    pub zdot: Var,
    pub residual_l: Var,
    pub residual_m: Var,
}

/// Records reparametrization, the nodal port sum and the degeneracy
/// residuals on a tape. Inputs are flat decoder outputs.
#[allow(clippy::too_many_arguments)]
pub fn record_dynamics(
    tape: &mut Tape,
    n_dof: usize,
    grad_e: Var,
    grad_s: Var,
    node_l: Var,
    node_m: Var,
    edge_l: Var,
    edge_m: Var,
    edges: &[Edge],
    n_v: usize,
) -> Result<TapeDynamics> {
    let n = n_dof;
    let map = lower_index_map(n);
    let reshape_l = |tape: &mut Tape, flat: Var| -> Result<Var> {
        let lower = tape.gather_cols(flat, &map)?;
        tape.skew(lower, n)
    };
    let reshape_m = |tape: &mut Tape, flat: Var| -> Result<Var> {
        let lower = tape.gather_cols(flat, &map)?;
        tape.gram(lower, n)
    };
    let l_i = reshape_l(tape, node_l)?;
    let m_i = reshape_m(tape, node_m)?;

    let a = tape.batched_matvec(l_i, grad_e, n)?;
    let b = tape.batched_matvec(m_i, grad_s, n)?;
    let bulk = tape.add(a, b)?;

    let zdot = if edges.is_empty() {
        bulk
    } else {
        let l_ij = reshape_l(tape, edge_l)?;
        let m_ij = reshape_m(tape, edge_m)?;
        let senders: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let receivers: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let ge_j = tape.gather_rows(grad_e, &receivers)?;
        let gs_j = tape.gather_rows(grad_s, &receivers)?;
        let pa = tape.batched_matvec(l_ij, ge_j, n)?;
        let pb = tape.batched_matvec(m_ij, gs_j, n)?;
        let per_edge = tape.add(pa, pb)?;
        let port = tape.scatter_add_rows(per_edge, &senders, n_v)?;
        tape.sub(bulk, port)?
    };

    let residual_l = tape.batched_matvec(l_i, grad_s, n)?;
    let residual_m = tape.batched_matvec(m_i, grad_e, n)?;
    Ok(TapeDynamics {
        zdot,
        residual_l,
        residual_m,
    })
}
