//! Simulation graphs: radius connectivity, feature assembly, normalization
//! and training noise.

use std::collections::HashMap;

use log::{debug, warn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::StateLayout;

pub type Edge = (usize, usize);

/// Directed graph over particles with their states, one-hot types and loads.
#[derive(Clone, Debug, PartialEq)]
pub struct SimGraph {
    pub n_v: usize,
    pub n_dof: usize,
    pub d_space: usize,
    /// `[n_v × n_dof]` row-major.
    pub states: Vec<f64>,
    /// Sorted by `(i, j)`, no self-loops, symmetric.
    pub edges: Vec<Edge>,
    pub node_types: Vec<usize>,
    pub n_types: usize,
    /// `[n_v × d_space]` external load per node.
    pub loads: Vec<f64>,
    pub connectivity_radius: Option<f64>,
}

impl SimGraph {
    pub fn new(
        layout: &StateLayout,
        states: Vec<f64>,
        edges: Vec<Edge>,
        node_types: Vec<usize>,
        n_types: usize,
        loads: Vec<f64>,
        connectivity_radius: Option<f64>,
    ) -> Result<Self> {
        let n_dof = layout.n_dof();
        let d_space = layout.d_space;
        let n_v = node_types.len();
        if states.len() != n_v * n_dof {
            return Err(Error::Shape {
                context: "SimGraph states",
                expected: n_v * n_dof,
                actual: states.len(),
            });
        }
        if loads.len() != n_v * d_space {
            return Err(Error::Shape {
                context: "SimGraph loads",
                expected: n_v * d_space,
                actual: loads.len(),
            });
        }
        if let Some(&t) = node_types.iter().find(|&&t| t >= n_types) {
            return Err(Error::Contract(format!("node type {t} ≥ n_types {n_types}")));
        }
        let g = Self {
            n_v,
            n_dof,
            d_space,
            states,
            edges,
            node_types,
            n_types,
            loads,
            connectivity_radius,
        };
        g.check_edges()?;
        Ok(g)
    }

    fn check_edges(&self) -> Result<()> {
        for &(i, j) in &self.edges {
            if i >= self.n_v || j >= self.n_v {
                return Err(Error::Contract(format!(
                    "edge ({i},{j}) has an endpoint ≥ n_v = {}",
                    self.n_v
                )));
            }
            if i == j {
                return Err(Error::Contract(format!("self-loop on node {i}")));
            }
        }
        if !self.edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract("edge list must be strictly sorted".into()));
        }
        for &(i, j) in &self.edges {
            if self.edges.binary_search(&(j, i)).is_err() {
                return Err(Error::Contract(format!("edge ({i},{j}) has no reverse")));
            }
        }
        Ok(())
    }

    pub fn n_e(&self) -> usize {
        self.edges.len()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n_dof..(i + 1) * self.n_dof]
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.state(i)[..self.d_space]
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n_v).flat_map(|i| self.position(i).to_vec()).collect()
    }

    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    /// Same nodes and loads with edges rebuilt from the current positions.
    pub fn rebuild_connectivity(&self, radius: f64) -> Result<SimGraph> {
        let edges = build_edges(&self.positions(), self.d_space, radius)?;
        let mut isolated = vec![true; self.n_v];
        for &(i, _) in &edges {
            isolated[i] = false;
        }
        let n_isolated = isolated.iter().filter(|&&b| b).count();
        if n_isolated > 0 {
            debug!("{n_isolated} isolated particle(s) after reconnection");
        }
        Ok(SimGraph {
            edges,
            connectivity_radius: Some(radius),
            ..self.clone()
        })
    }

    /// Replaces the states (same shape), keeping connectivity.
    pub fn with_states(&self, states: Vec<f64>) -> Result<SimGraph> {
        if states.len() != self.states.len() {
            return Err(Error::Shape {
                context: "SimGraph::with_states",
                expected: self.states.len(),
                actual: states.len(),
            });
        }
        Ok(SimGraph {
            states,
            ..self.clone()
        })
    }

    /// Relabels nodes: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SimGraph> {
        if perm.len() != self.n_v {
            return Err(Error::Shape {
                context: "SimGraph::permuted",
                expected: self.n_v,
                actual: perm.len(),
            });
        }
        let mut inverse = vec![usize::MAX; self.n_v];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        if inverse.contains(&usize::MAX) {
            return Err(Error::Contract("not a permutation".into()));
        }
        let mut states = Vec::with_capacity(self.states.len());
        let mut loads = Vec::with_capacity(self.loads.len());
        let mut node_types = Vec::with_capacity(self.n_v);
        for &old in perm {
            states.extend_from_slice(self.state(old));
            loads.extend_from_slice(&self.loads[old * self.d_space..(old + 1) * self.d_space]);
            node_types.push(self.node_types[old]);
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|&(i, j)| (inverse[i], inverse[j]))
            .collect();
        edges.sort_unstable();
        Ok(SimGraph {
            states,
            loads,
            node_types,
            edges,
            ..self.clone()
        })
    }
}

#[inline]
fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Bidirectional edges between every pair with `0 < ‖q_i − q_j‖ ≤ radius`,
/// sorted by `(i, j)`. Uses a uniform hash grid of cell size `radius`.
pub fn build_edges(positions: &[f64], d_space: usize, radius: f64) -> Result<Vec<Edge>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Config(format!("connectivity radius must be positive, got {radius}")));
    }
    if d_space == 0 || positions.len() % d_space != 0 {
        return Err(Error::Shape {
            context: "build_edges positions",
            expected: d_space,
            actual: positions.len(),
        });
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("positions passed to build_edges".into()));
    }
    let n = positions.len() / d_space;
    let pos = |i: usize| &positions[i * d_space..(i + 1) * d_space];

    // Slightly inflated cells so rounding in q/cell can never push a
    // within-radius pair two cells apart.
    let cell = radius * (1.0 + 1e-9);
    let key = |p: &[f64]| -> [i64; 3] {
        let mut k = [0i64; 3];
        for (slot, x) in k.iter_mut().zip(p) {
            *slot = (x / cell).floor() as i64;
        }
        k
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for i in 0..n {
        grid.entry(key(pos(i))).or_default().push(i);
    }

    let offsets: Vec<[i64; 3]> = {
        let r = |d: usize| if d < d_space { -1..=1 } else { 0..=0 };
        let mut v = Vec::new();
        for a in r(0) {
            for b in r(1) {
                for c in r(2) {
                    v.push([a, b, c]);
                }
            }
        }
        v
    };

    let mut edges = Vec::new();
    let mut coincident = 0usize;
    for i in 0..n {
        let k = key(pos(i));
        for off in &offsets {
            let nk = [k[0] + off[0], k[1] + off[1], k[2] + off[2]];
            let Some(bucket) = grid.get(&nk) else {
                continue;
            };
            for &j in bucket {
                if j <= i {
                    continue;
                }
                let d = distance(pos(i), pos(j));
                if d == 0.0 {
                    coincident += 1;
                } else if d <= radius {
                    edges.push((i, j));
                    edges.push((j, i));
                }
            }
        }
    }
    if coincident > 0 {
        warn!("{coincident} coincident node pair(s) produced no edge");
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Relative vector `q_i − q_j` and its Euclidean norm.
pub fn edge_features(q_i: &[f64], q_j: &[f64]) -> (Vec<f64>, f64) {
    let rel: Vec<f64> = q_i.iter().zip(q_j).map(|(a, b)| a - b).collect();
    let mag = rel.iter().map(|x| x * x).sum::<f64>().sqrt();
    (rel, mag)
}

/// Min/max statistics for one group of variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn empty(n: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; n],
            max: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn observe(&mut self, row: &[f64]) {
        for ((lo, hi), &x) in self.min.iter_mut().zip(self.max.iter_mut()).zip(row) {
            *lo = lo.min(x);
            *hi = hi.max(x);
        }
    }

    pub fn is_constant(&self, k: usize) -> bool {
        self.max[k] == self.min[k]
    }

    pub fn normalize(&self, k: usize, x: f64) -> f64 {
        if self.is_constant(k) {
            0.0
        } else {
            (x - self.min[k]) / (self.max[k] - self.min[k])
        }
    }

    pub fn denormalize(&self, k: usize, y: f64) -> f64 {
        if self.is_constant(k) {
            self.min[k]
        } else {
            y * (self.max[k] - self.min[k]) + self.min[k]
        }
    }

    /// True if `x` lies more than ten ranges outside `[min, max]`.
    fn extrapolates(&self, k: usize, x: f64) -> bool {
        let range = self.max[k] - self.min[k];
        x < self.min[k] - 10.0 * range || x > self.max[k] + 10.0 * range
    }
}

/// Normalization statistics computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Per state component (`n_dof` entries).
    pub state: MinMax,
    /// Per edge feature: relative-vector components then magnitude.
    pub edge: MinMax,
    /// Per-component scale for time derivatives; the model works with
    /// `ż / rate_scale`.
    pub rate_scale: Vec<f64>,
    pub load_scale: f64,
}

impl NormStats {
    pub fn n_dof(&self) -> usize {
        self.state.min.len()
    }

    pub fn constant_flags(&self) -> Vec<bool> {
        (0..self.n_dof()).map(|k| self.state.is_constant(k)).collect()
    }

    pub fn normalize_state(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n_dof();
        z.iter()
            .enumerate()
            .map(|(idx, &x)| self.state.normalize(idx % n, x))
            .collect()
    }

    pub fn denormalize_state(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n_dof();
        y.iter()
            .enumerate()
            .map(|(idx, &x)| self.state.denormalize(idx % n, x))
            .collect()
    }

    /// Physical rates → model rates.
    pub fn scale_rates(&self, zdot: &[f64]) -> Vec<f64> {
        let n = self.n_dof();
        zdot.iter()
            .enumerate()
            .map(|(idx, &x)| x / self.rate_scale[idx % n])
            .collect()
    }

    /// Model rates → physical rates.
    pub fn unscale_rates(&self, ydot: &[f64]) -> Vec<f64> {
        let n = self.n_dof();
        ydot.iter()
            .enumerate()
            .map(|(idx, &x)| x * self.rate_scale[idx % n])
            .collect()
    }
}

/// Node and edge feature matrices for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n_v: usize,
    pub n_e: usize,
    /// `[n_v × node_cols]`: normalized non-positional state then one-hot type.
    pub node: Vec<f64>,
    pub node_cols: usize,
    /// Leading node columns that come from the state (noise applies here).
    pub state_cols: usize,
    /// `[n_e × edge_cols]`: normalized `q_ij` then normalized `‖q_ij‖`.
    pub edge: Vec<f64>,
    pub edge_cols: usize,
    /// `[n_v × d_space]` scaled loads.
    pub loads: Vec<f64>,
}

pub fn node_feature_dim(n_dof: usize, d_space: usize, n_types: usize) -> usize {
    n_dof - d_space + n_types
}

pub fn edge_feature_dim(d_space: usize) -> usize {
    d_space + 1
}

/// Builds normalized node/edge features. Positions only enter through edges.
pub fn assemble_features(graph: &SimGraph, norm: &NormStats) -> Result<FeatureSet> {
    let (n_dof, d) = (graph.n_dof, graph.d_space);
    if norm.n_dof() != n_dof || norm.edge.min.len() != d + 1 {
        return Err(Error::Shape {
            context: "assemble_features (norm stats vs graph n_dof)",
            expected: n_dof,
            actual: norm.n_dof(),
        });
    }
    let state_cols = n_dof - d;
    let node_cols = state_cols + graph.n_types;
    let mut node = Vec::with_capacity(graph.n_v * node_cols);
    let mut extrapolated = 0usize;
    for i in 0..graph.n_v {
        let z = graph.state(i);
        for (k, &x) in z.iter().enumerate().skip(d) {
            if norm.state.extrapolates(k, x) {
                extrapolated += 1;
            }
            node.push(norm.state.normalize(k, x));
        }
        for t in 0..graph.n_types {
            node.push(if graph.node_types[i] == t { 1.0 } else { 0.0 });
        }
    }

    let edge_cols = d + 1;
    let mut edge = Vec::with_capacity(graph.n_e() * edge_cols);
    for &(i, j) in &graph.edges {
        let (rel, mag) = edge_features(graph.position(i), graph.position(j));
        for (k, &x) in rel.iter().chain(std::iter::once(&mag)).enumerate() {
            if norm.edge.extrapolates(k, x) {
                extrapolated += 1;
            }
            edge.push(norm.edge.normalize(k, x));
        }
    }
    if extrapolated > 0 {
        warn!("{extrapolated} feature value(s) far outside the training range");
    }

    let loads = graph.loads.iter().map(|f| f / norm.load_scale).collect();
    Ok(FeatureSet {
        n_v: graph.n_v,
        n_e: graph.n_e(),
        node,
        node_cols,
        state_cols,
        edge,
        edge_cols,
        loads,
    })
}

/// Adds i.i.d. `N(0, variance)` noise to the state columns of the node
/// features. One-hot flags, edge geometry and loads are left untouched.
pub fn add_noise<R: Rng + ?Sized>(features: &mut FeatureSet, variance: f64, rng: &mut R) -> Result<()> {
    if !(variance >= 0.0) {
        return Err(Error::Config(format!("noise variance must be ≥ 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, variance.sqrt())
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let cols = features.node_cols;
    for row in features.node.chunks_mut(cols) {
        for x in &mut row[..features.state_cols] {
            *x += normal.sample(rng);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(positions: &[f64], d: usize, radius: f64) -> Vec<Edge> {
        let n = positions.len() / d;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dist = distance(&positions[i * d..(i + 1) * d], &positions[j * d..(j + 1) * d]);
                if dist > 0.0 && dist <= radius {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn two_points_within_radius() {
        assert_eq!(build_edges(&[0.0, 0.0, 0.05, 0.0], 2, 0.1).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn spacing_above_radius_gives_no_edges() {
        let r = 1.0;
        let pts = [0.0, 1.0 + 1e-9, 2.0 + 2e-9];
        assert!(build_edges(&pts, 1, r).unwrap().is_empty());
    }

    #[test]
    fn coincident_points_get_no_edge() {
        assert!(build_edges(&[0.5, 0.5, 0.5, 0.5], 2, 1.0).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_radius() {
        assert!(build_edges(&[0.0], 1, 0.0).is_err());
        assert!(build_edges(&[0.0], 1, -1.0).is_err());
    }

    #[test]
    fn random_square_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        assert_eq!(build_edges(&pts, 2, 0.2).unwrap(), brute_force(&pts, 2, 0.2));
    }

    #[test]
    fn three_d_and_negative_coordinates_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(build_edges(&pts, 3, 0.3).unwrap(), brute_force(&pts, 3, 0.3));
    }

    #[test]
    fn edge_features_examples() {
        assert_eq!(edge_features(&[0.3, 0.3], &[0.3, 0.3]), (vec![0.0, 0.0], 0.0));
        assert_eq!(edge_features(&[1.0, 0.0], &[0.0, 0.0]), (vec![1.0, 0.0], 1.0));
    }

    fn tiny_graph() -> (StateLayout, SimGraph, NormStats) {
        let layout = StateLayout::new(1, &[("e", 1)]).unwrap();
        let states = vec![0.0, -1.0, 0.0, 1.0, 1.0, 2.0];
        let g = SimGraph::new(
            &layout,
            states,
            vec![(0, 1), (1, 0)],
            vec![1, 0],
            2,
            vec![0.0, 0.5],
            Some(1.5),
        )
        .unwrap();
        let norm = NormStats {
            state: MinMax {
                min: vec![0.0, -1.0, 0.0],
                max: vec![1.0, 1.0, 2.0],
            },
            edge: MinMax {
                min: vec![-1.0, 1.0],
                max: vec![1.0, 1.0],
            },
            rate_scale: vec![1.0; 3],
            load_scale: 0.5,
        };
        (layout, g, norm)
    }

    #[test]
    fn features_at_minima_and_maxima() {
        let (_, g, norm) = tiny_graph();
        let f = assemble_features(&g, &norm).unwrap();
        assert_eq!(f.node_cols, 4);
        assert_eq!(f.node[..4], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.node[4..], [1.0, 1.0, 1.0, 0.0]);
        // Constant magnitude normalizes to zero.
        assert_eq!(f.edge, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(f.loads, vec![0.0, 1.0]);
        assert_eq!(norm.constant_flags(), vec![false, false, false]);
        assert!(norm.edge.is_constant(1));
    }

    #[test]
    fn normalization_round_trip() {
        let (_, _, norm) = tiny_graph();
        let z = [0.37, -0.2, 1.75, 0.9, 0.6, 0.01];
        let back = norm.denormalize_state(&norm.normalize_state(&z));
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_leaves_edge_features_unchanged() {
        let (layout, g, norm) = tiny_graph();
        let mut shifted = g.states.clone();
        for i in 0..g.n_v {
            shifted[i * 3] += 123.456;
        }
        let g2 = SimGraph::new(&layout, shifted, g.edges.clone(), g.node_types.clone(), 2, g.loads.clone(), None)
            .unwrap();
        let a = assemble_features(&g, &norm).unwrap();
        let b = assemble_features(&g2, &norm).unwrap();
        assert_eq!(a.node, b.node);
        for (x, y) in a.edge.iter().zip(&b.edge) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_touches_only_state_columns() {
        let (_, g, norm) = tiny_graph();
        let clean = assemble_features(&g, &norm).unwrap();
        let mut noisy = clean.clone();
        add_noise(&mut noisy, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(noisy, clean);
        add_noise(&mut noisy, 1e-2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for r in 0..2 {
            assert_ne!(noisy.node[r * 4], clean.node[r * 4]);
            assert_eq!(noisy.node[r * 4 + 2..r * 4 + 4], clean.node[r * 4 + 2..r * 4 + 4]);
        }
        assert_eq!(noisy.edge, clean.edge);
        assert_eq!(noisy.loads, clean.loads);

        let mut again = clean.clone();
        add_noise(&mut again, 1e-2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(again, noisy);
    }

    #[test]
    fn invalid_graphs_rejected() {
        let layout = StateLayout::new(1, &[("e", 1)]).unwrap();
        let s = vec![0.0; 6];
        let l = vec![0.0; 2];
        assert!(SimGraph::new(&layout, s.clone(), vec![(0, 1)], vec![0, 0], 1, l.clone(), None).is_err());
        assert!(SimGraph::new(&layout, s.clone(), vec![(0, 0)], vec![0, 0], 1, l.clone(), None).is_err());
        assert!(SimGraph::new(&layout, s.clone(), vec![(0, 2), (2, 0)], vec![0, 0], 1, l.clone(), None).is_err());
        assert!(SimGraph::new(&layout, s, vec![], vec![0, 3], 2, l, None).is_err());
    }

    #[test]
    fn particles_separating_lose_their_edge() {
        let layout = StateLayout::new(1, &[("e", 1)]).unwrap();
        let mut g = SimGraph::new(&layout, vec![0.0; 6], vec![], vec![0, 0], 1, vec![0.0; 2], None).unwrap();
        let radius = 0.1;
        let mut first_gone = None;
        for step in 0..20 {
            let sep = 0.02 * step as f64;
            g.states[3] = sep + 1e-3;
            let fresh = g.rebuild_connectivity(radius).unwrap();
            if fresh.edges.is_empty() && first_gone.is_none() {
                first_gone = Some(step);
            }
            assert_eq!(fresh.edges.is_empty(), sep + 1e-3 > radius);
            g = fresh;
        }
        assert_eq!(first_gone, Some(5));
    }
}
