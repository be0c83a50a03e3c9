//! Per-node state vector layout `z = (q, v, extras…)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Position,
    Velocity,
    Extra,
}

/// A named contiguous span of the state vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpan {
    pub name: String,
    pub kind: VariableKind,
    pub start: usize,
    pub len: usize,
}

impl VariableSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub d_space: usize,
    pub variables: Vec<VariableSpan>,
}

impl StateLayout {
    /// `q` and `v` of dimension `d_space`, then the named scalar/vector extras.
    pub fn new(d_space: usize, extras: &[(&str, usize)]) -> Result<Self> {
        if !(1..=3).contains(&d_space) {
            return Err(Error::Config(format!("d_space must be 1, 2 or 3, got {d_space}")));
        }
        let mut variables = vec![
            VariableSpan {
                name: "q".into(),
                kind: VariableKind::Position,
                start: 0,
                len: d_space,
            },
            VariableSpan {
                name: "v".into(),
                kind: VariableKind::Velocity,
                start: d_space,
                len: d_space,
            },
        ];
        let mut start = 2 * d_space;
        for (name, len) in extras {
            variables.push(VariableSpan {
                name: (*name).into(),
                kind: VariableKind::Extra,
                start,
                len: *len,
            });
            start += len;
        }
        Ok(Self { d_space, variables })
    }

    pub fn n_dof(&self) -> usize {
        self.variables.iter().map(|v| v.len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for v in &self.variables {
            if v.start != next || v.len == 0 {
                return Err(Error::Config(format!(
                    "variable span {} is not contiguous (start {}, expected {next})",
                    v.name, v.start
                )));
            }
            next += v.len;
        }
        match self.variables.first() {
            Some(q) if q.kind == VariableKind::Position && q.len == self.d_space => Ok(()),
            _ => Err(Error::Config("first variable span must be the position q".into())),
        }
    }

    pub fn positions<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        &state[..self.d_space]
    }
}

/// One particle's state, split by role.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub extras: Vec<f64>,
}

impl NodeState {
    pub fn to_z(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.q.len() + self.v.len() + self.extras.len());
        z.extend_from_slice(&self.q);
        z.extend_from_slice(&self.v);
        z.extend_from_slice(&self.extras);
        z
    }

    pub fn from_z(layout: &StateLayout, z: &[f64]) -> Result<Self> {
        if z.len() != layout.n_dof() {
            return Err(Error::Shape {
                context: "NodeState::from_z",
                expected: layout.n_dof(),
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node state".into()));
        }
        let d = layout.d_space;
        Ok(Self {
            q: z[..d].to_vec(),
            v: z[d..2 * d].to_vec(),
            extras: z[2 * d..].to_vec(),
        })
    }
}
