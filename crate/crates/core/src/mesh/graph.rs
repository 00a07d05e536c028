use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Node categories used by the one-hot node-type block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeType {
    Fluid = 0,
    Inflow = 1,
    Outflow = 2,
    Wall = 3,
}

pub const NODE_TYPE_COUNT: usize = 4;
pub const NODE_TYPE_NAMES: [&str; NODE_TYPE_COUNT] = ["fluid", "inflow", "outflow", "wall"];

impl NodeType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u32) -> Result<Self> {
        Ok(match i {
            0 => NodeType::Fluid,
            1 => NodeType::Inflow,
            2 => NodeType::Outflow,
            3 => NodeType::Wall,
            _ => return Err(Error::InvalidMesh(format!("unknown node type {i}"))),
        })
    }
}

/// Undirected mesh stored as directed edge pairs (both directions present).
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGraph {
    pub dim: usize,
    /// Row-major `[N, dim]` mesh-space coordinates.
    pub positions: Vec<f32>,
    pub node_type: Vec<NodeType>,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// Flattened `[T, dim + 1]` simplex connectivity; may be empty.
    pub cells: Vec<usize>,
}

impl MeshGraph {
    /// Builds the graph from simplices; every simplex side becomes an
    /// undirected edge stored in both directions, sorted by (sender, receiver).
    pub fn from_cells(
        dim: usize,
        positions: Vec<f32>,
        node_type: Vec<NodeType>,
        cells: Vec<usize>,
    ) -> Result<Self> {
        let k = dim + 1;
        if cells.len() % k != 0 {
            return Err(Error::InvalidMesh("cell array length not a multiple of dim+1".into()));
        }
        let mut pairs = Vec::new();
        for cell in cells.chunks_exact(k) {
            for a in 0..k {
                for b in a + 1..k {
                    pairs.push((cell[a], cell[b]));
                }
            }
        }
        let mut g = Self::from_undirected(dim, positions, node_type, &pairs)?;
        g.cells = cells;
        g.validate()?;
        Ok(g)
    }

    /// Builds the graph from undirected pairs; duplicates and orientation are
    /// normalized away.
    pub fn from_undirected(
        dim: usize,
        positions: Vec<f32>,
        node_type: Vec<NodeType>,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(pairs.len() * 2);
        for &(a, b) in pairs {
            if a == b {
                return Err(Error::InvalidMesh(format!("self loop at node {a}")));
            }
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();
        directed.dedup();
        let (senders, receivers) = directed.into_iter().unzip();
        let g = Self {
            dim,
            positions,
            node_type,
            senders,
            receivers,
            cells: Vec::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn n_cells(&self) -> usize {
        if self.cells.is_empty() {
            0
        } else {
            self.cells.len() / (self.dim + 1)
        }
    }

    pub fn position(&self, i: usize) -> &[f32] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidMesh(format!("dimension {} not in {{2,3}}", self.dim)));
        }
        if self.positions.len() != n * self.dim {
            return Err(Error::InvalidMesh("positions length != N * dim".into()));
        }
        if self.senders.len() != self.receivers.len() {
            return Err(Error::InvalidMesh("senders/receivers length differ".into()));
        }
        let mut seen = HashSet::with_capacity(self.senders.len());
        for (&s, &r) in self.senders.iter().zip(&self.receivers) {
            if s >= n || r >= n {
                return Err(Error::InvalidMesh(format!("edge ({s},{r}) out of range")));
            }
            if s == r {
                return Err(Error::InvalidMesh(format!("self loop at node {s}")));
            }
            if !seen.insert((s, r)) {
                return Err(Error::InvalidMesh(format!("duplicate edge ({s},{r})")));
            }
        }
        for &(s, r) in &seen {
            if !seen.contains(&(r, s)) {
                return Err(Error::InvalidMesh(format!("edge ({s},{r}) missing reverse")));
            }
        }
        if self.cells.iter().any(|&c| c >= n) {
            return Err(Error::InvalidMesh("cell index out of range".into()));
        }
        Ok(())
    }

    /// Neighbor lists (CSR-like) for every node, from the directed edges.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for (&s, &r) in self.senders.iter().zip(&self.receivers) {
            adj[s].push(r);
        }
        adj
    }

    /// Undirected edges as `(min, max)` pairs, each listed once.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.senders
            .iter()
            .zip(&self.receivers)
            .filter(|(s, r)| s < r)
            .map(|(&s, &r)| (s, r))
            .collect()
    }

    /// Reorders nodes: new node `i` is old node `perm[i]`. Edges are
    /// remapped and kept in the same order.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let d = self.dim;
        let mut positions = vec![0.0; n * d];
        let mut node_type = vec![NodeType::Fluid; n];
        for (new, &old) in perm.iter().enumerate() {
            positions[new * d..(new + 1) * d].copy_from_slice(self.position(old));
            node_type[new] = self.node_type[old];
        }
        Self {
            dim: d,
            positions,
            node_type,
            senders: self.senders.iter().map(|&s| inv[s]).collect(),
            receivers: self.receivers.iter().map(|&r| inv[r]).collect(),
            cells: self.cells.iter().map(|&c| inv[c]).collect(),
        }
    }
}
