//! Sub-mesh generation for meshes too large for a single update.

use crate::error::{Error, Result};
use crate::mesh::MeshGraph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMethod {
    NeighborSampling,
    MetisLike,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Sorted node ids per part.
    pub parts: Vec<Vec<usize>>,
    pub method: PartitionMethod,
    /// Edge budget or part count.
    pub param: usize,
}

impl Partition {
    /// Part index per node; `None` for nodes in no part (neighbor sampling only).
    pub fn assignment(&self, n: usize) -> Vec<Option<usize>> {
        let mut a = vec![None; n];
        for (p, nodes) in self.parts.iter().enumerate() {
            for &v in nodes {
                a[v] = Some(p);
            }
        }
        a
    }

    /// Disjoint and covering `0..n`.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &v in self.parts.iter().flatten() {
            if v >= n || seen[v] {
                return false;
            }
            seen[v] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Grows a node set from a random seed by repeatedly taking a random edge
/// leaving the set, until the induced undirected edge count reaches the budget.
pub fn neighbor_sample(graph: &MeshGraph, edge_budget: usize, seed: u64) -> Result<Vec<usize>> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample an empty graph".into()));
    }
    if edge_budget == 0 {
        return Err(Error::InvalidArgument("edge budget must be >= 1".into()));
    }
    let adj = graph.adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..n);
    let mut in_set = vec![false; n];
    in_set[start] = true;
    let mut nodes = vec![start];
    let mut frontier: Vec<usize> = adj[start].clone();
    let mut induced = 0;
    while induced < edge_budget && !frontier.is_empty() {
        let v = frontier.swap_remove(rng.random_range(0..frontier.len()));
        if in_set[v] {
            continue;
        }
        in_set[v] = true;
        nodes.push(v);
        induced += adj[v].iter().filter(|&&u| in_set[u]).count();
        frontier.extend(adj[v].iter().copied().filter(|&u| !in_set[u]));
    }
    nodes.sort_unstable();
    Ok(nodes)
}

/// Node-weighted, edge-weighted adjacency used by the multilevel scheme.
struct WGraph {
    vw: Vec<usize>,
    adj: Vec<Vec<(usize, usize)>>,
}

impl WGraph {
    fn from_mesh(g: &MeshGraph) -> Self {
        let mut adj = vec![Vec::new(); g.n_nodes()];
        for (&s, &r) in g.senders.iter().zip(&g.receivers) {
            adj[s].push((r, 1));
        }
        Self {
            vw: vec![1; g.n_nodes()],
            adj,
        }
    }

    fn n(&self) -> usize {
        self.vw.len()
    }

    /// Heavy-edge matching; returns the coarse graph and fine→coarse map.
    fn coarsen(&self, rng: &mut ChaCha8Rng, max_w: usize) -> (WGraph, Vec<usize>) {
        let n = self.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut mate = vec![usize::MAX; n];
        for &u in &order {
            if mate[u] != usize::MAX {
                continue;
            }
            let best = self.adj[u]
                .iter()
                .filter(|&&(v, _)| mate[v] == usize::MAX && self.vw[u] + self.vw[v] <= max_w)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|&(v, _)| v);
            match best {
                Some(v) => {
                    mate[u] = v;
                    mate[v] = u;
                }
                None => mate[u] = u,
            }
        }
        let mut cmap = vec![usize::MAX; n];
        let mut vw = Vec::new();
        for u in 0..n {
            if cmap[u] == usize::MAX {
                let c = vw.len();
                cmap[u] = c;
                cmap[mate[u]] = c;
                vw.push(if mate[u] == u {
                    self.vw[u]
                } else {
                    self.vw[u] + self.vw[mate[u]]
                });
            }
        }
        let mut triples: Vec<(usize, usize, usize)> = Vec::new();
        for u in 0..n {
            for &(v, w) in &self.adj[u] {
                let (cu, cv) = (cmap[u], cmap[v]);
                if cu != cv {
                    triples.push((cu, cv, w));
                }
            }
        }
        triples.sort_unstable();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); vw.len()];
        for (cu, cv, w) in triples {
            match adj[cu].last_mut() {
                Some(last) if last.0 == cv => last.1 += w,
                _ => adj[cu].push((cv, w)),
            }
        }
        (WGraph { vw, adj }, cmap)
    }

    /// BFS growth: each part starts from a peripheral unassigned node and
    /// absorbs neighbors until it reaches its share of the total weight.
    fn grow(&self, n_parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.n();
        let total: usize = self.vw.iter().sum();
        let mut part = vec![usize::MAX; n];
        let mut assigned_w = 0;
        for p in 0..n_parts {
            if p == n_parts - 1 {
                for x in part.iter_mut().filter(|x| **x == usize::MAX) {
                    *x = p;
                }
                break;
            }
            let target = ((p + 1) * total).div_ceil(n_parts);
            let unassigned: Vec<usize> = (0..n).filter(|&u| part[u] == usize::MAX).collect();
            if unassigned.is_empty() {
                break;
            }
            let mut start = unassigned[rng.random_range(0..unassigned.len())];
            start = self.farthest_unassigned(start, &part);
            let mut queue = VecDeque::from([start]);
            let mut queued = vec![false; n];
            queued[start] = true;
            while assigned_w < target {
                let u = match queue.pop_front() {
                    Some(u) => u,
                    None => match (0..n).find(|&u| part[u] == usize::MAX && !queued[u]) {
                        Some(u) => {
                            queued[u] = true;
                            u
                        }
                        None => break,
                    },
                };
                if part[u] != usize::MAX {
                    continue;
                }
                // Keep at least one node for every later part.
                let remaining = part.iter().filter(|&&x| x == usize::MAX).count();
                if remaining <= n_parts - 1 - p {
                    break;
                }
                part[u] = p;
                assigned_w += self.vw[u];
                for &(v, _) in &self.adj[u] {
                    if part[v] == usize::MAX && !queued[v] {
                        queued[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        part
    }

    fn farthest_unassigned(&self, start: usize, part: &[usize]) -> usize {
        let mut dist = vec![usize::MAX; self.n()];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = start;
        while let Some(u) = queue.pop_front() {
            last = u;
            for &(v, _) in &self.adj[u] {
                if dist[v] == usize::MAX && part[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        last
    }

    fn part_weights(&self, part: &[usize], n_parts: usize) -> Vec<usize> {
        let mut w = vec![0; n_parts];
        for (u, &p) in part.iter().enumerate() {
            w[p] += self.vw[u];
        }
        w
    }

    /// Edge weight from `u` into each part, as a sparse list.
    fn connectivity(&self, u: usize, part: &[usize]) -> Vec<(usize, usize)> {
        let mut conn: Vec<(usize, usize)> = Vec::new();
        for &(v, w) in &self.adj[u] {
            match conn.iter_mut().find(|c| c.0 == part[v]) {
                Some(c) => c.1 += w,
                None => conn.push((part[v], w)),
            }
        }
        conn
    }

    /// Greedy boundary moves (Kernighan–Lin / FM flavour) that reduce the cut
    /// without leaving `[lo, hi]`.
    fn refine(&self, part: &mut [usize], n_parts: usize, lo: usize, hi: usize, passes: usize) {
        let mut w = self.part_weights(part, n_parts);
        for _ in 0..passes {
            let mut moved = false;
            for u in 0..self.n() {
                let p = part[u];
                let conn = self.connectivity(u, part);
                let internal = conn.iter().find(|c| c.0 == p).map_or(0, |c| c.1);
                let vw = self.vw[u];
                let best = conn
                    .iter()
                    .filter(|c| c.0 != p)
                    .filter(|c| w[c.0] + vw <= hi && w[p] >= lo + vw && w[p] > vw)
                    .map(|c| (c.1 as i64 - internal as i64, c.0))
                    .filter(|&(gain, q)| gain > 0 || (gain == 0 && w[q] + vw < w[p]))
                    .max_by(|a, b| a.0.cmp(&b.0).then(w[b.1].cmp(&w[a.1])));
                if let Some((_, q)) = best {
                    part[u] = q;
                    w[p] -= vw;
                    w[q] += vw;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }

    /// Moves single nodes until every part weight lies in `[lo, hi]`.
    fn balance(&self, part: &mut [usize], n_parts: usize, lo: usize, hi: usize) {
        let n = self.n();
        let mut w = self.part_weights(part, n_parts);
        for _ in 0..n * n_parts + 10 {
            let (pmax, &wmax) = w.iter().enumerate().max_by_key(|&(i, &x)| (x, usize::MAX - i)).unwrap();
            let (pmin, &wmin) = w.iter().enumerate().min_by_key(|&(i, &x)| (x, i)).unwrap();
            if wmax <= hi && wmin >= lo {
                break;
            }
            let pick = if wmax > hi {
                // Push a boundary node of the heaviest part to its lightest neighbor part.
                (0..n)
                    .filter(|&u| part[u] == pmax)
                    .flat_map(|u| {
                        let conn = self.connectivity(u, part);
                        let internal = conn.iter().find(|c| c.0 == pmax).map_or(0, |c| c.1);
                        conn.into_iter()
                            .filter(|c| c.0 != pmax && w[c.0] < hi)
                            .map(move |c| (u, c.0, c.1 as i64 - internal as i64))
                    })
                    .max_by(|a, b| w[b.1].cmp(&w[a.1]).then(a.2.cmp(&b.2)))
                    .map(|(u, q, _)| (u, q))
                    .or_else(|| (0..n).find(|&u| part[u] == pmax).map(|u| (u, pmin)))
            } else {
                // Pull a node into the lightest part from its heaviest neighbor part.
                (0..n)
                    .filter(|&u| part[u] != pmin && w[part[u]] > lo)
                    .filter_map(|u| {
                        let conn = self.connectivity(u, part);
                        let into = conn.iter().find(|c| c.0 == pmin)?.1;
                        let internal = conn.iter().find(|c| c.0 == part[u]).map_or(0, |c| c.1);
                        Some((u, into as i64 - internal as i64))
                    })
                    .max_by(|a, b| w[part[a.0]].cmp(&w[part[b.0]]).then(a.1.cmp(&b.1)))
                    .map(|(u, _)| (u, pmin))
                    .or_else(|| (0..n).find(|&u| part[u] == pmax).map(|u| (u, pmin)))
            };
            let Some((u, q)) = pick else { break };
            w[part[u]] -= self.vw[u];
            w[q] += self.vw[u];
            part[u] = q;
        }
    }
}

/// Simplified multilevel partitioner: heavy-edge-matching coarsening, BFS
/// growth on the coarsest level, boundary refinement on the way back up and
/// a final balancing sweep. Parts are disjoint and cover every node.
pub fn metis_like_partition(graph: &MeshGraph, n_parts: usize, seed: u64) -> Result<Partition> {
    let n = graph.n_nodes();
    if n_parts == 0 || n_parts > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} nodes into {n_parts} parts"
        )));
    }
    let done = |parts| Partition {
        parts,
        method: PartitionMethod::MetisLike,
        param: n_parts,
    };
    if n_parts == 1 {
        return Ok(done(vec![(0..n).collect()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_w = n.div_ceil(2 * n_parts).max(1);
    let stop = (15 * n_parts).max(30);
    let mut levels = vec![WGraph::from_mesh(graph)];
    let mut maps: Vec<Vec<usize>> = Vec::new();
    while levels.last().unwrap().n() > stop {
        let (coarse, cmap) = levels.last().unwrap().coarsen(&mut rng, max_w);
        if coarse.n() * 10 > levels.last().unwrap().n() * 9 {
            break;
        }
        levels.push(coarse);
        maps.push(cmap);
    }
    let ideal = n as f64 / n_parts as f64;
    let lo = (ideal * 0.9).floor() as usize;
    let hi = (ideal * 1.1).ceil() as usize;
    let mut part = levels.last().unwrap().grow(n_parts, &mut rng);
    levels.last().unwrap().refine(&mut part, n_parts, lo, hi, 4);
    for lvl in (0..maps.len()).rev() {
        part = maps[lvl].iter().map(|&c| part[c]).collect();
        levels[lvl].refine(&mut part, n_parts, lo, hi, 4);
    }
    let fine = &levels[0];
    let lo_b = ((ideal * 0.85).ceil() as usize).min(ideal.floor() as usize).max(1);
    let hi_b = ((ideal * 1.15).floor() as usize).max(ideal.ceil() as usize);
    fine.balance(&mut part, n_parts, lo_b, hi_b);
    fine.refine(&mut part, n_parts, lo_b, hi_b, 4);
    let mut parts = vec![Vec::new(); n_parts];
    for (u, &p) in part.iter().enumerate() {
        parts[p].push(u);
    }
    let out = done(parts);
    debug_assert!(out.is_exact_cover(n));
    Ok(out)
}

/// Induced subgraph on `nodes` (sorted original ids); edges leaving the set are dropped.
pub fn induced_subgraph(graph: &MeshGraph, nodes: &[usize]) -> MeshGraph {
    let mut new_id = vec![usize::MAX; graph.n_nodes()];
    for (i, &v) in nodes.iter().enumerate() {
        new_id[v] = i;
    }
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    for (&s, &r) in graph.senders.iter().zip(&graph.receivers) {
        if new_id[s] != usize::MAX && new_id[r] != usize::MAX {
            senders.push(new_id[s]);
            receivers.push(new_id[r]);
        }
    }
    MeshGraph {
        dim: graph.dim,
        positions: nodes.iter().flat_map(|&v| graph.position(v).to_vec()).collect(),
        node_type: nodes.iter().map(|&v| graph.node_type[v]).collect(),
        senders,
        receivers,
        cells: Vec::new(),
    }
}
