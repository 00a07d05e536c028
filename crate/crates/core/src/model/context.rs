use crate::error::{Error, Result};
use crate::mesh::{edge_features_for, EdgeFeatures, MeshGraph};
use std::cmp::Ordering;
use std::sync::Arc;

/// One coarsening step: fine nodes grouped around farthest-point seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLevel {
    pub n_fine: usize,
    pub n_coarse: usize,
    /// Coarse cluster of every fine node.
    pub assignment: Arc<[usize]>,
    /// `1 / |cluster|` per coarse node.
    pub inv_count: Vec<f64>,
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    pub positions: Vec<f32>,
    pub edge_features: Vec<f32>,
}

/// Everything the processor needs about one graph besides node features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContext {
    pub n_nodes: usize,
    pub dim: usize,
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    /// Row-major `[E, edge_width]`, geometric columns divided by the length scale.
    pub edge_features: Vec<f32>,
    pub edge_width: usize,
    pub levels: Vec<CoarseLevel>,
}

/// Mean length of the mesh edges; the unit for edge features.
pub fn mean_edge_length(graph: &MeshGraph) -> f32 {
    let ef = edge_features_for(&graph.positions, graph.dim, &graph.senders, &graph.receivers);
    let w = ef.width;
    let n = ef.values.len() / w;
    if n == 0 {
        return 1.0;
    }
    let s: f64 = ef.values.chunks_exact(w).map(|r| f64::from(r[w - 1])).sum();
    (s / n as f64) as f32
}

fn lex_cmp(a: &[f32], b: &[f32]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum()
}

/// Farthest-point seeds (`ceil(n / 2)`), starting from the lexicographically
/// smallest position with ties broken by position, so the result depends
/// only on geometry and not on node numbering. Returns seed ids in
/// selection order and each node's nearest seed (as a seed rank).
pub fn farthest_point_seeds(positions: &[f32], dim: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = positions.len() / dim;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot coarsen a level with {n} node(s)")));
    }
    let pos = |i: usize| &positions[i * dim..(i + 1) * dim];
    let n_seeds = n.div_ceil(2);
    let start = (0..n).min_by(|&a, &b| lex_cmp(pos(a), pos(b))).unwrap();
    let mut seeds = vec![start];
    let mut best = vec![f64::INFINITY; n];
    let mut owner = vec![0usize; n];
    let relax = |s_rank: usize, s: usize, best: &mut [f64], owner: &mut [usize], seeds: &[usize]| {
        for i in 0..n {
            let d = dist2(pos(i), pos(s));
            let closer = d < best[i]
                || (d == best[i] && lex_cmp(pos(s), pos(seeds[owner[i]])) == Ordering::Less);
            if closer {
                best[i] = d;
                owner[i] = s_rank;
            }
        }
    };
    relax(0, start, &mut best, &mut owner, &seeds);
    while seeds.len() < n_seeds {
        let next = (0..n)
            .max_by(|&a, &b| {
                best[a]
                    .total_cmp(&best[b])
                    .then_with(|| lex_cmp(pos(b), pos(a)))
            })
            .unwrap();
        seeds.push(next);
        let rank = seeds.len() - 1;
        relax(rank, next, &mut best, &mut owner, &seeds);
    }
    Ok((seeds, owner))
}

fn scaled_edge_features(
    positions: &[f32],
    dim: usize,
    senders: &[usize],
    receivers: &[usize],
    scale: f32,
    width: usize,
) -> Vec<f32> {
    let ef = edge_features_for(positions, dim, senders, receivers);
    let mut out = Vec::with_capacity(senders.len() * width);
    for row in ef.values.chunks_exact(ef.width) {
        out.extend(row.iter().map(|x| x / scale));
        out.extend(std::iter::repeat_n(0.0, width - ef.width));
    }
    out
}

pub fn coarsen(
    positions: &[f32],
    dim: usize,
    senders: &[usize],
    receivers: &[usize],
    scale: f32,
    edge_width: usize,
) -> Result<CoarseLevel> {
    let n = positions.len() / dim;
    let (seeds, assignment) = farthest_point_seeds(positions, dim)?;
    let n_coarse = seeds.len();
    let mut count = vec![0usize; n_coarse];
    for &a in &assignment {
        count[a] += 1;
    }
    let mut pairs: Vec<(usize, usize)> = senders
        .iter()
        .zip(receivers)
        .map(|(&s, &r)| (assignment[s], assignment[r]))
        .filter(|(a, b)| a != b)
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let (cs, cr): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let cpos: Vec<f32> = seeds
        .iter()
        .flat_map(|&s| positions[s * dim..(s + 1) * dim].to_vec())
        .collect();
    let edge_features = scaled_edge_features(&cpos, dim, &cs, &cr, scale, edge_width);
    Ok(CoarseLevel {
        n_fine: n,
        n_coarse,
        assignment: Arc::from(assignment),
        inv_count: count.iter().map(|&c| 1.0 / c.max(1) as f64).collect(),
        senders: Arc::from(cs),
        receivers: Arc::from(cr),
        positions: cpos,
        edge_features,
    })
}

impl GraphContext {
    /// `edge_features` carries the raw geometric columns (plus an optional
    /// trailing flag column, left unscaled). Coarse levels double the area
    /// per node, so their length unit grows by `sqrt(2)` per level.
    pub fn new(
        graph: &MeshGraph,
        edge_features: &EdgeFeatures,
        edge_width: usize,
        n_levels: usize,
        length_scale: f32,
    ) -> Result<Self> {
        let geo = graph.dim + 1;
        let ew = edge_features.width;
        if ew < geo || ew > edge_width || edge_features.values.len() != graph.n_edges() * ew {
            return Err(Error::shape("graph_context", "edge features do not match graph"));
        }
        let mut feats = Vec::with_capacity(graph.n_edges() * edge_width);
        for row in edge_features.values.chunks_exact(ew) {
            feats.extend(row[..geo].iter().map(|x| x / length_scale));
            feats.extend_from_slice(&row[geo..]);
            feats.extend(std::iter::repeat_n(0.0, edge_width - ew));
        }
        let mut levels = Vec::with_capacity(n_levels);
        let mut positions = graph.positions.clone();
        let mut senders = graph.senders.clone();
        let mut receivers = graph.receivers.clone();
        let mut scale = length_scale;
        for _ in 0..n_levels {
            scale *= std::f32::consts::SQRT_2;
            let lvl = coarsen(&positions, graph.dim, &senders, &receivers, scale, edge_width)?;
            positions = lvl.positions.clone();
            senders = lvl.senders.to_vec();
            receivers = lvl.receivers.to_vec();
            levels.push(lvl);
        }
        Ok(Self {
            n_nodes: graph.n_nodes(),
            dim: graph.dim,
            senders: Arc::from(graph.senders.as_slice()),
            receivers: Arc::from(graph.receivers.as_slice()),
            edge_features: feats,
            edge_width,
            levels,
        })
    }

    /// Node count at multigrid level `l` (0 = the mesh itself).
    pub fn level_size(&self, l: usize) -> usize {
        if l == 0 {
            self.n_nodes
        } else {
            self.levels[l - 1].n_coarse
        }
    }

    pub fn level_edges(&self, l: usize) -> (&Arc<[usize]>, &Arc<[usize]>) {
        if l == 0 {
            (&self.senders, &self.receivers)
        } else {
            (&self.levels[l - 1].senders, &self.levels[l - 1].receivers)
        }
    }
}
