//! Node masking: sample hidden nodes, drop their edges, optionally add K-hop
//! shortcut edges between survivors, compact the visible sub-mesh, and
//! reinsert a shared token for hidden nodes before decoding.

use crate::diffcore::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{edge_features_for, EdgeFeatures, MeshGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    /// Original ids of visible nodes, ascending.
    pub visible_index: Vec<usize>,
    /// Original ids of masked nodes, ascending.
    pub masked_index: Vec<usize>,
    /// Indices into the original directed edge arrays whose endpoints are both visible.
    pub surviving_edge_ids: Vec<usize>,
    pub surviving_edges: Vec<(usize, usize)>,
    /// Directed (sender, receiver) shortcut pairs, both directions present.
    pub khop_edges: Vec<(usize, usize)>,
    pub ratio: f64,
    pub k: usize,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_nodes(&self) -> usize {
        self.masked.len()
    }

    pub fn n_visible(&self) -> usize {
        self.visible_index.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked_index.len()
    }
}

/// `round(ratio * n)` with halves rounded up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5 + 1e-9).floor() as usize
}

/// K used when none is configured: off up to 20% masking, 2 above.
pub fn default_k(ratio: f64) -> usize {
    if ratio > 0.2 {
        2
    } else {
        1
    }
}

/// Uniformly samples `round(ratio * N)` nodes to hide, deterministically in `seed`.
pub fn sample_mask(graph: &MeshGraph, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} not in [0, 1)")));
    }
    let n = graph.n_nodes();
    let count = masked_count(n, ratio);
    if n > 0 && count >= n {
        return Err(Error::MaskAll { ratio, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, count) {
        masked[i] = true;
    }
    Ok(plan_from_mask(graph, masked, ratio, seed))
}

/// Builds a plan for an explicit hidden-node set.
pub fn plan_from_mask(graph: &MeshGraph, masked: Vec<bool>, ratio: f64, seed: u64) -> MaskPlan {
    let n = masked.len();
    let visible_index = (0..n).filter(|&i| !masked[i]).collect();
    let masked_index = (0..n).filter(|&i| masked[i]).collect();
    let surviving_edge_ids: Vec<usize> = (0..graph.n_edges())
        .filter(|&k| !masked[graph.senders[k]] && !masked[graph.receivers[k]])
        .collect();
    let surviving_edges = surviving_edge_ids
        .iter()
        .map(|&k| (graph.senders[k], graph.receivers[k]))
        .collect();
    MaskPlan {
        masked,
        visible_index,
        masked_index,
        surviving_edge_ids,
        surviving_edges,
        khop_edges: Vec::new(),
        ratio,
        k: 1,
        seed,
    }
}

/// Adds both directions of every visible pair at original-graph distance in `[2, k]`.
pub fn khop_augment(graph: &MeshGraph, plan: &MaskPlan, k: usize) -> MaskPlan {
    let mut out = plan.clone();
    out.k = k.max(1);
    out.khop_edges.clear();
    if k < 2 {
        return out;
    }
    let adj = graph.adjacency();
    let n = graph.n_nodes();
    let mut dist = vec![usize::MAX; n];
    let mut touched = Vec::new();
    let mut queue = VecDeque::new();
    for &src in &plan.visible_index {
        dist[src] = 0;
        touched.push(src);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            if dist[u] == k {
                continue;
            }
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    touched.push(v);
                    queue.push_back(v);
                }
            }
        }
        let mut reached: Vec<usize> = touched
            .iter()
            .copied()
            .filter(|&v| dist[v] >= 2 && !plan.masked[v])
            .collect();
        reached.sort_unstable();
        out.khop_edges.extend(reached.into_iter().map(|v| (src, v)));
        for &v in &touched {
            dist[v] = usize::MAX;
        }
        touched.clear();
    }
    out
}

/// Densely re-indexed visible sub-mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SubMesh {
    pub graph: MeshGraph,
    /// `mapping[i]` is the original id of sub-mesh node `i`.
    pub mapping: Vec<usize>,
    /// Row-major `[N_vis, width]` node features.
    pub node_features: Vec<f32>,
    pub edge_features: EdgeFeatures,
    pub is_khop: Vec<bool>,
}

/// Keeps visible nodes and their surviving + K-hop edges. When `flag_channel`
/// is set, a trailing edge-feature column marks shortcut edges with 1.
pub fn compact_subgraph(
    graph: &MeshGraph,
    plan: &MaskPlan,
    node_features: &[f32],
    node_width: usize,
    edge_features: &EdgeFeatures,
    flag_channel: bool,
) -> Result<SubMesh> {
    let n = graph.n_nodes();
    if plan.n_nodes() != n || node_features.len() != n * node_width {
        return Err(Error::shape("compact_subgraph", "plan/features do not match graph"));
    }
    let mut new_id = vec![usize::MAX; n];
    for (i, &old) in plan.visible_index.iter().enumerate() {
        new_id[old] = i;
    }
    let d = graph.dim;
    let nv = plan.n_visible();
    let mut positions = Vec::with_capacity(nv * d);
    let mut node_type = Vec::with_capacity(nv);
    let mut feats = Vec::with_capacity(nv * node_width);
    for &old in &plan.visible_index {
        positions.extend_from_slice(graph.position(old));
        node_type.push(graph.node_type[old]);
        feats.extend_from_slice(&node_features[old * node_width..(old + 1) * node_width]);
    }
    let ew = edge_features.width;
    let out_w = ew + usize::from(flag_channel);
    let n_sub_edges = plan.surviving_edge_ids.len() + plan.khop_edges.len();
    let mut senders = Vec::with_capacity(n_sub_edges);
    let mut receivers = Vec::with_capacity(n_sub_edges);
    let mut evals = Vec::with_capacity(n_sub_edges * out_w);
    let mut is_khop = Vec::with_capacity(n_sub_edges);
    for &k in &plan.surviving_edge_ids {
        senders.push(new_id[graph.senders[k]]);
        receivers.push(new_id[graph.receivers[k]]);
        evals.extend_from_slice(&edge_features.values[k * ew..(k + 1) * ew]);
        if flag_channel {
            evals.push(0.0);
        }
        is_khop.push(false);
    }
    if !plan.khop_edges.is_empty() {
        let (ks, kr): (Vec<usize>, Vec<usize>) = plan.khop_edges.iter().copied().unzip();
        let kf = edge_features_for(&graph.positions, d, &ks, &kr);
        for (j, (&s, &r)) in ks.iter().zip(&kr).enumerate() {
            senders.push(new_id[s]);
            receivers.push(new_id[r]);
            evals.extend_from_slice(&kf.values[j * ew..(j + 1) * ew]);
            if flag_channel {
                evals.push(1.0);
            }
            is_khop.push(true);
        }
    }
    Ok(SubMesh {
        graph: MeshGraph {
            dim: d,
            positions,
            node_type,
            senders,
            receivers,
            cells: Vec::new(),
        },
        mapping: plan.visible_index.clone(),
        node_features: feats,
        edge_features: EdgeFeatures {
            width: out_w,
            values: evals,
        },
        is_khop,
    })
}

/// Scatters encoder rows back to their original ids and fills hidden rows
/// with the shared `token` (`[1, p]`).
pub fn reinsert<T: Scalar>(
    tape: &mut Tape<'_, T>,
    encoded: Var,
    plan: &MaskPlan,
    token: Var,
) -> Result<Var> {
    let [rows, p] = tape.shape(encoded);
    if rows != plan.n_visible() {
        return Err(Error::shape(
            "reinsert",
            format!("{rows} encoded rows for {} visible nodes", plan.n_visible()),
        ));
    }
    if tape.shape(token) != [1, p] {
        return Err(Error::shape("reinsert", "token width differs from latent width"));
    }
    let n = plan.n_nodes();
    let visible = tape.scatter_add(encoded, Arc::from(plan.visible_index.as_slice()), n)?;
    if plan.n_masked() == 0 {
        return Ok(visible);
    }
    let copies = tape.gather_rows(token, Arc::from(vec![0usize; plan.n_masked()]))?;
    let hidden = tape.scatter_add(copies, Arc::from(plan.masked_index.as_slice()), n)?;
    tape.add(visible, hidden)
}

/// The decoder operates on every original mesh edge; shortcut edges are dropped.
pub fn restored_edges(graph: &MeshGraph) -> (Vec<usize>, Vec<usize>, EdgeFeatures) {
    (
        graph.senders.clone(),
        graph.receivers.clone(),
        crate::mesh::build_edge_features(graph),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::DiffArray;
    use crate::mesh::NodeType;
    use rand::Rng;
    use std::collections::HashSet;

    pub(crate) fn path_graph(n: usize) -> MeshGraph {
        let pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let positions = (0..n).flat_map(|i| [i as f32, 0.0]).collect();
        MeshGraph::from_undirected(2, positions, vec![NodeType::Fluid; n], &pairs).unwrap()
    }

    fn random_graph(n: usize, extra: usize, seed: u64) -> MeshGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
        for _ in 0..extra {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                pairs.push((a, b));
            }
        }
        let positions = (0..n * 2).map(|_| rng.random()).collect();
        MeshGraph::from_undirected(2, positions, vec![NodeType::Fluid; n], &pairs).unwrap()
    }

    fn bfs_dist(g: &MeshGraph) -> Vec<Vec<usize>> {
        let adj = g.adjacency();
        (0..g.n_nodes())
            .map(|s| {
                let mut d = vec![usize::MAX; g.n_nodes()];
                d[s] = 0;
                let mut q = VecDeque::from([s]);
                while let Some(u) = q.pop_front() {
                    for &v in &adj[u] {
                        if d[v] == usize::MAX {
                            d[v] = d[u] + 1;
                            q.push_back(v);
                        }
                    }
                }
                d
            })
            .collect()
    }

    #[test]
    fn exact_counts_and_identity() {
        let g = path_graph(10);
        let p = sample_mask(&g, 0.4, 1).unwrap();
        assert_eq!(p.n_masked(), 4);
        let p0 = sample_mask(&g, 0.0, 1).unwrap();
        assert_eq!(p0.n_masked(), 0);
        assert_eq!(p0.surviving_edge_ids.len(), g.n_edges());
    }

    #[test]
    fn rejects_full_mask() {
        let g = path_graph(3);
        assert!(matches!(sample_mask(&g, 0.9, 0), Err(Error::MaskAll { .. })));
        assert!(sample_mask(&g, 1.0, 0).is_err());
    }

    #[test]
    fn uniform_frequencies() {
        let g = path_graph(10);
        let mut counts = [0usize; 10];
        let trials = 10_000;
        for seed in 0..trials {
            for i in sample_mask(&g, 0.4, seed).unwrap().masked_index {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.4).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn khop_on_path() {
        let g = path_graph(3);
        let mut p = sample_mask(&g, 0.0, 0).unwrap();
        p.masked = vec![false, true, false];
        p.visible_index = vec![0, 2];
        p.masked_index = vec![1];
        p.surviving_edge_ids.clear();
        p.surviving_edges.clear();
        let a = khop_augment(&g, &p, 2);
        assert_eq!(a.khop_edges, vec![(0, 2), (2, 0)]);
    }

    #[test]
    fn khop_triangle_empty() {
        let g = MeshGraph::from_cells(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![NodeType::Fluid; 3],
            vec![0, 1, 2],
        )
        .unwrap();
        let p = khop_augment(&g, &sample_mask(&g, 0.0, 0).unwrap(), 2);
        assert!(p.khop_edges.is_empty());
    }

    #[test]
    fn khop_matches_bfs_oracle() {
        for seed in 0..20 {
            let g = random_graph(30, 10, seed);
            let dist = bfs_dist(&g);
            for k in 2..=3 {
                let p = khop_augment(&g, &sample_mask(&g, 0.5, seed).unwrap(), k);
                let got: HashSet<(usize, usize)> = p.khop_edges.iter().copied().collect();
                let mut want = HashSet::new();
                for u in 0..30 {
                    for v in 0..30 {
                        let d = dist[u][v];
                        if !p.masked[u] && !p.masked[v] && d >= 2 && d <= k {
                            want.insert((u, v));
                        }
                    }
                }
                assert_eq!(got, want);
                assert_eq!(got.len(), p.khop_edges.len());
            }
        }
    }

    #[test]
    fn compact_identity_at_zero_ratio() {
        let g = random_graph(12, 5, 3);
        let ef = crate::mesh::build_edge_features(&g);
        let feats: Vec<f32> = (0..12 * 2).map(|i| i as f32).collect();
        let p = sample_mask(&g, 0.0, 0).unwrap();
        let s = compact_subgraph(&g, &p, &feats, 2, &ef, false).unwrap();
        assert_eq!(s.graph.senders, g.senders);
        assert_eq!(s.graph.receivers, g.receivers);
        assert_eq!(s.mapping, (0..12).collect::<Vec<_>>());
        assert_eq!(s.node_features, feats);
        assert_eq!(s.edge_features, ef);
    }

    #[test]
    fn compact_drops_corner() {
        // Square 0-1-2-3 with centre 4; corner 0 touches 1, 3, 4.
        let positions = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.5, 0.5];
        let g = MeshGraph::from_cells(
            2,
            positions,
            vec![NodeType::Fluid; 5],
            vec![0, 1, 4, 1, 2, 4, 2, 3, 4, 3, 0, 4],
        )
        .unwrap();
        let mut p = sample_mask(&g, 0.0, 0).unwrap();
        p.masked[0] = true;
        p.visible_index = vec![1, 2, 3, 4];
        p.masked_index = vec![0];
        p.surviving_edge_ids = (0..g.n_edges())
            .filter(|&k| g.senders[k] != 0 && g.receivers[k] != 0)
            .collect();
        let ef = crate::mesh::build_edge_features(&g);
        let s = compact_subgraph(&g, &p, &[0.0; 5], 1, &ef, false).unwrap();
        assert_eq!(s.graph.n_nodes(), 4);
        assert_eq!(s.graph.n_edges(), g.n_edges() - 6);
        s.graph.validate().unwrap();
    }

    #[test]
    fn khop_flag_channel() {
        let g = path_graph(5);
        let mut p = sample_mask(&g, 0.0, 0).unwrap();
        p.masked[2] = true;
        p.visible_index = vec![0, 1, 3, 4];
        p.masked_index = vec![2];
        p.surviving_edge_ids = (0..g.n_edges())
            .filter(|&k| g.senders[k] != 2 && g.receivers[k] != 2)
            .collect();
        let p = khop_augment(&g, &p, 2);
        let ef = crate::mesh::build_edge_features(&g);
        let s = compact_subgraph(&g, &p, &[0.0; 5], 1, &ef, true).unwrap();
        assert_eq!(s.edge_features.width, 4);
        let k = s.is_khop.iter().position(|&b| b).unwrap();
        assert_eq!(s.edge_features.values[k * 4 + 3], 1.0);
        // 1 <-> 3 at distance 2, straight-line length 2.
        assert_eq!(s.edge_features.values[k * 4 + 2], 2.0);
        s.graph.validate().unwrap();
    }

    #[test]
    fn reinsert_places_token() {
        let g = path_graph(6);
        let p = sample_mask(&g, 0.5, 7).unwrap();
        let mut tape = Tape::<f64>::new();
        let enc_vals: Vec<f64> = (0..p.n_visible() * 2).map(|i| i as f64 + 1.0).collect();
        let enc = tape.leaf(DiffArray::new([p.n_visible(), 2], enc_vals.clone()).unwrap());
        let tok = tape.leaf(DiffArray::new([1, 2], vec![-7.5, 0.25]).unwrap());
        let full = reinsert(&mut tape, enc, &p, tok).unwrap();
        let v = tape.value(full);
        for &m in &p.masked_index {
            assert_eq!(v.row(m), &[-7.5, 0.25]);
        }
        for (i, &o) in p.visible_index.iter().enumerate() {
            assert_eq!(v.row(o), &enc_vals[i * 2..i * 2 + 2]);
        }
        let bad = tape.leaf(DiffArray::zeros([1, 2]));
        assert!(reinsert(&mut tape, bad, &p, tok).is_err());
    }

    #[test]
    fn restored_edge_set_is_original() {
        let g = random_graph(15, 6, 8);
        let (s, r, _) = restored_edges(&g);
        let a: HashSet<_> = s.into_iter().zip(r).collect();
        let b: HashSet<_> = g.senders.iter().copied().zip(g.receivers.iter().copied()).collect();
        assert_eq!(a, b);
    }
}
