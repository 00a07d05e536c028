use super::context::{CoarseLevel, GraphContext};
use super::layers::{Mlp, Part, Update, UpdateKind};
use crate::diffcore::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    Flat,
    Wcycle,
}

impl ProcessorKind {
    pub fn coarse_levels(self) -> usize {
        match self {
            ProcessorKind::Flat => 0,
            ProcessorKind::Wcycle => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Message passing with block `block` on multigrid level `level`.
    Mp { block: usize, level: usize },
    /// Pool level `l` onto level `l + 1`.
    Down(usize),
    /// Broadcast level `l + 1` back onto level `l`.
    Up(usize),
}

/// W-cycle slots in visiting order: levels 0, 1, 2, 1, 0, 1, 0.
const W_LEVELS: [usize; 7] = [0, 1, 2, 1, 0, 1, 0];
/// Order in which blocks beyond the first seven are handed to slots; for
/// 15 blocks this yields 3, 2, 2, 2, 3, 2, 1.
const W_EXTRA: [usize; 8] = [0, 0, 1, 2, 3, 4, 4, 5];

/// Processing schedule with exactly `depth` message-passing stages.
pub fn schedule(kind: ProcessorKind, depth: usize) -> Result<Vec<Stage>> {
    match kind {
        ProcessorKind::Flat => Ok((0..depth).map(|block| Stage::Mp { block, level: 0 }).collect()),
        ProcessorKind::Wcycle => {
            if depth < W_LEVELS.len() {
                return Err(Error::Config(format!(
                    "a W-cycle needs at least {} message-passing steps, got {depth}",
                    W_LEVELS.len()
                )));
            }
            let mut per_slot = [1usize; 7];
            for k in 0..depth - W_LEVELS.len() {
                per_slot[W_EXTRA[k % W_EXTRA.len()]] += 1;
            }
            let mut out = Vec::new();
            let mut block = 0;
            let mut level = 0;
            for (slot, &target) in W_LEVELS.iter().enumerate() {
                while level < target {
                    out.push(Stage::Down(level));
                    level += 1;
                }
                while level > target {
                    level -= 1;
                    out.push(Stage::Up(level));
                }
                for _ in 0..per_slot[slot] {
                    out.push(Stage::Mp { block, level });
                    block += 1;
                }
            }
            Ok(out)
        }
    }
}

/// Cluster mean of fine latents.
pub fn downscale<T: Scalar>(tape: &mut Tape<'_, T>, v: Var, lvl: &CoarseLevel) -> Result<Var> {
    if tape.shape(v)[0] != lvl.n_fine {
        return Err(Error::shape("downscale", "latent rows != fine level size"));
    }
    let pooled = tape.scatter_add(v, lvl.assignment.clone(), lvl.n_coarse)?;
    let inv: Arc<[T]> = lvl.inv_count.iter().map(|&c| T::lit(c)).collect();
    tape.scale_rows(pooled, inv)
}

/// `skip_i + coarse_{assign(i)}`.
pub fn upscale<T: Scalar>(tape: &mut Tape<'_, T>, coarse: Var, lvl: &CoarseLevel, skip: Var) -> Result<Var> {
    if tape.shape(skip)[0] != lvl.assignment.len() {
        return Err(Error::shape("upscale", "assignment does not cover every fine node"));
    }
    let up = tape.gather_rows(coarse, lvl.assignment.clone())?;
    tape.add(skip, up)
}

/// Residual GraphNet block:
/// `e' = e + f_e([e, v_s, v_r])`, `v' = v + f_v([v, sum_{r_k = i} e'_k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNetBlock {
    pub edge: Update,
    pub node: Update,
}

impl GraphNetBlock {
    pub fn new<T: Scalar, R: Rng>(
        kind: UpdateKind,
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        expansion: usize,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            edge: Update::new(kind, store, &format!("{name}.edge"), 3 * width, width, expansion, zero_last, rng),
            node: Update::new(kind, store, &format!("{name}.node"), 2 * width, width, expansion, zero_last, rng),
        }
    }

    pub fn param_count(kind: UpdateKind, width: usize, expansion: usize) -> usize {
        Update::param_count(kind, 3 * width, width, expansion) + Update::param_count(kind, 2 * width, width, expansion)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        v: Var,
        e: Var,
        senders: &Arc<[usize]>,
        receivers: &Arc<[usize]>,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(v)[0];
        let de = self.edge.forward_parts(
            tape,
            &[
                Part::dense(e),
                Part::gathered(v, senders.clone()),
                Part::gathered(v, receivers.clone()),
            ],
        )?;
        let e_new = tape.add(e, de)?;
        let agg = tape.scatter_add(e_new, receivers.clone(), n)?;
        let dv = self.node.forward_parts(tape, &[Part::dense(v), Part::dense(agg)])?;
        let v_new = tape.add(v, dv)?;
        Ok((v_new, e_new))
    }
}

/// Sizes of one encode-process-decode network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnSpec {
    pub node_in: usize,
    pub edge_in: usize,
    pub out: usize,
    pub latent: usize,
    pub expansion: usize,
    pub depth: usize,
    pub processor: ProcessorKind,
    pub update: UpdateKind,
    pub zero_init: bool,
}

/// Encode (node and edge MLPs) -> process (message passing, optionally on a
/// multigrid W-cycle) -> decode (node MLP without output norm).
#[derive(Debug, Clone, PartialEq)]
pub struct Gnn {
    pub spec: GnnSpec,
    pub node_in: Mlp,
    pub edge_in: Mlp,
    /// Edge encoder for coarse level `l + 1`.
    pub coarse_edge_in: Vec<Mlp>,
    pub blocks: Vec<GraphNetBlock>,
    pub schedule: Vec<Stage>,
    pub node_out: Mlp,
}

impl Gnn {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, spec: GnnSpec, rng: &mut R) -> Result<Self> {
        let p = spec.latent;
        let schedule = schedule(spec.processor, spec.depth)?;
        let node_in = Mlp::new(store, &format!("{prefix}.node_in"), spec.node_in, p, p, true, false, rng);
        let edge_in = Mlp::new(store, &format!("{prefix}.edge_in"), spec.edge_in, p, p, true, false, rng);
        let coarse_edge_in = (1..=spec.processor.coarse_levels())
            .map(|l| Mlp::new(store, &format!("{prefix}.coarse{l}.edge_in"), spec.edge_in, p, p, true, false, rng))
            .collect();
        let blocks = (0..spec.depth)
            .map(|k| {
                GraphNetBlock::new(spec.update, store, &format!("{prefix}.block{k}"), p, spec.expansion, spec.zero_init, rng)
            })
            .collect();
        let node_out = Mlp::new(store, &format!("{prefix}.node_out"), p, p, spec.out, false, false, rng);
        Ok(Self {
            spec,
            node_in,
            edge_in,
            coarse_edge_in,
            blocks,
            schedule,
            node_out,
        })
    }

    pub fn param_count(spec: &GnnSpec) -> usize {
        let p = spec.latent;
        Mlp::param_count(spec.node_in, p, p, true)
            + (1 + spec.processor.coarse_levels()) * Mlp::param_count(spec.edge_in, p, p, true)
            + spec.depth * GraphNetBlock::param_count(spec.update, p, spec.expansion)
            + Mlp::param_count(p, p, spec.out, false)
    }

    pub fn encode_nodes<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.node_in.forward(tape, x)
    }

    fn edge_constant<T: Scalar>(tape: &mut Tape<'_, T>, values: &[f32], width: usize) -> Result<Var> {
        let rows = values.len() / width.max(1);
        tape.constant([rows, width], values.iter().map(|&x| T::lit(f64::from(x))).collect())
    }

    /// Runs the processor schedule on node latents `v` (`[N, p]`).
    pub fn process<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: Var, ctx: &GraphContext) -> Result<Var> {
        if tape.shape(v)[0] != ctx.n_nodes {
            return Err(Error::shape("process", "latent rows != graph nodes"));
        }
        if ctx.levels.len() < self.spec.processor.coarse_levels() {
            return Err(Error::Config("graph context lacks the multigrid levels".into()));
        }
        let raw = Self::edge_constant(tape, &ctx.edge_features, ctx.edge_width)?;
        let mut e = self.edge_in.forward(tape, raw)?;
        let mut v = v;
        let mut stack: Vec<(Var, Var, Var)> = Vec::new();
        for stage in &self.schedule {
            match *stage {
                Stage::Mp { block, level } => {
                    let (s, r) = ctx.level_edges(level);
                    let (s, r) = (s.clone(), r.clone());
                    (v, e) = self.blocks[block].forward(tape, v, e, &s, &r)?;
                }
                Stage::Down(l) => {
                    let lvl = &ctx.levels[l];
                    let pooled = downscale(tape, v, lvl)?;
                    stack.push((v, e, pooled));
                    v = pooled;
                    let raw = Self::edge_constant(tape, &lvl.edge_features, ctx.edge_width)?;
                    e = self.coarse_edge_in[l].forward(tape, raw)?;
                }
                Stage::Up(l) => {
                    let (skip_v, skip_e, pooled) = stack
                        .pop()
                        .ok_or_else(|| Error::Config("unbalanced W-cycle schedule".into()))?;
                    // Only the change made on the coarse level is sent back up.
                    let correction = tape.sub(v, pooled)?;
                    v = upscale(tape, correction, &ctx.levels[l], skip_v)?;
                    e = skip_e;
                }
            }
        }
        Ok(v)
    }

    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
        self.node_out.forward(tape, v)
    }

    /// Returns `(output [N, out], latent [N, p])`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, ctx: &GraphContext) -> Result<(Var, Var)> {
        let v = self.encode_nodes(tape, x)?;
        let latent = self.process(tape, v, ctx)?;
        let out = self.decode(tape, latent)?;
        Ok((out, latent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::random;
    use crate::diffcore::DiffArray;
    use crate::mesh::build_edge_features;
    use crate::model::context::mean_edge_length;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn count(s: &[Stage]) -> (usize, usize, usize) {
        s.iter().fold((0, 0, 0), |(m, d, u), st| match st {
            Stage::Mp { .. } => (m + 1, d, u),
            Stage::Down(_) => (m, d + 1, u),
            Stage::Up(_) => (m, d, u + 1),
        })
    }

    #[test]
    fn pinned_w_cycle() {
        use Stage::*;
        let s = schedule(ProcessorKind::Wcycle, 15).unwrap();
        let levels: Vec<String> = s
            .iter()
            .map(|st| match st {
                Mp { level, .. } => format!("m{level}"),
                Down(l) => format!("d{l}"),
                Up(l) => format!("u{l}"),
            })
            .collect();
        let want = "m0 m0 m0 d0 m1 m1 d1 m2 m2 u1 m1 m1 u0 m0 m0 m0 d0 m1 m1 u0 m0";
        assert_eq!(levels.join(" "), want);
        assert_eq!(count(&s), (15, 3, 3));
    }

    #[test]
    fn schedules_return_to_fine_level() {
        for m in 7..40 {
            let s = schedule(ProcessorKind::Wcycle, m).unwrap();
            let (mp, d, u) = count(&s);
            assert_eq!((mp, d), (m, u));
            let mut level = 0i64;
            for st in &s {
                match st {
                    Stage::Down(_) => level += 1,
                    Stage::Up(_) => level -= 1,
                    _ => {}
                }
                assert!(level >= 0);
            }
            assert_eq!(level, 0);
        }
        assert!(schedule(ProcessorKind::Wcycle, 6).is_err());
    }

    fn spec(processor: ProcessorKind, depth: usize, zero_init: bool) -> GnnSpec {
        GnnSpec {
            node_in: 3,
            edge_in: 3,
            out: 2,
            latent: 4,
            expansion: 2,
            depth,
            processor,
            update: UpdateKind::Gated,
            zero_init,
        }
    }

    #[test]
    fn counts_match_formula() {
        for (proc, depth) in [(ProcessorKind::Flat, 3), (ProcessorKind::Wcycle, 7), (ProcessorKind::Wcycle, 15)] {
            for update in [UpdateKind::Mlp, UpdateKind::Gated] {
                let sp = GnnSpec {
                    update,
                    ..spec(proc, depth, false)
                };
                let mut store = ParamStore::<f32>::new();
                Gnn::new(&mut store, "g", sp, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(store.count(), Gnn::param_count(&sp));
            }
        }
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let g = crate::datasets::square_grid(6, 0.2, 0).unwrap();
        let ctx = GraphContext::new(&g, &build_edge_features(&g), 3, 2, mean_edge_length(&g)).unwrap();
        for proc in [ProcessorKind::Flat, ProcessorKind::Wcycle] {
            let mut store = ParamStore::<f64>::new();
            let gnn = Gnn::new(&mut store, "g", spec(proc, 7, true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut tape = Tape::with_params(&store);
            let v = tape.leaf(random([36, 4], 3));
            let out = gnn.process(&mut tape, v, &ctx).unwrap();
            assert_eq!(tape.value(out).values, tape.value(v).values);
        }
    }

    #[test]
    fn down_up_arithmetic() {
        let g = crate::datasets::square_grid(5, 0.1, 2).unwrap();
        let ctx = GraphContext::new(&g, &build_edge_features(&g), 3, 1, 1.0).unwrap();
        let lvl = &ctx.levels[0];
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(random([25, 3], 4));
        let pooled = downscale(&mut tape, v, lvl).unwrap();
        // Pooled rows are cluster means.
        for c in 0..lvl.n_coarse {
            let members: Vec<usize> = (0..25).filter(|&i| lvl.assignment[i] == c).collect();
            for k in 0..3 {
                let m: f64 = members.iter().map(|&i| tape.value(v).row(i)[k]).sum::<f64>() / members.len() as f64;
                assert!((tape.value(pooled).row(c)[k] - m).abs() < 1e-12);
            }
        }
        let zero = tape.leaf(DiffArray::zeros([lvl.n_coarse, 3]));
        let up = upscale(&mut tape, zero, lvl, v).unwrap();
        assert_eq!(tape.value(up).values, tape.value(v).values);
        // Identity coarse processing leaves a zero correction and so the means.
        let corr = tape.sub(pooled, pooled).unwrap();
        let back = upscale(&mut tape, corr, lvl, v).unwrap();
        let again = downscale(&mut tape, back, lvl).unwrap();
        assert_eq!(tape.value(again).values, tape.value(pooled).values);
        let short = tape.leaf(DiffArray::zeros([3, 3]));
        assert!(upscale(&mut tape, zero, lvl, short).is_err());
    }

    #[test]
    fn single_cluster_broadcast() {
        let g = crate::mesh::MeshGraph::from_undirected(
            2,
            vec![0.0, 0.0, 1.0, 0.0],
            vec![crate::mesh::NodeType::Fluid; 2],
            &[(0, 1)],
        )
        .unwrap();
        let ctx = GraphContext::new(&g, &build_edge_features(&g), 3, 1, 1.0).unwrap();
        let lvl = &ctx.levels[0];
        assert_eq!(lvl.n_coarse, 1);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(DiffArray::new([2, 1], vec![1.0, 3.0]).unwrap());
        let pooled = downscale(&mut tape, v, lvl).unwrap();
        assert_eq!(tape.value(pooled).values, vec![2.0]);
        let c = tape.leaf(DiffArray::new([1, 1], vec![5.0]).unwrap());
        let up = upscale(&mut tape, c, lvl, v).unwrap();
        assert_eq!(tape.value(up).values, vec![6.0, 8.0]);
    }

    #[test]
    fn block_isolated_node_gets_zero_aggregate() {
        let mut store = ParamStore::<f64>::new();
        let b = GraphNetBlock::new(UpdateKind::Gated, &mut store, "b", 2, 2, false, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::with_params(&store);
        let v = tape.leaf(random([3, 2], 1));
        let e = tape.leaf(random([2, 2], 2));
        let s: Arc<[usize]> = Arc::from(vec![0, 1]);
        let r: Arc<[usize]> = Arc::from(vec![1, 0]);
        let (v2, _) = b.forward(&mut tape, v, e, &s, &r).unwrap();
        // Node 2 sees only itself and a zero aggregate.
        let mut t2 = Tape::with_params(&store);
        let x = t2.leaf(DiffArray::new([1, 2], tape.value(v).row(2).to_vec()).unwrap());
        let z = t2.leaf(DiffArray::zeros([1, 2]));
        let dv = b.node.forward_parts(&mut t2, &[Part::dense(x), Part::dense(z)]).unwrap();
        let want: Vec<f64> = tape.value(v).row(2).iter().zip(&t2.value(dv).values).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(v2).row(2), want.as_slice());
    }
}
