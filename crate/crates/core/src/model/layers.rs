use crate::diffcore::{Init, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use std::sync::Arc;

/// One input block of a split first layer: `x @ W[rows]`, optionally gathered
/// afterwards. Projecting nodes before gathering them onto edges is cheaper
/// than concatenating per-edge inputs.
#[derive(Clone)]
pub struct Part {
    pub x: Var,
    pub gather: Option<Arc<[usize]>>,
}

impl Part {
    pub fn dense(x: Var) -> Self {
        Self { x, gather: None }
    }

    pub fn gathered(x: Var, index: Arc<[usize]>) -> Self {
        Self {
            x,
            gather: Some(index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::FanIn };
        let w = store.add_init(format!("{name}.w"), [fan_in, out], init, rng);
        let b = store.add_init(format!("{name}.b"), [1, out], Init::Zeros, rng);
        Self { w, b, fan_in, out }
    }

    pub fn param_count(fan_in: usize, out: usize) -> usize {
        fan_in * out + out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_parts(tape, &[Part::dense(x)])
    }

    /// `sum_k gather_k(x_k @ W[rows_k]) + b`, where the row blocks of `W`
    /// follow the column widths of the parts in order.
    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<'_, T>, parts: &[Part]) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let total: usize = parts.iter().map(|p| tape.shape(p.x)[1]).sum();
        if total != self.fan_in {
            return Err(Error::shape(
                "linear",
                format!("input width {total} != fan-in {}", self.fan_in),
            ));
        }
        let mut acc: Option<Var> = None;
        let mut offset = 0;
        for part in parts {
            let width = tape.shape(part.x)[1];
            let block = if parts.len() == 1 {
                w
            } else {
                tape.slice_rows(w, offset, offset + width)?
            };
            offset += width;
            let mut y = tape.matmul(part.x, block)?;
            if let Some(index) = &part.gather {
                y = tape.gather_rows(y, index.clone())?;
            }
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::shape("linear", "no input parts"))?;
        tape.add_row(acc, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        Self::with_gain(store, name, width, false, rng)
    }

    /// A zero gain makes the normalized output start at `bias`.
    pub fn with_gain<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        zero_gain: bool,
        rng: &mut R,
    ) -> Self {
        let gain = if zero_gain { Init::Zeros } else { Init::Ones };
        Self {
            gain: store.add_init(format!("{name}.gain"), [1, width], gain, rng),
            bias: store.add_init(format!("{name}.bias"), [1, width], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

/// Linear -> ReLU -> Linear -> ReLU -> Linear, with an optional output LayerNorm.
/// `zero_last` zeroes the LayerNorm gain if there is one, else the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: [Linear; 3],
    pub norm: Option<LayerNormParams>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        hidden: usize,
        out: usize,
        layer_norm: bool,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let layers = [
            Linear::new(store, &format!("{name}.l0"), fan_in, hidden, false, rng),
            Linear::new(store, &format!("{name}.l1"), hidden, hidden, false, rng),
            Linear::new(store, &format!("{name}.l2"), hidden, out, zero_last && !layer_norm, rng),
        ];
        let norm = layer_norm.then(|| LayerNormParams::with_gain(store, &format!("{name}.ln"), out, zero_last, rng));
        Self { layers, norm }
    }

    pub fn param_count(fan_in: usize, hidden: usize, out: usize, layer_norm: bool) -> usize {
        Linear::param_count(fan_in, hidden)
            + Linear::param_count(hidden, hidden)
            + Linear::param_count(hidden, out)
            + if layer_norm { 2 * out } else { 0 }
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_parts(tape, &[Part::dense(x)])
    }

    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<'_, T>, parts: &[Part]) -> Result<Var> {
        let h = self.layers[0].forward_parts(tape, parts)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, h)?;
        let h = tape.relu(h);
        let y = self.layers[2].forward(tape, h)?;
        match &self.norm {
            Some(ln) => ln.forward(tape, y),
            None => Ok(y),
        }
    }
}

/// `out((A x + a) * gelu(B x + b))` with both branches of width `e * p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlp {
    pub branch_a: Linear,
    pub branch_b: Linear,
    pub out: Linear,
    pub expansion: usize,
}

impl GatedMlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        width: usize,
        expansion: usize,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let inner = expansion * width;
        Self {
            branch_a: Linear::new(store, &format!("{name}.a"), fan_in, inner, false, rng),
            branch_b: Linear::new(store, &format!("{name}.b"), fan_in, inner, false, rng),
            out: Linear::new(store, &format!("{name}.out"), inner, width, zero_last, rng),
            expansion,
        }
    }

    /// `2 (in e p + e p) + (e p p + p)`.
    pub fn param_count(fan_in: usize, width: usize, expansion: usize) -> usize {
        let inner = expansion * width;
        2 * (fan_in * inner + inner) + (inner * width + width)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_parts(tape, &[Part::dense(x)])
    }

    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<'_, T>, parts: &[Part]) -> Result<Var> {
        let a = self.branch_a.forward_parts(tape, parts)?;
        let b = self.branch_b.forward_parts(tape, parts)?;
        let gate = tape.gelu(b);
        let h = tape.mul(a, gate)?;
        self.out.forward(tape, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Mlp,
    Gated,
}

/// Edge or node update network inside a message-passing block. Both kinds
/// end in a LayerNorm, which keeps the residual stream bounded.
#[derive(Debug, Clone, PartialEq)]
pub enum Update {
    Mlp(Mlp),
    Gated(GatedMlp, LayerNormParams),
}

impl Update {
    pub fn new<T: Scalar, R: Rng>(
        kind: UpdateKind,
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        width: usize,
        expansion: usize,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        match kind {
            UpdateKind::Mlp => Update::Mlp(Mlp::new(store, name, fan_in, width, width, true, zero_last, rng)),
            UpdateKind::Gated => Update::Gated(
                GatedMlp::new(store, name, fan_in, width, expansion, false, rng),
                LayerNormParams::with_gain(store, &format!("{name}.ln"), width, zero_last, rng),
            ),
        }
    }

    pub fn param_count(kind: UpdateKind, fan_in: usize, width: usize, expansion: usize) -> usize {
        match kind {
            UpdateKind::Mlp => Mlp::param_count(fan_in, width, width, true),
            UpdateKind::Gated => GatedMlp::param_count(fan_in, width, expansion) + 2 * width,
        }
    }

    pub fn forward_parts<T: Scalar>(&self, tape: &mut Tape<'_, T>, parts: &[Part]) -> Result<Var> {
        match self {
            Update::Mlp(m) => m.forward_parts(tape, parts),
            Update::Gated(g, ln) => {
                let y = g.forward_parts(tape, parts)?;
                ln.forward(tape, y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{max_rel_error_with, project, random};
    use crate::diffcore::DiffArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn gated_count_p2_e3() {
        let mut store = ParamStore::<f32>::new();
        GatedMlp::new(&mut store, "g", 2, 2, 3, false, &mut rng());
        assert_eq!(store.count(), 50);
        assert_eq!(GatedMlp::param_count(2, 2, 3), 50);
    }

    #[test]
    fn mlp_count_matches() {
        for &(i, h, o, ln) in &[(5, 8, 3, true), (7, 4, 2, false), (1, 1, 1, true)] {
            let mut store = ParamStore::<f32>::new();
            Mlp::new(&mut store, "m", i, h, o, ln, false, &mut rng());
            assert_eq!(store.count(), Mlp::param_count(i, h, o, ln));
        }
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let m = Mlp::new(&mut store, "m", 3, 4, 2, true, false, &mut rng());
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !p.name.ends_with("gain") {
                p.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(random([5, 3], 1));
        let y = m.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).values.iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), [5, 2]);
    }

    #[test]
    fn closed_gate_gives_out_bias() {
        let mut store = ParamStore::<f64>::new();
        let g = GatedMlp::new(&mut store, "g", 2, 2, 3, false, &mut rng());
        store.get_mut(g.branch_b.w).values.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(g.out.b).values = vec![0.5, -1.5];
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(random([4, 2], 2));
        let y = g.forward(&mut tape, x).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(y).row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn split_equals_concat() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 5, 3, false, &mut rng());
        let mut tape = Tape::with_params(&store);
        let a = tape.leaf(random([4, 2], 3));
        let n = tape.leaf(random([3, 3], 4));
        let idx: Arc<[usize]> = Arc::from(vec![2, 0, 1, 2]);
        let split = lin
            .forward_parts(&mut tape, &[Part::dense(a), Part::gathered(n, idx.clone())])
            .unwrap();
        let g = tape.gather_rows(n, idx).unwrap();
        let cat = tape.concat_cols(&[a, g]).unwrap();
        let full = lin.forward(&mut tape, cat).unwrap();
        for (x, y) in tape.value(split).values.iter().zip(&tape.value(full).values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn param_gradcheck(
        build: impl Fn(&mut ParamStore<f64>) -> Box<dyn Fn(&mut Tape<'_, f64>, Var) -> Result<Var>>,
        in_w: usize,
    ) {
        let mut store = ParamStore::<f64>::new();
        let f = build(&mut store);
        // Move biases away from zero so every path is exercised.
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).values.iter_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let (input_err, param_err) = max_rel_error_with(&store, &[random([6, in_w], 5)], 1e-6, |tape, vars| {
            let y = f(tape, vars[0])?;
            Ok(project(tape, y, 7))
        });
        assert!(input_err < 1e-4, "input grad error {input_err}");
        assert!(param_err < 1e-4, "param grad error {param_err}");
    }

    #[test]
    fn mlp_gradcheck() {
        param_gradcheck(
            |s| {
                let m = Mlp::new(s, "m", 3, 4, 2, true, false, &mut rng());
                Box::new(move |t, x| m.forward(t, x))
            },
            3,
        );
    }

    #[test]
    fn gated_gradcheck() {
        param_gradcheck(
            |s| {
                let g = GatedMlp::new(s, "g", 3, 2, 3, false, &mut rng());
                Box::new(move |t, x| g.forward(t, x))
            },
            3,
        );
    }

    #[test]
    fn split_gradcheck() {
        param_gradcheck(
            |s| {
                let g = GatedMlp::new(s, "g", 4, 2, 2, false, &mut rng());
                Box::new(move |t, x| {
                    let idx: Arc<[usize]> = Arc::from(vec![5, 1, 1, 0, 3, 2]);
                    let left = t.slice_rows(x, 0, 6)?;
                    // Feed the same rows twice, once gathered, to hit both paths.
                    let node = t.leaf(DiffArray::new([6, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 0.15, -0.25, 0.35]).unwrap());
                    g.forward_parts(t, &[Part::dense(left), Part::gathered(node, idx)])
                })
            },
            2,
        );
    }
}
