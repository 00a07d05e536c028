//! Dense arrays with reverse-mode differentiation, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod params;
mod scalar;
mod tape;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{AdamManifest, Checkpoint, Manifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::write_atomic;
pub use params::{Grads, Init, Param, ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tape::{gelu, DiffArray, Gradients, Tape, Var};

/// Central finite-difference gradient checks. Panics if the checked
/// function itself fails.
pub mod gradcheck {
    use super::*;

    fn rel(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-12)
    }

    /// Norm-based relative error `|a - n| / max(|a|, |n|)` between analytic
    /// and central finite-difference gradients of `f` w.r.t. every input array.
    pub fn max_rel_error(
        inputs: &[DiffArray<f64>],
        h: f64,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let store = ParamStore::new();
        max_rel_error_with(&store, inputs, h, |t, v| Ok(f(t, v))).0
    }

    /// Like [`max_rel_error`] for a function that also reads parameters.
    /// Returns `(worst input error, parameter error)`.
    pub fn max_rel_error_with(
        store: &ParamStore<f64>,
        inputs: &[DiffArray<f64>],
        h: f64,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
    ) -> (f64, f64) {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone().with_grad())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut pgrads = Grads::zeros_like(store);
        tape.accumulate_param_grads(&grads, &mut pgrads);
        let eval = |s: &ParamStore<f64>, arrays: &[DiffArray<f64>]| {
            let mut t = Tape::with_params(s);
            let vs: Vec<Var> = arrays.iter().map(|a| t.leaf(a.clone())).collect();
            let l = f(&mut t, &vs).unwrap();
            t.scalar(l)
        };
        let mut worst: f64 = 0.0;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads
                .of(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].values.len()]);
            let mut numeric = vec![0.0; analytic.len()];
            for k in 0..analytic.len() {
                let mut plus = inputs.to_vec();
                plus[i].values[k] += h;
                let mut minus = inputs.to_vec();
                minus[i].values[k] -= h;
                numeric[k] = (eval(store, &plus) - eval(store, &minus)) / (2.0 * h);
            }
            worst = worst.max(rel(&analytic, &numeric));
        }
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut s = store.clone();
        for id in store.ids() {
            for k in 0..store.get(id).values.len() {
                let orig = s.get(id).values[k];
                s.get_mut(id).values[k] = orig + h;
                let up = eval(&s, inputs);
                s.get_mut(id).values[k] = orig - h;
                let down = eval(&s, inputs);
                s.get_mut(id).values[k] = orig;
                numeric.push((up - down) / (2.0 * h));
                analytic.push(pgrads.get(id)[k]);
            }
        }
        (worst, rel(&analytic, &numeric))
    }

    pub fn random(shape: [usize; 2], seed: u64) -> DiffArray<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape[0] * shape[1])
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        DiffArray::new(shape, values).unwrap()
    }

    /// Contracts `out` with a fixed random weight so every output element
    /// contributes to the scalar.
    pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
        let w = random(tape.shape(out), seed);
        let wv = tape.leaf(w);
        let prod = tape.mul(out, wv).unwrap();
        tape.sum(prod)
    }
}
