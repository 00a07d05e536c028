use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const VAR_EPS: f64 = 1e-8;

/// Per-channel running mean/variance (Welford), frozen once training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    pub frozen: bool,
}

impl Normalizer {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Population variance per channel.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.channels()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().iter().map(|v| (v + VAR_EPS).sqrt()).collect()
    }

    /// Accumulates every row of the row-major `[n, channels]` matrix.
    /// Ignored once frozen.
    pub fn update(&mut self, rows: &[f32]) -> Result<()> {
        let c = self.channels();
        if c == 0 || rows.len() % c != 0 {
            return Err(Error::shape("normalizer_update", "row width != channel count"));
        }
        if self.frozen {
            return Ok(());
        }
        for row in rows.chunks_exact(c) {
            self.count += 1;
            let n = self.count as f64;
            for (k, &x) in row.iter().enumerate() {
                let x = f64::from(x);
                let delta = x - self.mean[k];
                self.mean[k] += delta / n;
                self.m2[k] += delta * (x - self.mean[k]);
            }
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// `(x - mean) / sqrt(var + 1e-8)`, in place.
    pub fn normalize(&self, rows: &mut [f32]) -> Result<()> {
        let c = self.channels();
        if c == 0 || rows.len() % c != 0 {
            return Err(Error::shape("normalize", "row width != channel count"));
        }
        let std = self.std();
        for row in rows.chunks_exact_mut(c) {
            for k in 0..c {
                row[k] = ((f64::from(row[k]) - self.mean[k]) / std[k]) as f32;
            }
        }
        Ok(())
    }

    pub fn denormalize(&self, rows: &mut [f32]) -> Result<()> {
        let c = self.channels();
        if c == 0 || rows.len() % c != 0 {
            return Err(Error::shape("denormalize", "row width != channel count"));
        }
        let std = self.std();
        for row in rows.chunks_exact_mut(c) {
            for k in 0..c {
                row[k] = (f64::from(row[k]) * std[k] + self.mean[k]) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_values() {
        let mut n = Normalizer::new(1);
        n.update(&[0.0, 2.0]).unwrap();
        assert_eq!(n.mean, vec![1.0]);
        assert_eq!(n.variance(), vec![1.0]);
    }

    #[test]
    fn round_trip() {
        let mut n = Normalizer::new(3);
        n.update(&[1.0, -5.0, 100.0, 3.0, 5.0, 300.0, 2.0, 0.0, 250.0]).unwrap();
        let orig = vec![0.3, 7.0, -12.0, 2.5, 1.0, 200.0];
        let mut x = orig.clone();
        n.normalize(&mut x).unwrap();
        n.denormalize(&mut x).unwrap();
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn frozen_ignores_updates() {
        let mut n = Normalizer::new(1);
        n.update(&[1.0, 3.0]).unwrap();
        n.freeze();
        n.update(&[100.0]).unwrap();
        assert_eq!(n.mean, vec![2.0]);
        assert_eq!(n.count, 2);
    }

    #[test]
    fn standard_normal_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f32> = (0..10_000)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        let mut n = Normalizer::new(1);
        n.update(&xs).unwrap();
        assert!(n.mean[0].abs() < 0.05);
        assert!((n.variance()[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn channel_mismatch() {
        let mut n = Normalizer::new(2);
        assert!(n.update(&[1.0, 2.0, 3.0]).is_err());
    }
}
