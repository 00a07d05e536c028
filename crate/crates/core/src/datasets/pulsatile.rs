//! Pulsatile channel: a parabolic profile scaled by a periodic waveform that
//! travels downstream at speed `c` while its harmonics decay with distance.

use crate::error::{Error, Result};
use std::f64::consts::PI;

const HARMONICS: [f64; 2] = [0.4, 0.15];

#[derive(Debug, Clone, PartialEq)]
pub struct PulsatileParams {
    pub height: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub wave_speed: f64,
    /// Spatial decay rate of the first harmonic.
    pub decay: f64,
}

impl PulsatileParams {
    pub fn check(&self, dt: f64) -> Result<()> {
        if self.period <= 2.0 * dt {
            return Err(Error::InvalidArgument(format!(
                "period {} must exceed twice the time step {dt}",
                self.period
            )));
        }
        Ok(())
    }

    /// Streamwise amplitude `g(x, t)` and its `x` derivative.
    fn g(&self, x: f64, t: f64) -> (f64, f64) {
        let w = 2.0 * PI / self.period;
        let mut g = 1.0;
        let mut dg = 0.0;
        for (k, &a) in HARMONICS.iter().enumerate() {
            let k = (k + 1) as f64;
            let damp = (-self.decay * k * k * x).exp();
            let arg = k * w * (t - x / self.wave_speed) + k * self.phase;
            g += a * damp * arg.sin();
            dg += a * damp * (-self.decay * k * k * arg.sin() - k * w / self.wave_speed * arg.cos());
        }
        (self.amplitude * g, self.amplitude * dg)
    }

    /// Inlet waveform; equals the inlet centreline velocity.
    pub fn waveform(&self, t: f64) -> f64 {
        self.g(0.0, t).0
    }

    /// Velocity at streamwise position `x` and normalized height `eta` in `[0, 1]`.
    pub fn velocity(&self, x: f64, eta: f64, t: f64) -> [f64; 2] {
        let (g, dg) = self.g(x, t);
        let profile = 4.0 * eta * (1.0 - eta);
        let shape = 4.0 * eta * eta * (1.0 - eta) * (1.0 - eta);
        [profile * g, -self.height * dg * shape]
    }
}
