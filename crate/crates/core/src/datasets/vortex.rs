//! Kinematic surrogate of flow past cylinders: a parabolic channel profile,
//! a potential-flow doublet per obstacle and a street of Lamb–Oseen vortices
//! shed alternately from each obstacle and carried downstream.

use super::meshing::Obstacle;
use std::f64::consts::PI;

const STROUHAL: f64 = 0.2;
const CORE_GROWTH_NU: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct VortexParams {
    pub length: f64,
    pub height: f64,
    /// Centreline inflow speed.
    pub u_max: f64,
    pub obstacles: Vec<Obstacle>,
    /// Shedding phase offset in periods.
    pub phase: f64,
    /// Vortex circulation as a multiple of `r * u`.
    pub strength: f64,
}

impl VortexParams {
    fn profile(&self, y: f64) -> f64 {
        let eta = y / self.height;
        4.0 * eta * (1.0 - eta)
    }

    /// Decays to zero at the top and bottom walls.
    fn wall_damping(&self, y: f64) -> f64 {
        let d = 0.04;
        (1.0 - (-y.max(0.0) / d).exp()) * (1.0 - (-(self.height - y).max(0.0) / d).exp())
    }

    /// Velocity at `(x, y)` and time `t`.
    pub fn velocity(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let base = self.u_max * self.profile(y);
        let mut pert = [0.0, 0.0];
        let mut body_damp = 1.0;
        for (oi, o) in self.obstacles.iter().enumerate() {
            let u_loc = self.u_max * self.profile(o.cy);
            let (dx, dy) = (x - o.cx, y - o.cy);
            let rho2 = (dx * dx + dy * dy).max(1e-12);
            let r2 = o.r * o.r;
            pert[0] -= u_loc * r2 * (dx * dx - dy * dy) / (rho2 * rho2);
            pert[1] -= u_loc * r2 * 2.0 * dx * dy / (rho2 * rho2);
            body_damp *= 1.0 - (-(rho2.sqrt() - o.r).max(0.0) / (0.5 * o.r)).exp();

            let period = 2.0 * o.r / (STROUHAL * u_loc);
            let convect = 0.85 * u_loc;
            let gamma = self.strength * o.r * u_loc;
            let phase = self.phase + 0.37 * oi as f64;
            let x0 = o.cx + 1.5 * o.r;
            // Vortex k is released at (k + phase) * period / 2.
            let k_max = (2.0 * t / period - phase).floor() as i64;
            let k_min = k_max - (2.0 * (self.length - x0) / (convect * period)).ceil() as i64 - 1;
            for k in k_min..=k_max {
                let age = t - (k as f64 + phase) * period / 2.0;
                if age < 0.0 {
                    continue;
                }
                let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let vx = x0 + convect * age;
                if vx > self.length + 3.0 * o.r {
                    continue;
                }
                let vy = o.cy + sign * 0.35 * o.r;
                let grow = 1.0 - (-age / (0.25 * period)).exp();
                let core2 = 0.25 * r2 + 4.0 * CORE_GROWTH_NU * age;
                let (ex, ey) = (x - vx, y - vy);
                let q2 = (ex * ex + ey * ey).max(1e-12);
                let ut = -sign * gamma * grow / (2.0 * PI * q2) * (1.0 - (-q2 / core2).exp());
                pert[0] += -ut * ey;
                pert[1] += ut * ex;
            }
        }
        let damp = self.wall_damping(y) * body_damp;
        [base + damp * pert[0], damp * pert[1]]
    }
}
