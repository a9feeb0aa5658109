//! Cart-pole dynamics with two injected noise sensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole length.
    pub length: f64,
    pub force: f64,
    pub dt: f64,
    pub theta_limit: f64,
    pub x_limit: f64,
    pub max_steps: usize,
    /// Standard deviation of the two noise sensors.
    pub noise_std: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            length: 0.5,
            force: 10.0,
            dt: 0.02,
            theta_limit: 12f64.to_radians(),
            x_limit: 2.4,
            max_steps: 500,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

/// Number of observation channels.
pub const OBS_DIM: usize = 7;
/// Names of the observation channels in order.
pub const OBS_NAMES: [&str; OBS_DIM] = ["noise0", "x", "x_dot", "cos_theta", "sin_theta", "theta_dot", "noise1"];
/// Indices of the noise channels.
pub const NOISE_CHANNELS: [usize; 2] = [0, 6];

/// Accelerations `(x_ddot, theta_ddot)` under horizontal force `f`.
pub fn accelerations(s: &CartPoleState, f: f64, p: &CartPoleParams) -> (f64, f64) {
    let total = p.mass_cart + p.mass_pole;
    let pml = p.mass_pole * p.length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (f + pml * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (p.gravity * sin - cos * temp) / (p.length * (4.0 / 3.0 - p.mass_pole * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    (x_acc, theta_acc)
}

/// One explicit-Euler step. `action` scales the force, normally `-1` or `+1`.
/// `t` counts steps already taken. Returns the next state, the reward and
/// whether the episode ended.
pub fn cartpole_step(s: &CartPoleState, action: f64, t: usize, p: &CartPoleParams) -> (CartPoleState, f64, bool) {
    let (x_acc, theta_acc) = accelerations(s, action * p.force, p);
    let next = CartPoleState {
        x: s.x + p.dt * s.x_dot,
        x_dot: s.x_dot + p.dt * x_acc,
        theta: s.theta + p.dt * s.theta_dot,
        theta_dot: s.theta_dot + p.dt * theta_acc,
    };
    let done = next.theta.abs() > p.theta_limit || next.x.abs() > p.x_limit || t + 1 >= p.max_steps;
    (next, 1.0, done)
}

/// Episode state with its own noise stream.
#[derive(Clone, Debug)]
pub struct CartPole {
    pub params: CartPoleParams,
    pub state: CartPoleState,
    pub t: usize,
    rng: ChaCha8Rng,
}

impl CartPole {
    /// Starts from a uniform perturbation in `[-0.05, 0.05]` per coordinate.
    pub fn new(params: CartPoleParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random_range(-0.05..0.05);
        let state = CartPoleState {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
        };
        CartPole { params, state, t: 0, rng }
    }

    /// `[noise, x, x_dot, cos(theta), sin(theta), theta_dot, noise]`
    pub fn observe(&mut self) -> [f64; OBS_DIM] {
        let s = self.state;
        let std = self.params.noise_std;
        let mut noise = || {
            if std > 0.0 {
                Normal::new(0.0, std).expect("positive std").sample(&mut self.rng)
            } else {
                0.0
            }
        };
        let n0 = noise();
        let n1 = noise();
        [n0, s.x, s.x_dot, s.theta.cos(), s.theta.sin(), s.theta_dot, n1]
    }

    pub fn step(&mut self, action: f64) -> (f64, bool) {
        let (next, r, done) = cartpole_step(&self.state, action, self.t, &self.params);
        self.state = next;
        self.t += 1;
        (r, done)
    }
}
