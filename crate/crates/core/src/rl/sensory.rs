//! Permutation-invariant sensory layer and the policies built on it.
//!
//! Every sensor runs the same small networks on its own reading, its
//! one-step change and that change signed by the previous action. A
//! learned query bank, which never sees the observation, scores the sensors:
//! `R[j][i] = Q_j . K_i / sqrt(d)` and `C_j = Q_j . w_c`. The gate
//! `m = relu6(R^2 + 2R + C(1 + |R|))` weights the sensor values, which are
//! averaged over sensors, so reordering the sensors leaves the output
//! unchanged.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mod_laws::scalar::{mod_fig1d, relu_alpha};
use crate::{Error, Result};

/// Cap of the sensory gate.
pub const GATE_CAP: f64 = 6.0;

/// `relu6(R^2 + 2R + C(1 + |R|))`
pub fn sensory_message(r: f64, c: f64) -> f64 {
    relu_alpha(mod_fig1d(r, c), GATE_CAP)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensoryConfig {
    pub num_sensors: usize,
    pub hidden: usize,
    /// Width of keys, values and queries.
    pub dim: usize,
    pub num_queries: usize,
    /// Multiplier applied to the one-step change of each reading.
    pub delta_scale: f64,
}

impl Default for SensoryConfig {
    fn default() -> Self {
        SensoryConfig {
            num_sensors: crate::rl::cartpole::OBS_DIM,
            hidden: 16,
            dim: 4,
            num_queries: 4,
            delta_scale: 5.0,
        }
    }
}

/// Per-sensor input width: reading, scaled change and change signed by the
/// previous action.
const SENSOR_IN: usize = 3;

/// One hidden tanh layer applied to a single sensor.
#[derive(Clone, Copy, Debug)]
struct SensorNet {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl SensorNet {
    fn alloc(off: &mut usize, inp: usize, hidden: usize, out: usize) -> Self {
        let mut take = |n: usize| {
            let o = *off;
            *off += n;
            o
        };
        SensorNet {
            w1: take(inp * hidden),
            b1: take(hidden),
            w2: take(hidden * out),
            b2: take(out),
        }
    }

    fn eval(&self, th: &[f64], x: &[f64], hidden: usize, out: &mut [f64]) {
        let inp = x.len();
        let d = out.len();
        out.copy_from_slice(&th[self.b2..self.b2 + d]);
        for h in 0..hidden {
            let mut z = th[self.b1 + h];
            for (i, xi) in x.iter().enumerate() {
                z += xi * th[self.w1 + i * hidden + h];
            }
            let a = z.tanh();
            for (k, o) in out.iter_mut().enumerate() {
                *o += a * th[self.w2 + h * d + k];
            }
        }
        debug_assert_eq!(inp, SENSOR_IN);
    }
}

/// Layer geometry; parameters live in a flat vector owned by the caller.
#[derive(Clone, Debug)]
pub struct SensoryLayer {
    pub cfg: SensoryConfig,
    fk: SensorNet,
    fv: SensorNet,
    queries: usize,
    wc: usize,
    len: usize,
}

/// Result of one sensory pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SensoryOutput {
    /// Sensor-averaged gated values, `num_queries x dim` row-major.
    pub message: Vec<f64>,
    /// Gates `m[j][i]`, `num_queries x num_sensors` row-major.
    pub gates: Vec<f64>,
    /// Per-query context `C_j`.
    pub context: Vec<f64>,
}

impl SensoryLayer {
    pub fn new(cfg: SensoryConfig) -> Result<Self> {
        if cfg.num_sensors == 0 || cfg.hidden == 0 || cfg.dim == 0 || cfg.num_queries == 0 {
            return Err(Error::config("sensory layer sizes must be positive"));
        }
        let mut off = 0;
        let fk = SensorNet::alloc(&mut off, SENSOR_IN, cfg.hidden, cfg.dim);
        let fv = SensorNet::alloc(&mut off, SENSOR_IN, cfg.hidden, cfg.dim);
        let queries = off;
        off += cfg.num_queries * cfg.dim;
        let wc = off;
        off += cfg.dim;
        Ok(SensoryLayer {
            cfg,
            fk,
            fv,
            queries,
            wc,
            len: off,
        })
    }

    pub fn num_params(&self) -> usize {
        self.len
    }

    pub fn message_len(&self) -> usize {
        self.cfg.num_queries * self.cfg.dim
    }

    /// Query-bank context `C_j`; depends on parameters only.
    pub fn context(&self, th: &[f64]) -> Vec<f64> {
        let d = self.cfg.dim;
        (0..self.cfg.num_queries)
            .map(|j| (0..d).map(|k| th[self.queries + j * d + k] * th[self.wc + k]).sum())
            .collect()
    }

    pub fn forward(&self, th: &[f64], obs: &[f64], prev_obs: &[f64], prev_action: f64) -> Result<SensoryOutput> {
        let (n, d, q) = (self.cfg.num_sensors, self.cfg.dim, self.cfg.num_queries);
        if obs.len() != n || prev_obs.len() != n {
            return Err(Error::shape(format!(
                "sensory layer expects {n} readings, got {} and {}",
                obs.len(),
                prev_obs.len()
            )));
        }
        if th.len() != self.len {
            return Err(Error::shape(format!("expected {} parameters, got {}", self.len, th.len())));
        }
        let mut keys = vec![0.0; n * d];
        let mut vals = vec![0.0; n * d];
        for i in 0..n {
            let delta = self.cfg.delta_scale * (obs[i] - prev_obs[i]);
            let x = [obs[i], delta, prev_action * delta];
            self.fk.eval(th, &x, self.cfg.hidden, &mut keys[i * d..(i + 1) * d]);
            self.fv.eval(th, &x, self.cfg.hidden, &mut vals[i * d..(i + 1) * d]);
        }
        let context = self.context(th);
        let scale = 1.0 / (d as f64).sqrt();
        let mut gates = vec![0.0; q * n];
        let mut message = vec![0.0; q * d];
        for j in 0..q {
            let qj = &th[self.queries + j * d..self.queries + (j + 1) * d];
            for i in 0..n {
                let r = scale * qj.iter().zip(&keys[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                let m = sensory_message(r, context[j]);
                gates[j * n + i] = m;
                for k in 0..d {
                    message[j * d + k] += m * vals[i * d + k];
                }
            }
            for v in &mut message[j * d..(j + 1) * d] {
                *v /= n as f64;
            }
        }
        Ok(SensoryOutput { message, gates, context })
    }
}

/// Per-sensor relevance of one step: mean over queries of how far the gate
/// moves from its value at zero evidence.
pub fn sensor_relevance(out: &SensoryOutput, num_sensors: usize) -> Vec<f64> {
    let q = out.context.len();
    (0..num_sensors)
        .map(|i| {
            (0..q)
                .map(|j| (out.gates[j * num_sensors + i] - relu_alpha(out.context[j], GATE_CAP)).abs())
                .sum::<f64>()
                / q as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Sensory layer followed by a linear action head.
    Co4,
    /// Fixed-order MLP on the raw observation and previous action.
    Baseline,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "co4" => Ok(PolicyKind::Co4),
            "baseline" | "mlp" => Ok(PolicyKind::Baseline),
            other => Err(Error::config(format!("unknown policy {other:?}; expected co4 or baseline"))),
        }
    }
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Co4 => "co4",
            PolicyKind::Baseline => "baseline",
        }
    }
}

/// Recurrent inputs carried between steps of an episode.
#[derive(Clone, Debug, Default)]
pub struct PolicyState {
    pub prev_obs: Option<Vec<f64>>,
    pub prev_action: f64,
}

/// A policy architecture over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Policy {
    Co4 { layer: SensoryLayer, head: usize },
    Baseline { inputs: usize, hidden: usize },
}

impl Policy {
    pub fn new(kind: PolicyKind, cfg: SensoryConfig) -> Result<Self> {
        match kind {
            PolicyKind::Co4 => {
                let layer = SensoryLayer::new(cfg)?;
                let head = layer.num_params();
                Ok(Policy::Co4 { layer, head })
            }
            PolicyKind::Baseline => Ok(Policy::Baseline {
                inputs: cfg.num_sensors,
                hidden: cfg.hidden,
            }),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Co4 { .. } => PolicyKind::Co4,
            Policy::Baseline { .. } => PolicyKind::Baseline,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Policy::Co4 { layer, head } => head + layer.message_len() + 1,
            Policy::Baseline { inputs, hidden } => (inputs + 1) * hidden + hidden + hidden + 1,
        }
    }

    /// Gaussian initialization scaled by fan-in.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut th: Vec<f64> = (0..self.num_params()).map(|_| normal.sample(rng)).collect();
        let scale = match self {
            Policy::Co4 { layer, .. } => 1.0 / ((SENSOR_IN + layer.cfg.dim) as f64).sqrt(),
            Policy::Baseline { inputs, .. } => 1.0 / ((inputs + 1) as f64).sqrt(),
        };
        th.iter_mut().for_each(|v| *v *= scale);
        th
    }

    /// Action in `{-1, +1}` and, for the sensory policy, the layer output.
    pub fn act(&self, th: &[f64], st: &mut PolicyState, obs: &[f64]) -> Result<(f64, Option<SensoryOutput>)> {
        let prev = st.prev_obs.take().unwrap_or_else(|| obs.to_vec());
        let (score, out) = match self {
            Policy::Co4 { layer, head } => {
                let out = layer.forward(&th[..*head], obs, &prev, st.prev_action)?;
                let w = &th[*head..];
                let s = out.message.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[out.message.len()];
                (s, Some(out))
            }
            Policy::Baseline { inputs, hidden } => {
                if obs.len() != *inputs {
                    return Err(Error::shape(format!("baseline expects {inputs} readings, got {}", obs.len())));
                }
                let (w1, b1, w2, b2) = (0, (inputs + 1) * hidden, (inputs + 2) * hidden, (inputs + 3) * hidden);
                let mut s = th[b2];
                for h in 0..*hidden {
                    let mut z = th[b1 + h] + st.prev_action * th[w1 + inputs * hidden + h];
                    for (i, o) in obs.iter().enumerate() {
                        z += o * th[w1 + i * hidden + h];
                    }
                    s += z.tanh() * th[w2 + h];
                }
                (s, None)
            }
        };
        let action = if score >= 0.0 { 1.0 } else { -1.0 };
        st.prev_obs = Some(obs.to_vec());
        st.prev_action = action;
        Ok((action, out))
    }
}
