//! Parameters, basic layers and the optimizer.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{load_tensor, save_tensor, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    decay: bool,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        cur.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Parameter values in registration order.
    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Puts every parameter on `tape` as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Params<'t> {
        Params {
            vars: self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect(),
        }
    }

    /// Writes one tensor blob per parameter plus an index file.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut index = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("{i:04}.bin");
            save_tensor(dir.join(&file), &e.value)?;
            index.push(IndexEntry {
                name: e.name.clone(),
                file,
                shape: e.value.shape().to_vec(),
            });
        }
        std::fs::write(dir.join("params.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    /// Loads values saved by [`ParamSet::save`] into an identically built set.
    pub fn load(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let index: Vec<IndexEntry> = serde_json::from_slice(&std::fs::read(dir.join("params.json"))?)?;
        if index.len() != self.entries.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model has {}",
                index.len(),
                self.entries.len()
            )));
        }
        for (i, ie) in index.iter().enumerate() {
            if ie.name != self.entries[i].name {
                return Err(Error::config(format!(
                    "checkpoint parameter {i} is {:?}, model expects {:?}",
                    ie.name, self.entries[i].name
                )));
            }
            self.set(ParamId(i), load_tensor(dir.join(&ie.file))?)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// Parameters bound to a tape for one forward/backward pass.
pub struct Params<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Params<'t> {
    /// Wraps already-created variables, one per parameter in registration order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Params { vars }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    /// Gradients for every parameter, zeros where the loss does not depend on it.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.get_or_zeros(v)).collect()
    }
}

/// Glorot-uniform matrix of shape `(fan_in, fan_out)`.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
}

/// `y = x W (+ b)` with `W` of shape `(in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(fan_in, fan_out, rng), true);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false));
        Linear { w, b }
    }

    pub fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.get(self.w))?;
        match self.b {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[dim]), false),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

/// Optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 20,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
pub fn cosine_lr(base: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    cfg: OptConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptConfig, ps: &ParamSet) -> Self {
        let zeros = |ps: &ParamSet| ps.entries.iter().map(|e| vec![0.0; e.value.numel()]).collect();
        AdamW {
            m: zeros(ps),
            v: zeros(ps),
            cfg,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr`. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<f64> {
        if grads.len() != ps.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), ps.len())));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric("non-finite gradient norm"));
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (e, g)) in ps.entries.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if e.decay { lr * c.weight_decay } else { 0.0 };
            for (j, w) in e.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps) + decay * *w;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, true, &mut rng);
        let before = ps.clone();
        let mut opt = AdamW::new(OptConfig::default(), &ps);
        for _ in 0..5 {
            let tape = Tape::new();
            let p = ps.bind(&tape);
            let x = tape.constant(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
            let loss = lin.forward(&p, &x).unwrap().square().mean();
            let g = tape.backward(&loss).unwrap();
            opt.step(&mut ps, &p.grads(&g), 0.0).unwrap();
        }
        for id in ps.ids() {
            assert_eq!(ps.get(id), before.get(id));
        }
    }

    #[test]
    fn adamw_fits_linear_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 2, 1, true, &mut rng);
        let x = Tensor::uniform(&[64, 2], -1.0, 1.0, &mut rng);
        let y = Tensor::from_fn(&[64, 1], |i| 3.0 * x.data()[2 * i] - 2.0 * x.data()[2 * i + 1] + 0.5);
        let cfg = OptConfig {
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..OptConfig::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        let mut last = f64::INFINITY;
        for step in 0..2000 {
            let tape = Tape::new();
            let p = ps.bind(&tape);
            let pred = lin.forward(&p, &tape.constant(x.clone())).unwrap();
            let loss = pred.sub(&tape.constant(y.clone())).unwrap().square().mean();
            last = loss.value().item().unwrap();
            let g = tape.backward(&loss).unwrap();
            opt.step(&mut ps, &p.grads(&g), cosine_lr(0.05, 10, 2000, step)).unwrap();
        }
        assert!(last < 1e-4, "loss {last}");
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 10, 110, 0) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 110, 9) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 110, 10) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 110, 60) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 110, 110).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        Linear::new(&mut ps, "a", 3, 4, true, &mut rng);
        ps.save(dir.path()).unwrap();
        let mut other = ParamSet::new();
        Linear::new(&mut other, "a", 3, 4, true, &mut ChaCha8Rng::seed_from_u64(9));
        other.load(dir.path()).unwrap();
        for id in ps.ids() {
            assert_eq!(ps.get(id), other.get(id));
        }
        let mut wrong = ParamSet::new();
        Linear::new(&mut wrong, "b", 3, 4, true, &mut rng);
        assert!(wrong.load(dir.path()).is_err());
    }
}
