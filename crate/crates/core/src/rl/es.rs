//! Antithetic evolution strategies with centered-rank fitness shaping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cartpole::{CartPole, CartPoleParams};
use super::sensory::{sensor_relevance, Policy, PolicyState};
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub sigma: f64,
    pub lr: f64,
    /// Episodes averaged per fitness evaluation.
    pub episodes: usize,
    /// Keep the best parameters seen so far and report their fitness.
    pub elitism: bool,
    /// Stop once the elite reaches this fitness.
    pub target_fitness: Option<f64>,
    /// Present observations in a fresh random order every episode.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            pop_size: 64,
            generations: 300,
            sigma: 0.1,
            lr: 0.05,
            episodes: 3,
            elitism: true,
            target_fitness: None,
            shuffle: false,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 2 || !self.pop_size.is_multiple_of(2) {
            return Err(Error::config(format!("pop_size must be even and >= 2, got {}", self.pop_size)));
        }
        if self.episodes == 0 || !(self.sigma >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::config("episodes must be positive, sigma and lr non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    pub generation: usize,
    /// Best fitness in this generation's population.
    pub best: f64,
    pub mean: f64,
    /// Fitness of the kept elite after this generation.
    pub elite: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsResult {
    pub history: Vec<GenRecord>,
    /// Search distribution mean after the last update.
    pub center: Vec<f64>,
    /// Best parameters evaluated, or the center without elitism.
    pub best_params: Vec<f64>,
    pub best_fitness: f64,
}

pub const FITNESS_HEADER: &str = "generation,best,mean,elite";

pub fn fitness_csv(history: &[GenRecord]) -> String {
    let mut s = format!("{FITNESS_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.generation, r.best, r.mean, r.elite);
    }
    s
}

/// Mixes run seed, generation and episode into one episode seed.
pub fn episode_seed(seed: u64, generation: usize, episode: usize) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    for v in [generation as u64, episode as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(29) ^ 0x1319_8A2E_0370_7344;
    }
    h
}

/// Observation order of one episode: identity, or a permutation drawn
/// from the episode seed.
pub fn episode_order(n: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    }
    order
}

/// Total reward of one episode. `on_step` sees each sensory output with the
/// observation order used.
pub fn run_episode(
    policy: &Policy,
    th: &[f64],
    env: &CartPoleParams,
    seed: u64,
    shuffle: bool,
    mut on_step: impl FnMut(&super::sensory::SensoryOutput, &[usize]),
) -> Result<f64> {
    let mut cp = CartPole::new(env.clone(), seed);
    let order = episode_order(super::cartpole::OBS_DIM, shuffle, seed);
    let mut st = PolicyState::default();
    let mut total = 0.0;
    loop {
        let raw = cp.observe();
        let obs: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
        let (a, out) = policy.act(th, &mut st, &obs)?;
        if let Some(out) = out {
            on_step(&out, &order);
        }
        let (r, done) = cp.step(a);
        total += r;
        if done {
            return Ok(total);
        }
    }
}

/// Mean episode reward over `seeds`.
pub fn evaluate(policy: &Policy, th: &[f64], env: &CartPoleParams, seeds: &[u64], shuffle: bool) -> Result<f64> {
    let mut sum = 0.0;
    for &s in seeds {
        sum += run_episode(policy, th, env, s, shuffle, |_, _| {})?;
    }
    Ok(sum / seeds.len().max(1) as f64)
}

/// Centered ranks in `[-0.5, 0.5]`; ties share the average rank.
pub fn centered_ranks(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && f[idx[j + 1]] == f[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg / (n - 1) as f64 - 0.5;
        }
        i = j + 1;
    }
    ranks
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, th: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..th.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            th[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains `policy` from `init` (or a seeded initialization) by ascending the
/// smoothed episode reward.
pub fn train_es(policy: &Policy, env: &CartPoleParams, cfg: &EsConfig, init: Option<Vec<f64>>) -> Result<EsResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut center = init.unwrap_or_else(|| policy.init_params(&mut rng));
    if center.len() != policy.num_params() {
        return Err(Error::shape(format!(
            "{} initial parameters for {}",
            center.len(),
            policy.num_params()
        )));
    }
    let dim = center.len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut adam = Adam {
        m: vec![0.0; dim],
        v: vec![0.0; dim],
        t: 0,
    };
    let half = cfg.pop_size / 2;
    let mut history = Vec::with_capacity(cfg.generations);
    let mut elite = (center.clone(), f64::NEG_INFINITY);
    for generation in 0..cfg.generations {
        let eps: Vec<Vec<f64>> = (0..half).map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect()).collect();
        let seeds: Vec<u64> = (0..cfg.episodes).map(|e| episode_seed(cfg.seed, generation, e)).collect();
        let member = |i: usize| -> Vec<f64> {
            let sign = if i < half { 1.0 } else { -1.0 };
            let e = &eps[i % half];
            center.iter().zip(e).map(|(c, z)| c + sign * cfg.sigma * z).collect()
        };
        let fitness = par::map_range(cfg.pop_size, |i| evaluate(policy, &member(i), env, &seeds, cfg.shuffle))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        let (best_i, &best) = fitness
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty population");
        let mean = fitness.iter().sum::<f64>() / fitness.len() as f64;
        if best > elite.1 {
            elite = (member(best_i), best);
        }
        if cfg.sigma > 0.0 {
            let ranks = centered_ranks(&fitness);
            let mut grad = vec![0.0; dim];
            for (j, e) in eps.iter().enumerate() {
                let w = ranks[j] - ranks[j + half];
                for (g, z) in grad.iter_mut().zip(e) {
                    *g += w * z;
                }
            }
            grad.iter_mut().for_each(|g| *g /= cfg.pop_size as f64 * cfg.sigma);
            adam.step(&mut center, &grad, cfg.lr);
        }
        let reported = if cfg.elitism { elite.1 } else { best };
        history.push(GenRecord {
            generation,
            best,
            mean,
            elite: reported,
        });
        log::debug!("es generation {generation}: best {best} mean {mean:.1} elite {reported}");
        if cfg.target_fitness.is_some_and(|t| elite.1 >= t) {
            break;
        }
    }
    let (best_params, best_fitness) = if cfg.elitism {
        elite
    } else {
        let f = history.last().map_or(f64::NEG_INFINITY, |r| r.best);
        (center.clone(), f)
    };
    Ok(EsResult {
        history,
        center,
        best_params,
        best_fitness,
    })
}

/// Per-episode, per-sensor relevance of the sensory policy, indexed by the
/// original channel regardless of presentation order.
pub fn attention_heatmap(policy: &Policy, th: &[f64], env: &CartPoleParams, seeds: &[u64], shuffle: bool) -> Result<Vec<Vec<f64>>> {
    let n = super::cartpole::OBS_DIM;
    let mut rows = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut acc = vec![0.0; n];
        let mut steps = 0usize;
        run_episode(policy, th, env, s, shuffle, |out, order| {
            let rel = sensor_relevance(out, n);
            for (pos, &ch) in order.iter().enumerate() {
                acc[ch] += rel[pos];
            }
            steps += 1;
        })?;
        if steps == 0 {
            return Err(Error::config("heatmap needs the sensory policy"));
        }
        rows.push(acc.iter().map(|a| a / steps as f64).collect());
    }
    Ok(rows)
}

pub const HEATMAP_HEADER: &str = "episode,sensor,channel,relevance";

pub fn heatmap_csv(rows: &[Vec<f64>]) -> String {
    let mut s = format!("{HEATMAP_HEADER}\n");
    for (e, row) in rows.iter().enumerate() {
        for (i, r) in row.iter().enumerate() {
            let _ = writeln!(s, "{e},{i},{},{r}", super::cartpole::OBS_NAMES[i]);
        }
    }
    s
}
