//! Permutation-invariant control on cart-pole trained with evolution strategies.

pub mod cartpole;
pub mod es;
pub mod sensory;

pub use cartpole::{cartpole_step, CartPole, CartPoleParams, CartPoleState};
pub use es::{attention_heatmap, train_es, EsConfig, EsResult};
pub use sensory::{sensory_message, Policy, PolicyKind, SensoryConfig, SensoryLayer};

use serde::{Deserialize, Serialize};

use crate::Result;

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub policy: PolicyKind,
    pub sensory: SensoryConfig,
    pub es: EsConfig,
    pub env: CartPoleParams,
    /// Held-out episodes used for the final shuffled and unshuffled scores.
    pub eval_episodes: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            policy: PolicyKind::Co4,
            sensory: SensoryConfig::default(),
            es: EsConfig {
                target_fitness: Some(400.0),
                ..EsConfig::default()
            },
            env: CartPoleParams::default(),
            eval_episodes: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RlRun {
    pub policy: PolicyKind,
    pub seed: u64,
    pub result: EsResult,
    /// Mean held-out reward with the fixed observation order.
    pub eval_unshuffled: f64,
    /// Mean held-out reward with a fresh order per episode.
    pub eval_shuffled: f64,
    /// Per-episode relevance rows (sensory policy only).
    pub heatmap: Option<Vec<Vec<f64>>>,
}

impl RlRun {
    pub fn shuffle_drop(&self) -> f64 {
        self.eval_unshuffled - self.eval_shuffled
    }
}

/// Held-out episode seeds, disjoint from the training seeds in practice.
pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| es::episode_seed(seed ^ 0xE7A1, usize::MAX, i)).collect()
}

/// Trains, then scores the elite on held-out episodes in both orders.
pub fn run_rl(cfg: &RlConfig) -> Result<RlRun> {
    let policy = Policy::new(cfg.policy, cfg.sensory.clone())?;
    let result = train_es(&policy, &cfg.env, &cfg.es, None)?;
    let seeds = eval_seeds(cfg.es.seed, cfg.eval_episodes);
    let th = &result.best_params;
    let eval_unshuffled = es::evaluate(&policy, th, &cfg.env, &seeds, false)?;
    let eval_shuffled = es::evaluate(&policy, th, &cfg.env, &seeds, true)?;
    let heatmap = match cfg.policy {
        PolicyKind::Co4 => Some(attention_heatmap(&policy, th, &cfg.env, &seeds, false)?),
        PolicyKind::Baseline => None,
    };
    Ok(RlRun {
        policy: cfg.policy,
        seed: cfg.es.seed,
        result,
        eval_unshuffled,
        eval_shuffled,
        heatmap,
    })
}
