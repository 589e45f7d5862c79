//! The adversarial policy: a soft actor-critic agent acting inside the
//! learned ensembles, rewarded for degrading the representation while
//! staying in low-uncertainty, high-reward regions.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dynamics::{branch_rollout, DynamicsEnsemble, ModelRollout};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sac::{ReplayBuffer, SacAgent, SacConfig, SacNoise, UpdateStats};
use crate::taskrep::{adversarial_rewards, AdvSign, ContextEncoder, ContextWindow, RewardPool};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardComposition {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Reward increases of `R` instead of decreases.
    pub sign_flip_adv: bool,
}

impl Default for RewardComposition {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, sign_flip_adv: false }
    }
}

impl RewardComposition {
    pub fn sign(&self) -> AdvSign {
        if self.sign_flip_adv { AdvSign::Increase } else { AdvSign::Decrease }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1 and lambda2 must be non-negative"));
        }
        Ok(())
    }
}

/// `r_adv - lambda1 * u + lambda2 * r_hat`.
pub fn compose_reward(r_adv: f64, u: f64, r_hat: f64, cfg: &RewardComposition) -> f64 {
    r_adv - cfg.lambda1 * u + cfg.lambda2 * r_hat
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub horizon: usize,
    /// Branch rollouts per task ensemble per round.
    pub rollouts_per_task: usize,
    /// SAC updates per round.
    pub policy_steps: usize,
    pub sac: SacConfig,
    pub reward: RewardComposition,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            rollouts_per_task: 64,
            policy_steps: 50,
            sac: SacConfig { hidden: vec![64, 64], batch_size: 128, ..SacConfig::default() },
            reward: RewardComposition::default(),
        }
    }
}

impl AdversarialConfig {
    pub fn paper() -> Self {
        Self { rollouts_per_task: 2000, policy_steps: 1000, sac: SacConfig::default(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("rollout horizon h must be at least 1"));
        }
        if self.rollouts_per_task < 2 {
            return Err(Error::config("adversarial rounds need at least 2 rollouts per task"));
        }
        if self.sac.batch_size == 0 {
            return Err(Error::config("adversarial SAC batch size must be positive"));
        }
        self.reward.validate()
    }
}

/// Who picks actions inside the models.
#[derive(Clone, Debug)]
pub enum RolloutPolicy {
    Adversarial(Box<SacAgent>),
    /// Uniform actions on `[-1, 1]^act_dim`.
    Uniform { act_dim: usize },
}

impl RolloutPolicy {
    pub fn adversarial(obs_dim: usize, act_dim: usize, cfg: &AdversarialConfig, rng: &mut Rng) -> Self {
        Self::Adversarial(Box::new(SacAgent::new(obs_dim, 0, act_dim, cfg.sac.clone(), rng)))
    }

    pub fn actions(&self, states: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        match self {
            Self::Adversarial(agent) => {
                let cond = Array2::zeros((states.nrows(), 0));
                agent.act_batch(states, &cond, false, rng)
            }
            Self::Uniform { act_dim } => {
                Ok(Array2::from_shape_fn((states.nrows(), *act_dim), |_| rng.random_range(-1.0..=1.0)))
            }
        }
    }
}

/// One round's model rollouts with per-step adversarial and composed rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialData {
    pub rollouts: Vec<ModelRollout>,
    pub r_adv: Vec<Vec<f64>>,
    pub reward: Vec<Vec<f64>>,
}

impl AdversarialData {
    pub fn num_steps(&self) -> usize {
        self.rollouts.iter().map(|r| r.steps.len()).sum()
    }

    pub fn task_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.rollouts.iter().map(|r| r.task_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn mean_uncertainty(&self) -> f64 {
        let n = self.num_steps().max(1) as f64;
        self.rollouts.iter().flat_map(|r| r.steps.iter().map(|s| s.uncertainty)).sum::<f64>() / n
    }

    /// `per_task` random rollout prefixes (lengths `1..=h`) for every task,
    /// in ascending task-id order.
    pub fn encoder_windows(&self, per_task: usize, rng: &mut Rng) -> Vec<Vec<ContextWindow>> {
        self.task_ids()
            .into_iter()
            .map(|id| {
                let own: Vec<&ModelRollout> = self.rollouts.iter().filter(|r| r.task_id == id).collect();
                (0..per_task)
                    .map(|_| {
                        let r = own[rng.random_range(0..own.len())];
                        ContextWindow::rollout_prefix(r, rng.random_range(1..=r.steps.len()))
                    })
                    .collect()
            })
            .collect()
    }

    fn replay(&self) -> Result<ReplayBuffer> {
        let first = self
            .rollouts
            .iter()
            .find_map(|r| r.steps.first())
            .ok_or_else(|| Error::usage("adversarial update needs non-empty data"))?;
        let mut buf = ReplayBuffer::new(self.num_steps(), first.state.len(), first.action.len());
        for (r, rewards) in self.rollouts.iter().zip(&self.reward) {
            for (s, &rw) in r.steps.iter().zip(rewards) {
                buf.push(&s.state, &s.action, rw, &s.next_state, false);
            }
        }
        Ok(buf)
    }
}

/// Rolls the policy through every ensemble and scores each step. The
/// positives and contrast pool of a rollout are the full-rollout embeddings
/// of the other rollouts in this round, frozen before any reward is computed.
pub fn collect_adversarial_data(
    policy: &RolloutPolicy,
    ensembles: &[DynamicsEnsemble],
    encoder: &dyn ContextEncoder,
    start_states: &[Vec<f64>],
    cfg: &AdversarialConfig,
    temperature: f64,
    rng: &mut Rng,
) -> Result<AdversarialData> {
    cfg.validate()?;
    if ensembles.len() < 2 {
        return Err(Error::config("adversarial data needs at least 2 task ensembles"));
    }
    // The policy draws from its own stream so that swapping policies does
    // not shift the model-sampling noise.
    let mut policy_rng = Rng::seed_from_u64(rng.random());
    let mut act = |s: &Array2<f64>| policy.actions(s, &mut policy_rng);
    let rollouts = branch_rollout(ensembles, &mut act, start_states, cfg.horizon, cfg.rollouts_per_task, rng)?;
    let h = cfg.horizon;
    let windows: Vec<ContextWindow> =
        rollouts.iter().flat_map(|r| (0..=h).map(move |t| ContextWindow::rollout_prefix(r, t))).collect();
    let z = encoder.encode_batch(&windows)?;
    let prefix: Vec<Vec<Vec<f64>>> =
        (0..rollouts.len()).map(|j| (0..=h).map(|t| z.row(j * (h + 1) + t).to_vec()).collect()).collect();
    let finals: Vec<&Vec<f64>> = prefix.iter().map(|p| &p[h]).collect();

    let mut r_adv = Vec::with_capacity(rollouts.len());
    let mut reward = Vec::with_capacity(rollouts.len());
    for (j, r) in rollouts.iter().enumerate() {
        let positives: Vec<Vec<f64>> = (0..rollouts.len())
            .filter(|&k| k != j && rollouts[k].task_id == r.task_id)
            .map(|k| finals[k].clone())
            .collect();
        let pool: Vec<Vec<f64>> = (0..rollouts.len()).filter(|&k| k != j).map(|k| finals[k].clone()).collect();
        let frozen = RewardPool { positives: &positives, pool: &pool, temperature };
        let adv = adversarial_rewards(&prefix[j], &frozen, cfg.reward.sign())?;
        let composed = r
            .steps
            .iter()
            .zip(&adv)
            .map(|(s, &a)| compose_reward(a, s.uncertainty, s.reward, &cfg.reward))
            .collect();
        r_adv.push(adv);
        reward.push(composed);
    }
    Ok(AdversarialData { rollouts, r_adv, reward })
}

/// `steps` SAC updates on minibatches drawn from one round's data.
pub fn train_adversarial_step(agent: &mut SacAgent, data: &AdversarialData, steps: usize, rng: &mut Rng) -> Result<UpdateStats> {
    let buf = data.replay()?;
    let mut last = UpdateStats::default();
    for _ in 0..steps {
        let batch = buf.sample(agent.config.batch_size, rng);
        let noise = SacNoise::sample(batch.len(), agent.act_dim, rng);
        last = agent.update(&batch, &noise)?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_arithmetic() {
        let cfg = RewardComposition::default();
        assert!((compose_reward(0.2, 0.5, -1.0, &cfg) + 1.3).abs() < 1e-12);
        let off = RewardComposition { lambda1: 0.0, lambda2: 0.0, ..cfg };
        assert_eq!(compose_reward(0.37, 9.0, -4.0, &off), 0.37);
    }

    #[test]
    fn composition_is_linear_in_adversarial_term() {
        let cfg = RewardComposition { lambda1: 0.7, lambda2: 1.3, sign_flip_adv: false };
        for (a, b, u, r) in [(0.5, -0.25, 0.125, -2.0), (1.0, 2.0, 0.0, 0.5)] {
            assert_eq!(compose_reward(a + b, u, r, &cfg), compose_reward(a, u, r, &cfg) + b);
        }
    }

    #[test]
    fn negative_weights_are_rejected() {
        let cfg = AdversarialConfig { reward: RewardComposition { lambda1: -1.0, ..RewardComposition::default() }, ..AdversarialConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AdversarialConfig { rollouts_per_task: 1, ..AdversarialConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
