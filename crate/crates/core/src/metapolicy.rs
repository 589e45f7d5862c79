//! Offline meta-policy learning: SAC with a behavior-cloning term, conditioned
//! on embeddings from the frozen encoder.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::OfflineDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::sac::{SacAgent, SacBatch, SacConfig, SacNoise};
use crate::taskrep::{ContextEncoder, WindowSource};

/// The meta-policy is a SAC agent whose condition input is `z`.
pub type MetaPolicy = SacAgent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaPolicyConfig {
    pub sac: SacConfig,
    pub steps: usize,
    /// Encoded windows per task available for conditioning.
    pub bank_per_task: usize,
    pub window: usize,
}

impl Default for MetaPolicyConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig {
                hidden: vec![64, 64],
                batch_size: 128,
                bc_weight: 2.5,
                normalize_q: true,
                ..SacConfig::default()
            },
            steps: 5000,
            bank_per_task: 256,
            window: 32,
        }
    }
}

impl MetaPolicyConfig {
    pub fn paper() -> Self {
        Self { sac: SacConfig { bc_weight: 2.5, normalize_q: true, ..SacConfig::default() }, steps: 100_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sac.batch_size == 0 || self.bank_per_task == 0 || self.window == 0 {
            return Err(Error::config("meta-policy batch, bank and window sizes must be positive"));
        }
        if !(self.sac.bc_weight >= 0.0) {
            return Err(Error::config("bc_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Per-task embeddings of windows drawn from each train split.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub per_task: Vec<Array2<f64>>,
}

impl EmbeddingBank {
    pub fn build(datasets: &[OfflineDataset], encoder: &dyn ContextEncoder, per_task: usize, window: usize, rng: &mut Rng) -> Result<Self> {
        let per_task = datasets
            .iter()
            .map(|d| {
                let src = WindowSource::from_transitions(d.train());
                encoder.encode_batch(&src.sample_full(per_task, window, rng)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_task })
    }

    pub fn z_dim(&self) -> usize {
        self.per_task.first().map_or(0, |z| z.ncols())
    }

    /// Mean embedding of each task.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.per_task
            .iter()
            .map(|z| z.mean_axis(ndarray::Axis(0)).expect("non-empty bank").to_vec())
            .collect()
    }
}

/// Flattened train split of one task.
struct TaskArrays {
    obs: Array2<f64>,
    action: Array2<f64>,
    reward: Vec<f64>,
    next_obs: Array2<f64>,
}

impl TaskArrays {
    fn new(d: &OfflineDataset) -> Self {
        let ts: Vec<_> = d.train().collect();
        let od = ts[0].state.len();
        let ad = ts[0].action.len();
        let obs = Array2::from_shape_fn((ts.len(), od), |(i, j)| ts[i].state[j]);
        let action = Array2::from_shape_fn((ts.len(), ad), |(i, j)| ts[i].action[j]);
        let next_obs = Array2::from_shape_fn((ts.len(), od), |(i, j)| ts[i].next_state[j]);
        Self { obs, action, reward: ts.iter().map(|t| t.reward).collect(), next_obs }
    }
}

fn sample_batch(tasks: &[TaskArrays], bank: &EmbeddingBank, n: usize, rng: &mut Rng) -> SacBatch {
    let od = tasks[0].obs.ncols();
    let ad = tasks[0].action.ncols();
    let dz = bank.z_dim();
    let mut b = SacBatch {
        obs: Array2::zeros((n, od)),
        cond: Array2::zeros((n, dz)),
        action: Array2::zeros((n, ad)),
        reward: Array2::zeros((n, 1)),
        next_obs: Array2::zeros((n, od)),
        next_cond: Array2::zeros((n, dz)),
        // Horizon cut-offs are time limits, not terminal states.
        not_done: Array2::ones((n, 1)),
    };
    for r in 0..n {
        let k = rng.random_range(0..tasks.len());
        let t = &tasks[k];
        let i = rng.random_range(0..t.reward.len());
        let zb = &bank.per_task[k];
        let z = zb.row(rng.random_range(0..zb.nrows()));
        b.obs.row_mut(r).assign(&t.obs.row(i));
        b.action.row_mut(r).assign(&t.action.row(i));
        b.reward[[r, 0]] = t.reward[i];
        b.next_obs.row_mut(r).assign(&t.next_obs.row(i));
        b.cond.row_mut(r).assign(&z);
        b.next_cond.row_mut(r).assign(&z);
    }
    b
}

/// Trains the meta-policy on the train splits of `datasets`. The encoder is
/// only read, once, to fill the embedding bank.
pub fn train_meta_policy(
    datasets: &[OfflineDataset],
    encoder: &dyn ContextEncoder,
    cfg: &MetaPolicyConfig,
    seed: u64,
) -> Result<MetaPolicy> {
    cfg.validate()?;
    if datasets.is_empty() || datasets.iter().any(|d| d.count(crate::datagen::Split::Train) == 0) {
        return Err(Error::config("meta-policy training needs non-empty train splits"));
    }
    let mut rng = stream(seed, "meta-policy", 0);
    let bank = EmbeddingBank::build(datasets, encoder, cfg.bank_per_task, cfg.window, &mut rng)?;
    let tasks: Vec<TaskArrays> = datasets.iter().map(TaskArrays::new).collect();
    let od = tasks[0].obs.ncols();
    let ad = tasks[0].action.ncols();
    let mut agent = SacAgent::new(od, bank.z_dim(), ad, cfg.sac.clone(), &mut rng);
    for _ in 0..cfg.steps {
        let batch = sample_batch(&tasks, &bank, cfg.sac.batch_size, &mut rng);
        let noise = SacNoise::sample(batch.len(), ad, &mut rng);
        agent.update(&batch, &noise)?;
    }
    Ok(agent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Split, Transition};
    use crate::envsuite::{Family, TaskSpec};
    use crate::taskrep::FnEncoder;
    use std::collections::BTreeMap;

    /// Episodes whose action is a fixed function of the state.
    fn scripted(task_id: u32, gravity: f64, seed: u64) -> OfflineDataset {
        let spec = TaskSpec::new(Family::PointMass2d, gravity, 0.5);
        let mut env = crate::envsuite::make_env(spec).unwrap();
        let mut ts = Vec::new();
        for ep in 0..4 {
            let mut s = env.reset_seeded(seed * 100 + ep);
            for _ in 0..50 {
                let a = vec![(0.8 * s[0]).tanh() * 0.5, -(0.6 * s[1]).tanh() * 0.5];
                let st = env.step(&a).unwrap();
                ts.push(Transition {
                    state: s.clone(),
                    action: a,
                    reward: st.reward,
                    next_state: st.next_observation.clone(),
                    done: false,
                    checkpoint_id: 1,
                    task_id,
                });
                s = st.next_observation;
            }
            ts.last_mut().unwrap().done = true;
        }
        let mut split = BTreeMap::new();
        split.insert(1, Split::Train);
        OfflineDataset { task: spec, task_id, transitions: ts, checkpoint_split: split }
    }

    fn task_encoder() -> FnEncoder<impl Fn(&crate::taskrep::ContextWindow) -> Vec<f64>> {
        FnEncoder { z_dim: 2, f: |w: &crate::taskrep::ContextWindow| {
            let fall: f64 = w.steps.iter().map(|s| s.next_state[3] - s.state[3]).sum::<f64>() / w.steps.len().max(1) as f64;
            vec![fall * 10.0, 1.0]
        } }
    }

    #[test]
    fn strong_cloning_reproduces_dataset_actions() {
        let data = vec![scripted(0, 0.5, 1), scripted(1, 1.5, 2)];
        let cfg = MetaPolicyConfig {
            sac: SacConfig { hidden: vec![32, 32], batch_size: 64, bc_weight: 1e4, normalize_q: true, actor_lr: 1e-3, ..MetaPolicyConfig::default().sac },
            steps: 1500,
            bank_per_task: 16,
            window: 8,
        };
        let enc = task_encoder();
        let policy = train_meta_policy(&data, &enc, &cfg, 0).unwrap();
        let mut rng = stream(0, "bc-eval", 0);
        let bank = EmbeddingBank::build(&data, &enc, 4, 8, &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        for (k, d) in data.iter().enumerate() {
            let z = bank.per_task[k].row(0).to_vec();
            for t in d.train().step_by(7) {
                let a = policy.act(&t.state, &z, true, &mut rng).unwrap();
                for (x, y) in a.iter().zip(&t.action) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        assert!(worst < 0.05, "worst action error {worst}");
    }

    #[test]
    fn actions_are_bounded_and_deterministic() {
        let data = vec![scripted(0, 0.5, 3), scripted(1, 1.5, 4)];
        let cfg = MetaPolicyConfig { sac: SacConfig { hidden: vec![8], batch_size: 16, ..MetaPolicyConfig::default().sac }, steps: 5, bank_per_task: 4, window: 4 };
        let policy = train_meta_policy(&data, &task_encoder(), &cfg, 1).unwrap();
        let mut rng = stream(5, "bounds", 0);
        let s = Array2::from_shape_fn((10_000, 4), |_| rng.random_range(-20.0..20.0));
        let z = Array2::from_shape_fn((10_000, 2), |_| rng.random_range(-10.0..10.0));
        let a = policy.act_batch(&s, &z, false, &mut rng).unwrap();
        assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        let d1 = policy.act_batch(&s, &z, true, &mut rng).unwrap();
        let d2 = policy.act_batch(&s, &z, true, &mut rng).unwrap();
        assert_eq!(d1, d2);
        let mut r1 = stream(9, "x", 0);
        let mut r2 = stream(9, "x", 0);
        assert_eq!(policy.act(&[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0], false, &mut r1).unwrap(), policy.act(&[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0], false, &mut r2).unwrap());
        assert!(policy.act(&[0.1, 0.2, 0.3], &[1.0, 2.0], true, &mut r1).is_err());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let cfg = MetaPolicyConfig::default();
        assert!(train_meta_policy(&[], &task_encoder(), &cfg, 0).is_err());
    }
}
