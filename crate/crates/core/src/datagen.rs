//! Behavior-policy training, checkpoint selection and offline dataset
//! assembly, plus the on-disk dataset format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envsuite::{make_env, Environment, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::sac::{GaussianActor, ReplayBuffer, SacAgent, SacConfig, SacNoise};

pub const SCHEMA_VERSION: u32 = 1;
pub const EVAL_EPISODES: usize = 10;

/// The 1-based checkpoint indices used for 50 checkpoints.
pub fn index_pattern(n: usize) -> Result<&'static [usize]> {
    match n {
        1 => Ok(&[25]),
        3 => Ok(&[5, 25, 45]),
        5 => Ok(&[5, 10, 25, 40, 45]),
        _ => Err(Error::config(format!("checkpoint count must be 1, 3 or 5, got {n}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub checkpoint_id: u32,
    pub task_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub checkpoint_id: u32,
    pub policy: GaussianActor,
    pub eval_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub task: TaskSpec,
    pub task_id: u32,
    pub transitions: Vec<Transition>,
    pub checkpoint_split: BTreeMap<u32, Split>,
}

impl OfflineDataset {
    pub fn split_of(&self, t: &Transition) -> Option<Split> {
        self.checkpoint_split.get(&t.checkpoint_id).copied()
    }

    pub fn train(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(|t| self.split_of(t) == Some(Split::Train))
    }

    pub fn test(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(|t| self.split_of(t) == Some(Split::Test))
    }

    pub fn count(&self, split: Split) -> usize {
        self.transitions.iter().filter(|t| self.split_of(t) == Some(split)).count()
    }

    pub fn checkpoint_ids(&self, split: Split) -> Vec<u32> {
        self.checkpoint_split.iter().filter(|(_, s)| **s == split).map(|(id, _)| *id).collect()
    }

    /// Copy holding only the transitions of one split.
    pub fn subset(&self, split: Split) -> OfflineDataset {
        OfflineDataset {
            task: self.task,
            task_id: self.task_id,
            transitions: self.transitions.iter().filter(|t| self.split_of(t) == Some(split)).cloned().collect(),
            checkpoint_split: self.checkpoint_split.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub sac: SacConfig,
    pub total_steps: usize,
    pub checkpoint_interval: usize,
    /// Uniform-random steps before learning starts.
    pub warmup_steps: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig { hidden: vec![64, 64], batch_size: 64, ..SacConfig::default() },
            total_steps: 20_000,
            checkpoint_interval: 1_000,
            warmup_steps: 1_000,
        }
    }
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    let cols = v.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((v.len(), cols), |(i, j)| v[i][j])
}

/// Mean undiscounted return of the deterministic policy over
/// [`EVAL_EPISODES`] seeded episodes.
pub fn evaluate_policy(spec: &TaskSpec, policy: &GaussianActor, seed: u64) -> Result<f64> {
    let mut envs: Vec<Environment> = Vec::with_capacity(EVAL_EPISODES);
    let mut obs = Vec::with_capacity(EVAL_EPISODES);
    for k in 0..EVAL_EPISODES {
        let mut env = make_env(*spec)?;
        obs.push(env.reset_seeded(derive_seed(seed, "behavior-eval", k as u64)));
        envs.push(env);
    }
    let mut rng = stream(seed, "behavior-eval-actions", 0);
    let cond = Array2::zeros((EVAL_EPISODES, 0));
    let mut total = 0.0;
    while !envs[0].is_done() {
        let actions = policy.act_batch(&rows(&obs), &cond, true, &mut rng)?;
        for (k, env) in envs.iter_mut().enumerate() {
            let step = env.step(&actions.row(k).to_vec())?;
            total += step.reward;
            obs[k] = step.next_observation;
        }
    }
    Ok(total / EVAL_EPISODES as f64)
}

/// Trains a soft actor-critic learner online and snapshots it every
/// `checkpoint_interval` steps.
pub fn train_behavior_policy(spec: &TaskSpec, config: &BehaviorConfig, seed: u64) -> Result<Vec<CheckpointRecord>> {
    if config.checkpoint_interval == 0 {
        return Err(Error::config("checkpoint_interval must be positive"));
    }
    if config.checkpoint_interval > config.total_steps {
        return Err(Error::config(format!(
            "checkpoint_interval {} exceeds total_steps {}",
            config.checkpoint_interval, config.total_steps
        )));
    }
    let (od, ad) = (spec.obs_dim(), spec.act_dim());
    let mut init_rng = stream(seed, "behavior-init", 0);
    let mut agent = SacAgent::new(od, 0, ad, config.sac.clone(), &mut init_rng);
    let mut buffer = ReplayBuffer::new(config.total_steps.max(1), od, ad);
    let mut env = make_env(*spec)?;
    let mut act_rng = stream(seed, "behavior-act", 0);
    let mut batch_rng = stream(seed, "behavior-batch", 0);
    let mut episode = 0u64;
    let mut obs = env.reset_seeded(derive_seed(seed, "behavior-episode", episode));
    let mut records = Vec::new();
    let cond = [0.0; 0];

    for step in 1..=config.total_steps {
        let action: Vec<f64> = if step <= config.warmup_steps {
            (0..ad).map(|_| act_rng.random_range(-1.0..=1.0)).collect()
        } else {
            agent.act(&obs, &cond, false, &mut act_rng)?
        };
        let result = env.step(&action)?;
        // Episodes end only by time limit, so no transition is terminal.
        buffer.push(&obs, &action, result.reward, &result.next_observation, false);
        obs = result.next_observation;
        if result.done {
            episode += 1;
            obs = env.reset_seeded(derive_seed(seed, "behavior-episode", episode));
        }
        if step > config.warmup_steps && buffer.len() >= config.sac.batch_size {
            let batch = buffer.sample(config.sac.batch_size, &mut batch_rng);
            let noise = SacNoise::sample(batch.len(), ad, &mut batch_rng);
            agent.update(&batch, &noise).map_err(|e| match e {
                Error::Divergence { context, detail } => Error::Divergence {
                    context: format!("behavior policy for {} at step {step}: {context}", spec.label()),
                    detail,
                },
                other => other,
            })?;
        }
        if step % config.checkpoint_interval == 0 {
            let id = (step / config.checkpoint_interval) as u32;
            let policy = agent.policy();
            let eval_return = evaluate_policy(spec, &policy, derive_seed(seed, "checkpoint-eval", id as u64))?;
            records.push(CheckpointRecord { checkpoint_id: id, policy, eval_return });
        }
    }
    Ok(records)
}

/// Picks checkpoints by the fixed index pattern, rescaled to `records.len()`.
pub fn select_checkpoints(records: &[CheckpointRecord], n: usize) -> Result<Vec<CheckpointRecord>> {
    let pattern = index_pattern(n)?;
    let total = records.len();
    let indices: Vec<usize> =
        pattern.iter().map(|&i| ((i * total) as f64 / 50.0).round().max(1.0) as usize).collect();
    if indices.windows(2).any(|w| w[0] == w[1]) || indices.iter().any(|&i| i > total) {
        return Err(Error::config(format!("{total} checkpoints are too few to select {n} distinct ones")));
    }
    Ok(indices.iter().map(|&i| records[i - 1].clone()).collect())
}

/// Checkpoint whose return is closest to `min + quality * (max - min)` over
/// `records`; ties go to the earlier checkpoint.
pub fn select_by_return(records: &[CheckpointRecord], quality: f64) -> Result<CheckpointRecord> {
    if records.is_empty() {
        return Err(Error::config("no checkpoints to select from"));
    }
    let lo = records.iter().map(|r| r.eval_return).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.eval_return).fold(f64::NEG_INFINITY, f64::max);
    let target = lo + quality.clamp(0.0, 1.0) * (hi - lo);
    let mut best = &records[0];
    for r in records {
        if (r.eval_return - target).abs() < (best.eval_return - target).abs() {
            best = r;
        }
    }
    Ok(best.clone())
}

/// Checkpoints not in `selected`, in training order.
pub fn remaining_checkpoints(records: &[CheckpointRecord], selected: &[CheckpointRecord]) -> Vec<CheckpointRecord> {
    records
        .iter()
        .filter(|r| selected.iter().all(|s| s.checkpoint_id != r.checkpoint_id))
        .cloned()
        .collect()
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Rolls `policy` with stochastic actions until `count` transitions exist.
/// Values are stored at `f32` precision so the on-disk form is exact.
fn rollout_checkpoint(
    spec: &TaskSpec,
    task_id: u32,
    record: &CheckpointRecord,
    count: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(count);
    let mut env = make_env(*spec)?;
    let mut rng = stream(seed, label, record.checkpoint_id as u64);
    let mut episode = 0u64;
    while out.len() < count {
        let reset_seed = derive_seed(seed, label, ((record.checkpoint_id as u64) << 32) | episode);
        let mut obs = env.reset_seeded(reset_seed);
        episode += 1;
        while !env.is_done() && out.len() < count {
            let action = record.policy.act(&obs, &[], false, &mut rng)?;
            let step = env.step(&action)?;
            let done = step.done || out.len() + 1 == count;
            out.push(Transition {
                state: obs.iter().map(|&x| f32_round(x)).collect(),
                action: action.iter().map(|&x| f32_round(x)).collect(),
                reward: f32_round(step.reward),
                next_state: step.next_observation.iter().map(|&x| f32_round(x)).collect(),
                done,
                checkpoint_id: record.checkpoint_id,
                task_id,
            });
            obs = step.next_observation;
        }
    }
    Ok(out)
}

/// Splits `total` as evenly as possible over `k` parts, earlier parts first.
fn even_split(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

/// Train data from the selected checkpoints plus a test pool of
/// `test_pool_size` transitions spread evenly over `test_sources`.
pub fn collect_dataset(
    spec: &TaskSpec,
    task_id: u32,
    selected: &[CheckpointRecord],
    test_sources: &[CheckpointRecord],
    budget: usize,
    test_pool_size: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if selected.is_empty() {
        return Err(Error::config("collect_dataset needs at least one selected checkpoint"));
    }
    if budget % selected.len() != 0 {
        return Err(Error::config(format!(
            "budget {budget} is not divisible by {} selected checkpoints",
            selected.len()
        )));
    }
    if test_sources.iter().any(|t| selected.iter().any(|s| s.checkpoint_id == t.checkpoint_id)) {
        return Err(Error::config("a test checkpoint is also selected for training"));
    }
    let mut dataset = collect_test_pool(spec, task_id, test_sources, test_pool_size, seed)?;
    let mut train = Vec::with_capacity(budget);
    for record in selected {
        dataset.checkpoint_split.insert(record.checkpoint_id, Split::Train);
        train.extend(rollout_checkpoint(spec, task_id, record, budget / selected.len(), seed, "collect-train")?);
    }
    train.append(&mut dataset.transitions);
    dataset.transitions = train;
    Ok(dataset)
}

/// A dataset holding only test-split data, as used for unseen tasks.
pub fn collect_test_pool(
    spec: &TaskSpec,
    task_id: u32,
    sources: &[CheckpointRecord],
    size: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let mut transitions = Vec::with_capacity(size);
    let mut checkpoint_split = BTreeMap::new();
    if size > 0 && sources.is_empty() {
        return Err(Error::config("a non-empty test pool needs at least one source checkpoint"));
    }
    for (record, n) in sources.iter().zip(even_split(size, sources.len().max(1))) {
        checkpoint_split.insert(record.checkpoint_id, Split::Test);
        if n > 0 {
            transitions.extend(rollout_checkpoint(spec, task_id, record, n, seed, "collect-test")?);
        }
    }
    Ok(OfflineDataset { task: *spec, task_id, transitions, checkpoint_split })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    schema_version: u32,
    task: TaskSpec,
    task_id: u32,
    obs_dim: usize,
    act_dim: usize,
    num_transitions: usize,
    num_train: usize,
    num_test: usize,
    checkpoint_split: BTreeMap<u32, Split>,
}

fn record_bytes(obs_dim: usize, act_dim: usize) -> usize {
    4 * (2 * obs_dim + act_dim + 1) + 1 + 4
}

pub fn save_dataset(dataset: &OfflineDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (od, ad) = (dataset.task.obs_dim(), dataset.task.act_dim());
    let mut w = BufWriter::new(File::create(dir.join("transitions.bin"))?);
    for (i, t) in dataset.transitions.iter().enumerate() {
        if t.state.len() != od || t.next_state.len() != od || t.action.len() != ad {
            return Err(Error::usage(format!("transition {i} does not match the task dimensions")));
        }
        let floats = t.state.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_state);
        for &x in floats {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(t.done)])?;
        w.write_all(&t.checkpoint_id.to_le_bytes())?;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        task: dataset.task,
        task_id: dataset.task_id,
        obs_dim: od,
        act_dim: ad,
        num_transitions: dataset.transitions.len(),
        num_train: dataset.count(Split::Train),
        num_test: dataset.count(Split::Test),
        checkpoint_split: dataset.checkpoint_split.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<OfflineDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, format!("corrupt manifest: {e}")))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::load(&manifest_path, format!("unsupported schema version {}", m.schema_version)));
    }
    m.task.validate().map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    if m.obs_dim != m.task.obs_dim() || m.act_dim != m.task.act_dim() {
        return Err(Error::load(&manifest_path, "dimensions disagree with the task family"));
    }

    let data_path = dir.join("transitions.bin");
    let mut bytes = Vec::new();
    BufReader::new(File::open(&data_path).map_err(|e| Error::load(&data_path, e.to_string()))?)
        .read_to_end(&mut bytes)?;
    let rec = record_bytes(m.obs_dim, m.act_dim);
    let complete = bytes.len() / rec;
    if bytes.len() % rec != 0 {
        return Err(Error::load(&data_path, format!("record {complete} is truncated")));
    }
    if complete != m.num_transitions {
        return Err(Error::load(
            &data_path,
            format!("manifest lists {} transitions, file holds {complete}", m.num_transitions),
        ));
    }

    let mut transitions = Vec::with_capacity(complete);
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let float = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let (od, ad) = (m.obs_dim, m.act_dim);
        let state: Vec<f64> = (0..od).map(float).collect();
        let action: Vec<f64> = (od..od + ad).map(float).collect();
        let reward = float(od + ad);
        let next_state: Vec<f64> = (od + ad + 1..2 * od + ad + 1).map(float).collect();
        let tail = 4 * (2 * od + ad + 1);
        let done = match chunk[tail] {
            0 => false,
            1 => true,
            b => return Err(Error::load(&data_path, format!("record {i}: invalid done byte {b}"))),
        };
        let checkpoint_id = u32::from_le_bytes(chunk[tail + 1..tail + 5].try_into().expect("4 bytes"));
        if !state.iter().chain(&action).chain(&next_state).all(|x| x.is_finite()) || !reward.is_finite() {
            return Err(Error::load(&data_path, format!("record {i}: non-finite value")));
        }
        if !m.checkpoint_split.contains_key(&checkpoint_id) {
            return Err(Error::load(&data_path, format!("record {i}: checkpoint {checkpoint_id} missing from split")));
        }
        transitions.push(Transition { state, action, reward, next_state, done, checkpoint_id, task_id: m.task_id });
    }
    let dataset = OfflineDataset { task: m.task, task_id: m.task_id, transitions, checkpoint_split: m.checkpoint_split };
    if dataset.count(Split::Train) != m.num_train || dataset.count(Split::Test) != m.num_test {
        return Err(Error::load(&manifest_path, "train/test counts disagree with the records"));
    }
    Ok(dataset)
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    obs_dim: usize,
    act_dim: usize,
    hidden: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    checkpoints: Vec<(u32, f64)>,
}

/// Stores checkpoint policies as parameter blobs plus an index file.
pub fn save_checkpoints(records: &[CheckpointRecord], hidden: &[usize], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let first = records.first().ok_or_else(|| Error::usage("no checkpoints to save"))?;
    let index = CheckpointIndex {
        obs_dim: first.policy.obs_dim,
        act_dim: first.policy.act_dim,
        hidden: hidden.to_vec(),
        shapes: first.policy.params.shapes(),
        checkpoints: records.iter().map(|r| (r.checkpoint_id, r.eval_return)).collect(),
    };
    for r in records {
        r.policy.params.write_blob(&dir.join(format!("ckpt-{:04}.bin", r.checkpoint_id)))?;
    }
    std::fs::write(dir.join("checkpoints.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoints(dir: &Path) -> Result<Vec<CheckpointRecord>> {
    let path = dir.join("checkpoints.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
    if index.checkpoints.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::load(&path, "checkpoint ids are not strictly increasing"));
    }
    index
        .checkpoints
        .iter()
        .map(|&(id, eval_return)| {
            let blob = dir.join(format!("ckpt-{id:04}.bin"));
            let params = redaug_nn::ParamSet::read_blob(&blob, &index.shapes)?;
            let policy = GaussianActor::from_params(index.obs_dim, 0, index.act_dim, &index.hidden, params)?;
            Ok(CheckpointRecord { checkpoint_id: id, policy, eval_return })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsuite::Family;

    fn fake_records(n: usize, spec: &TaskSpec) -> Vec<CheckpointRecord> {
        let mut rng = stream(1, "fake", 0);
        (1..=n)
            .map(|i| {
                let agent = SacAgent::new(
                    spec.obs_dim(),
                    0,
                    spec.act_dim(),
                    SacConfig { hidden: vec![8], ..SacConfig::default() },
                    &mut rng,
                );
                CheckpointRecord { checkpoint_id: i as u32, policy: agent.policy(), eval_return: i as f64 }
            })
            .collect()
    }

    fn ids(v: &[CheckpointRecord]) -> Vec<u32> {
        v.iter().map(|r| r.checkpoint_id).collect()
    }

    #[test]
    fn selection_follows_the_index_pattern() {
        let spec = TaskSpec::new(Family::PointMass2d, 1.0, 1.0);
        let fifty = fake_records(50, &spec);
        assert_eq!(ids(&select_checkpoints(&fifty, 1).unwrap()), vec![25]);
        assert_eq!(ids(&select_checkpoints(&fifty, 3).unwrap()), vec![5, 25, 45]);
        assert_eq!(ids(&select_checkpoints(&fifty, 5).unwrap()), vec![5, 10, 25, 40, 45]);
        let twenty = fake_records(20, &spec);
        // round(5*20/50) = 2, round(25*20/50) = 10, round(45*20/50) = 18
        assert_eq!(ids(&select_checkpoints(&twenty, 3).unwrap()), vec![2, 10, 18]);
        assert!(matches!(select_checkpoints(&twenty, 2), Err(Error::Config(_))));
        assert!(select_checkpoints(&twenty[..3], 5).is_err());
    }

    #[test]
    fn select_by_return_targets_a_quality_level() {
        let spec = TaskSpec::new(Family::Pendulum, 1.0, 1.0);
        let recs = fake_records(11, &spec);
        assert_eq!(select_by_return(&recs, 1.0).unwrap().checkpoint_id, 11);
        assert_eq!(select_by_return(&recs, 0.5).unwrap().checkpoint_id, 6);
        assert_eq!(select_by_return(&recs, 0.0).unwrap().checkpoint_id, 1);
    }

    #[test]
    fn even_split_sums_to_total() {
        assert_eq!(even_split(10, 3), vec![4, 3, 3]);
        assert_eq!(even_split(2, 4), vec![1, 1, 0, 0]);
    }

    fn small_dataset() -> OfflineDataset {
        let spec = TaskSpec::new(Family::PointMass2d, 1.5, 1.0);
        let recs = fake_records(20, &spec);
        let sel = select_checkpoints(&recs, 3).unwrap();
        let rest = remaining_checkpoints(&recs, &sel);
        collect_dataset(&spec, 2, &sel, &rest, 300, 60, 5).unwrap()
    }

    #[test]
    fn collected_dataset_respects_budget_and_split() {
        let d = small_dataset();
        assert_eq!(d.count(Split::Train), 300);
        assert_eq!(d.count(Split::Test), 60);
        assert!(d.train().all(|t| [2, 10, 18].contains(&t.checkpoint_id)));
        for id in [2u32, 10, 18] {
            assert_eq!(d.train().filter(|t| t.checkpoint_id == id).count(), 100);
        }
        let train = d.checkpoint_ids(Split::Train);
        assert!(d.checkpoint_ids(Split::Test).iter().all(|id| !train.contains(id)));
        assert!(d.transitions.iter().all(|t| d.checkpoint_split.contains_key(&t.checkpoint_id)));
        assert!(d.transitions.iter().all(|t| t.task_id == 2));
    }

    #[test]
    fn collection_is_deterministic_and_validates_input() {
        assert_eq!(small_dataset(), small_dataset());
        let spec = TaskSpec::new(Family::PointMass2d, 1.0, 1.0);
        let recs = fake_records(3, &spec);
        assert!(matches!(collect_dataset(&spec, 0, &[], &recs, 10, 0, 1), Err(Error::Config(_))));
        assert!(matches!(collect_dataset(&spec, 0, &recs[..2], &recs[2..], 11, 0, 1), Err(Error::Config(_))));
        assert!(collect_dataset(&spec, 0, &recs[..2], &recs[1..], 10, 2, 1).is_err());
    }

    #[test]
    fn single_checkpoint_data_shares_one_id() {
        let spec = TaskSpec::new(Family::Pendulum, 1.0, 1.0);
        let recs = fake_records(20, &spec);
        let sel = select_checkpoints(&recs, 1).unwrap();
        let d = collect_dataset(&spec, 0, &sel, &remaining_checkpoints(&recs, &sel), 250, 50, 3).unwrap();
        assert!(d.train().all(|t| t.checkpoint_id == 10));
    }

    #[test]
    fn dataset_round_trip_and_integrity() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);

        let bin = dir.path().join("transitions.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("record 359"), "{err}");

        std::fs::write(&bin, &bytes).unwrap();
        let man = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&man).unwrap();
        std::fs::write(&man, text.replace("\"num_transitions\": 360", "\"num_transitions\": 361")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        std::fs::write(&man, "{ not json").unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("corrupt manifest"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = TaskSpec::new(Family::Pendulum, 1.0, 1.0);
        let recs = fake_records(4, &spec);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoints(&recs, &[8], dir.path()).unwrap();
        assert_eq!(load_checkpoints(dir.path()).unwrap(), recs);
    }

    #[test]
    fn interval_validation() {
        let spec = TaskSpec::new(Family::PointMass2d, 1.0, 1.0);
        let mut cfg = BehaviorConfig { total_steps: 300, checkpoint_interval: 0, warmup_steps: 300, ..Default::default() };
        assert!(matches!(train_behavior_policy(&spec, &cfg, 0), Err(Error::Config(_))));
        cfg.checkpoint_interval = 301;
        assert!(matches!(train_behavior_policy(&spec, &cfg, 0), Err(Error::Config(_))));
        // interval == total_steps gives exactly one checkpoint
        cfg.checkpoint_interval = 300;
        let recs = train_behavior_policy(&spec, &cfg, 0).unwrap();
        assert_eq!(recs.len(), 1);
        cfg.checkpoint_interval = 70;
        assert_eq!(train_behavior_policy(&spec, &cfg, 0).unwrap().len(), 4);
    }
}
