//! End-to-end experiment driver.
//!
//! Every stage writes to `output_root/<stage>/<fingerprint>/`, where the
//! fingerprint hashes the stage's resolved inputs including the fingerprints
//! of the stages it reads. A stage directory with a `COMPLETE` marker is
//! reused as is; anything else is rebuilt from scratch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advpolicy::{collect_adversarial_data, train_adversarial_step, AdversarialConfig, RolloutPolicy};
use crate::datagen::{
    collect_dataset, collect_test_pool, load_checkpoints, load_dataset, remaining_checkpoints, save_checkpoints,
    save_dataset, select_by_return, select_checkpoints, train_behavior_policy, BehaviorConfig, CheckpointRecord,
    OfflineDataset, Split,
};
use crate::dynamics::{fit_dynamics, fit_reward, joint_start_states, DynamicsConfig, DynamicsEnsemble};
use crate::envsuite::{Family, TaskSet, TaskSpec, VariedParameter};
use crate::error::{Error, Result};
use crate::evalproto::{
    embedding_svg, encoder_diagnostics, eval_off_policy, eval_on_policy, mean_std, EvalReport, Protocol, RunEval,
    TaskEval,
};
use crate::metapolicy::{train_meta_policy, MetaPolicy, MetaPolicyConfig};
use crate::rng::{derive_seed, stream};
use crate::sac::SacAgent;
use crate::taskrep::{read_embedding_csv, write_embedding_csv, ContextStep, Encoder, EncoderConfig, EncoderTrainer, WindowSource};

pub const SEED_ENV: &str = "REDAUG_SEED";
const COMPLETE: &str = "COMPLETE";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoModel,
    NoAdv,
    NoUp,
    NoTc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoModel, Variant::NoAdv, Variant::NoUp, Variant::NoTc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoModel => "no-model",
            Variant::NoAdv => "no-adv",
            Variant::NoUp => "no-up",
            Variant::NoTc => "no-tc",
        }
    }

    pub fn uses_models(self) -> bool {
        self != Variant::NoModel
    }

    /// The adversarial settings this variant actually runs with.
    pub fn adjust(self, cfg: &AdversarialConfig) -> AdversarialConfig {
        let mut c = cfg.clone();
        match self {
            Variant::NoUp => c.reward.lambda1 = 0.0,
            Variant::NoTc => c.reward.lambda2 = 0.0,
            _ => {}
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (expected full, no-model, no-adv, no-up or no-tc)")))
    }
}

/// How train checkpoints are chosen for each seen task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    /// The fixed index pattern for `n` checkpoints; the rest form the test pool.
    Index { n: usize },
    /// One train and one test checkpoint per task, chosen by relative return.
    Quality { train: Vec<f64>, test: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task_set: TaskSet,
    /// Multipliers of the varied parameter for training tasks.
    pub seen: Vec<f64>,
    /// Multipliers for evaluation-only tasks.
    pub unseen: Vec<f64>,
    pub selection: Selection,
    /// Train transitions per seen task.
    pub budget: usize,
    /// Held-out transitions per task; defaults to a fifth of the budget.
    pub test_pool_size: Option<usize>,
    pub behavior: BehaviorConfig,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task_set: TaskSet::new(Family::PointMass2d, VariedParameter::Gravity),
            seen: crate::envsuite::TRAIN_MULTIPLIERS.to_vec(),
            unseen: crate::envsuite::TEST_MULTIPLIERS.to_vec(),
            selection: Selection::Index { n: 1 },
            budget: 10_000,
            test_pool_size: None,
            behavior: BehaviorConfig::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    fn spec(&self, multiplier: f64, index: u64) -> TaskSpec {
        let (g, d) = match self.task_set.varied {
            VariedParameter::Gravity => (multiplier, 1.0),
            VariedParameter::Damping => (1.0, multiplier),
        };
        TaskSpec {
            family: self.task_set.family,
            gravity_scale: g,
            damping_scale: d,
            episode_horizon: self.task_set.episode_horizon,
            seed: index,
        }
    }

    pub fn seen_specs(&self) -> Vec<TaskSpec> {
        self.seen.iter().enumerate().map(|(i, &m)| self.spec(m, i as u64)).collect()
    }

    pub fn unseen_specs(&self) -> Vec<TaskSpec> {
        let k = self.seen.len() as u64;
        self.unseen.iter().enumerate().map(|(i, &m)| self.spec(m, k + i as u64)).collect()
    }

    pub fn resolved_test_pool(&self) -> usize {
        self.test_pool_size.unwrap_or(self.budget / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.len() < 2 {
            return Err(Error::config("at least 2 seen tasks are required"));
        }
        for spec in self.seen_specs().iter().chain(&self.unseen_specs()) {
            spec.validate()?;
        }
        if self.budget == 0 {
            return Err(Error::config("data budget must be positive"));
        }
        match &self.selection {
            Selection::Index { n } => {
                crate::datagen::index_pattern(*n)?;
                if self.budget % n != 0 {
                    return Err(Error::config(format!("budget {} is not divisible by n = {n}", self.budget)));
                }
            }
            Selection::Quality { train, test } => {
                if train.len() != self.seen.len() || test.len() != self.seen.len() {
                    return Err(Error::config("quality selection needs one train and one test quality per seen task"));
                }
            }
        }
        if self.resolved_test_pool() == 0 {
            return Err(Error::config("test pool size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprConfig {
    /// Outer rounds `K_c`.
    pub rounds: usize,
    /// Encoder gradient steps per round.
    pub encoder_steps: usize,
    /// Context windows per task in each encoder minibatch.
    pub windows_per_task: usize,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self { rounds: 100, encoder_steps: 20, windows_per_task: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per task and protocol.
    pub episodes: usize,
    /// Context windows per dataset for the relative metric.
    pub diag_windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 10, diag_windows: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub dynamics: DynamicsConfig,
    pub encoder: EncoderConfig,
    pub repr: ReprConfig,
    pub adversarial: AdversarialConfig,
    pub meta: MetaPolicyConfig,
    pub eval: EvalConfig,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".to_string(),
            data: DataConfig::default(),
            dynamics: DynamicsConfig::default(),
            encoder: EncoderConfig::default(),
            repr: ReprConfig::default(),
            adversarial: AdversarialConfig::default(),
            meta: MetaPolicyConfig::default(),
            eval: EvalConfig::default(),
            variant: Variant::Full,
            seeds: vec![0, 1, 2, 3, 4],
            output_root: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self::default()
    }

    /// The paper's reported scales where it gives them.
    pub fn paper() -> Self {
        Self {
            name: "paper".to_string(),
            dynamics: DynamicsConfig::paper(),
            repr: ReprConfig { rounds: 1000, encoder_steps: 1000, windows_per_task: 64 },
            adversarial: AdversarialConfig::paper(),
            meta: MetaPolicyConfig::paper(),
            data: DataConfig { budget: 200_000, behavior: BehaviorConfig { total_steps: 500_000, checkpoint_interval: 10_000, ..BehaviorConfig::default() }, ..DataConfig::default() },
            ..Self::default()
        }
    }

    /// Minutes-scale smoke configuration.
    pub fn quick() -> Self {
        let mut c = Self { name: "quick".to_string(), seeds: vec![0], ..Self::default() };
        c.data.behavior.total_steps = 2_000;
        c.data.behavior.checkpoint_interval = 200;
        c.data.behavior.warmup_steps = 500;
        c.data.budget = 2_000;
        c.dynamics.max_epochs = 10;
        c.dynamics.mse_warmup_epochs = 2;
        c.repr = ReprConfig { rounds: 5, encoder_steps: 5, windows_per_task: 8 };
        c.adversarial.rollouts_per_task = 16;
        c.adversarial.policy_steps = 5;
        c.meta.steps = 200;
        c.meta.bank_per_task = 32;
        c.eval = EvalConfig { episodes: 2, diag_windows: 32 };
        c
    }

    /// Two pendulum tasks (gravity 1.0 and 2.0). Task 1 trains on its best
    /// checkpoint and is tested on its worst, whose swinging-at-the-bottom
    /// states resemble task 2's medium-quality train data. The adversary gets
    /// more updates per round than at desk scale.
    pub fn didactic() -> Self {
        let mut c = Self { name: "didactic".to_string(), seeds: vec![0, 1, 2], ..Self::default() };
        c.data.task_set = TaskSet::new(Family::Pendulum, VariedParameter::Gravity);
        c.data.seen = vec![1.0, 2.0];
        c.data.unseen = Vec::new();
        c.data.selection = Selection::Quality { train: vec![1.0, 0.5], test: vec![0.0, 1.0] };
        c.adversarial.policy_steps = 200;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "quick" => Ok(Self::quick()),
            "didactic" => Ok(Self::didactic()),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_json(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    /// Replaces the seed list with a comma-separated `REDAUG_SEED` value.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seeds = v
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|_| Error::config(format!("{SEED_ENV}: `{s}` is not a seed"))))
                .collect::<Result<Vec<_>>>()?;
            self.seeds = seeds;
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// Copies settings that must agree across modules.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.meta.window = c.encoder.window;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.data.behavior.sac.hidden.iter().chain(&self.dynamics.hidden).try_for_each(|&h| {
            if h == 0 { Err(Error::config("hidden layer widths must be positive")) } else { Ok(()) }
        })?;
        if self.data.behavior.checkpoint_interval == 0 || self.data.behavior.checkpoint_interval > self.data.behavior.total_steps {
            return Err(Error::config("behavior checkpoint_interval must be in 1..=total_steps"));
        }
        self.dynamics.validate()?;
        self.encoder.validate()?;
        self.adversarial.validate()?;
        self.meta.validate()?;
        if self.repr.windows_per_task < 2 {
            return Err(Error::config("encoder minibatches need at least 2 windows per task"));
        }
        if self.eval.episodes == 0 || self.eval.diag_windows == 0 {
            return Err(Error::config("evaluation episode and window counts must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        Ok(())
    }
}

/// First 12 hex digits of the SHA-256 of `value`'s JSON form.
pub fn fingerprint(value: &impl Serialize) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json))[..12].to_string())
}

/// Runs `build` into `root/<name>/<fingerprint(key)>` unless that directory
/// is already complete. Returns the directory and the fingerprint.
fn run_stage(
    root: &Path,
    name: &'static str,
    key: &impl Serialize,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<(PathBuf, String)> {
    let fp = fingerprint(key)?;
    let dir = root.join(name).join(&fp);
    if dir.join(COMPLETE).exists() {
        return Ok((dir, fp));
    }
    let wrap = |e: Error| Error::Stage { stage: name, source: Box::new(e) };
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| wrap(e.into()))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| wrap(e.into()))?;
    let key_json = serde_json::to_string_pretty(key).map_err(|e| wrap(e.into()))?;
    std::fs::write(dir.join("stage.json"), key_json).map_err(|e| wrap(e.into()))?;
    build(&dir).map_err(wrap)?;
    std::fs::write(dir.join(COMPLETE), "").map_err(|e| wrap(e.into()))?;
    Ok((dir, fp))
}

fn require_complete(dir: &Path, what: &'static str) -> Result<()> {
    if dir.join(COMPLETE).exists() {
        Ok(())
    } else {
        Err(Error::Stage { stage: what, source: Box::new(Error::usage(format!("{} is missing or incomplete", dir.display()))) })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataTask {
    task_id: u32,
    spec: TaskSpec,
    seen: bool,
    dir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataManifest {
    tasks: Vec<DataTask>,
}

/// Datasets of one data stage: seen tasks carry train and test splits,
/// unseen tasks only test data.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub seen: Vec<OfflineDataset>,
    pub unseen: Vec<OfflineDataset>,
}

impl DataBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        require_complete(dir, "data")?;
        let path = dir.join("data.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        let m: DataManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
        let mut out = Self { seen: Vec::new(), unseen: Vec::new() };
        for t in m.tasks {
            let d = load_dataset(&dir.join(&t.dir))?;
            if t.seen { out.seen.push(d) } else { out.unseen.push(d) }
        }
        Ok(out)
    }

    /// Held-out data of each seen task.
    pub fn seen_test_pools(&self) -> Vec<OfflineDataset> {
        self.seen.iter().map(|d| d.subset(Split::Test)).collect()
    }
}

fn behavior_stage(root: &Path, spec: &TaskSpec, cfg: &BehaviorConfig, data_seed: u64) -> Result<Vec<CheckpointRecord>> {
    #[derive(Serialize)]
    struct Key<'a> {
        spec: &'a TaskSpec,
        behavior: &'a BehaviorConfig,
        seed: u64,
    }
    let seed = derive_seed(data_seed, "behavior", spec.seed);
    let (dir, _) = run_stage(root, "behavior", &Key { spec, behavior: cfg, seed }, |dir| {
        let records = train_behavior_policy(spec, cfg, seed)?;
        save_checkpoints(&records, &cfg.sac.hidden, dir)
    })?;
    load_checkpoints(&dir)
}

/// Behavior training, checkpoint selection and collection for every task.
/// Behavior policies are cached under `cache`.
pub fn build_data(cfg: &DataConfig, cache: &Path, dir: &Path) -> Result<()> {
    cfg.validate()?;
    {
        let mut tasks = Vec::new();
        let pool = cfg.resolved_test_pool();
        let collect_seed = derive_seed(cfg.seed, "collect", 0);
        for (k, spec) in cfg.seen_specs().iter().enumerate() {
            let records = behavior_stage(cache, spec, &cfg.behavior, cfg.seed)?;
            let (train, test) = match &cfg.selection {
                Selection::Index { n } => {
                    let sel = select_checkpoints(&records, *n)?;
                    let rest = remaining_checkpoints(&records, &sel);
                    (sel, rest)
                }
                Selection::Quality { train, test } => {
                    let tr = select_by_return(&records, train[k])?;
                    let others = remaining_checkpoints(&records, std::slice::from_ref(&tr));
                    let te = select_by_return(&others, test[k])?;
                    (vec![tr], vec![te])
                }
            };
            let d = collect_dataset(spec, k as u32, &train, &test, cfg.budget, pool, collect_seed)?;
            let name = format!("task-{k}");
            save_dataset(&d, &dir.join(&name))?;
            tasks.push(DataTask { task_id: k as u32, spec: *spec, seen: true, dir: name });
        }
        let k0 = cfg.seen.len();
        for (i, spec) in cfg.unseen_specs().iter().enumerate() {
            let records = behavior_stage(cache, spec, &cfg.behavior, cfg.seed)?;
            let sources = match &cfg.selection {
                Selection::Index { n } => remaining_checkpoints(&records, &select_checkpoints(&records, *n)?),
                Selection::Quality { .. } => records,
            };
            let id = (k0 + i) as u32;
            let d = collect_test_pool(spec, id, &sources, pool, collect_seed)?;
            let name = format!("task-{id}");
            save_dataset(&d, &dir.join(&name))?;
            tasks.push(DataTask { task_id: id, spec: *spec, seen: false, dir: name });
        }
        let m = DataManifest { tasks };
        std::fs::write(dir.join("data.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

pub fn data_stage(root: &Path, cfg: &DataConfig) -> Result<(PathBuf, String)> {
    cfg.validate()?;
    run_stage(root, "data", cfg, |dir| build_data(cfg, root, dir))
}

/// Marks a directory written outside the stage cache as complete.
pub fn mark_complete(dir: &Path) -> Result<()> {
    std::fs::write(dir.join(COMPLETE), "")?;
    Ok(())
}

/// Per-task ensembles fitted on the seen tasks' train splits.
pub fn train_models(data: &DataBundle, cfg: &DynamicsConfig, seed: u64) -> Result<Vec<DynamicsEnsemble>> {
    let refs: Vec<&OfflineDataset> = data.seen.iter().collect();
    let reward = fit_reward(&refs, cfg, derive_seed(seed, "reward-model", 0))?;
    data.seen
        .iter()
        .map(|d| fit_dynamics(d, reward.clone(), cfg, derive_seed(seed, "dynamics", d.task_id as u64)))
        .collect()
}

pub fn save_models(ensembles: &[DynamicsEnsemble], hidden: &[usize], dir: &Path) -> Result<()> {
    for e in ensembles {
        e.save(&dir.join(format!("task-{}", e.task_id)), hidden)?;
    }
    std::fs::write(dir.join("models.json"), serde_json::to_string_pretty(&ensembles.iter().map(|e| e.task_id).collect::<Vec<_>>())?)?;
    Ok(())
}

pub fn load_models(dir: &Path) -> Result<Vec<DynamicsEnsemble>> {
    require_complete(dir, "models")?;
    let path = dir.join("models.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let ids: Vec<u32> = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
    ids.iter().map(|id| DynamicsEnsemble::load(&dir.join(format!("task-{id}")))).collect()
}

/// Inputs of representation learning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprSettings {
    pub encoder: EncoderConfig,
    pub repr: ReprConfig,
    pub adversarial: AdversarialConfig,
    pub variant: Variant,
}

/// Per-round training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReprHistory {
    pub encoder_loss: Vec<f64>,
    pub mean_uncertainty: Vec<f64>,
    pub mean_r_adv: Vec<f64>,
}

/// The alternating loop: each round collects model rollouts with the round's
/// policy and encoder snapshots, updates the adversarial policy on them, then
/// updates the encoder on their context windows. Without models the encoder
/// trains on offline windows for the same number of steps.
pub fn train_representation(
    data: &DataBundle,
    ensembles: Option<&[DynamicsEnsemble]>,
    s: &ReprSettings,
    seed: u64,
) -> Result<(Encoder, Option<SacAgent>, ReprHistory)> {
    let steps: Vec<ContextStep> = data.seen.iter().flat_map(|d| d.train().map(ContextStep::from)).collect();
    let encoder = Encoder::fitted(s.encoder.clone(), &steps, derive_seed(seed, "encoder", 0))?;
    let mut trainer = EncoderTrainer::new(encoder);
    let mut rng = stream(seed, "representation", 0);
    let mut history = ReprHistory::default();
    let per_task = s.repr.windows_per_task;

    if !s.variant.uses_models() {
        let sources: Vec<WindowSource> = data.seen.iter().map(|d| WindowSource::from_transitions(d.train())).collect();
        for _ in 0..s.repr.rounds {
            let mut losses = Vec::new();
            for _ in 0..s.repr.encoder_steps {
                let batch = sources
                    .iter()
                    .map(|src| src.sample_variable(per_task, s.encoder.window, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                losses.push(trainer.update(&batch)?);
            }
            history.encoder_loss.push(mean_std(&losses).0);
        }
        return Ok((trainer.encoder, None, history));
    }

    let ensembles = ensembles.ok_or_else(|| {
        Error::usage(format!("variant {} needs fitted dynamics ensembles for every task", s.variant.name()))
    })?;
    if ensembles.len() != data.seen.len() {
        return Err(Error::usage("one dynamics ensemble per seen task is required"));
    }
    let adv = s.variant.adjust(&s.adversarial);
    let starts = joint_start_states(&data.seen);
    let (od, ad) = (ensembles[0].obs_dim(), ensembles[0].act_dim());
    let mut policy = match s.variant {
        Variant::NoAdv => RolloutPolicy::Uniform { act_dim: ad },
        _ => RolloutPolicy::adversarial(od, ad, &adv, &mut rng),
    };
    for _ in 0..s.repr.rounds {
        let round = collect_adversarial_data(&policy, ensembles, &trainer.encoder, &starts, &adv, s.encoder.temperature, &mut rng)?;
        if let RolloutPolicy::Adversarial(agent) = &mut policy {
            train_adversarial_step(agent, &round, adv.policy_steps, &mut rng)?;
        }
        let mut losses = Vec::new();
        for _ in 0..s.repr.encoder_steps {
            let batch = round.encoder_windows(per_task, &mut rng);
            losses.push(trainer.update(&batch)?);
        }
        history.encoder_loss.push(mean_std(&losses).0);
        history.mean_uncertainty.push(round.mean_uncertainty());
        let radv: Vec<f64> = round.r_adv.iter().flatten().copied().collect();
        history.mean_r_adv.push(mean_std(&radv).0);
    }
    let agent = match policy {
        RolloutPolicy::Adversarial(a) => Some(*a),
        RolloutPolicy::Uniform { .. } => None,
    };
    Ok((trainer.encoder, agent, history))
}

pub fn save_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Evaluates one trained run on every task under both protocols and
/// computes the encoder diagnostics.
pub fn evaluate_run(
    data: &DataBundle,
    policy: &MetaPolicy,
    encoder: &Encoder,
    cfg: &EvalConfig,
    protocols: &[Protocol],
    seed: u64,
    export_dir: Option<&Path>,
) -> Result<RunEval> {
    let window = encoder.config.window;
    let eval_seed = derive_seed(seed, "evaluation", 0);
    let mut tasks = Vec::new();
    let seen_pools = data.seen_test_pools();
    let all = data.seen.iter().zip(&seen_pools).map(|(d, p)| (d, p, true)).chain(data.unseen.iter().map(|d| (d, d, false)));
    for (d, pool, seen) in all {
        let s = derive_seed(eval_seed, "task", d.task_id as u64);
        for &protocol in protocols {
            let returns = match protocol {
                Protocol::OnPolicy => eval_on_policy(policy, encoder, d.task, cfg.episodes, window, s)?,
                Protocol::OffPolicy => eval_off_policy(policy, encoder, d.task, pool, cfg.episodes, window, s)?,
            };
            tasks.push(TaskEval { task: d.task, task_label: d.task.label(), seen, protocol, mean_return: mean_std(&returns).0 });
        }
    }
    let diag = encoder_diagnostics(encoder, &data.seen, &seen_pools, cfg.diag_windows, window, derive_seed(seed, "diagnostics", 0))?;
    if let Some(dir) = export_dir {
        write_embedding_csv(&dir.join("embeddings.csv"), &diag.embeddings)?;
    }
    Ok(RunEval { seed, tasks, mean_d_phi: diag.mean_d_phi(), d_phi: diag.d_phi })
}

/// Directories produced for one seed.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub models_dir: Option<PathBuf>,
    pub encoder_dir: PathBuf,
    pub policy_dir: PathBuf,
    pub eval_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub report_dir: PathBuf,
    pub runs: Vec<RunArtifacts>,
}

fn data_dir_of(cfg: &ExperimentConfig) -> Result<(PathBuf, String)> {
    data_stage(&cfg.output_root, &cfg.data)
}

/// Models for one seed; they do not depend on the variant.
pub fn models_stage(cfg: &ExperimentConfig, data_fp: &str, data: &DataBundle, seed: u64) -> Result<(PathBuf, String)> {
    #[derive(Serialize)]
    struct Key<'a> {
        data: &'a str,
        dynamics: &'a DynamicsConfig,
        seed: u64,
    }
    run_stage(&cfg.output_root, "models", &Key { data: data_fp, dynamics: &cfg.dynamics, seed }, |dir| {
        let ens = train_models(data, &cfg.dynamics, derive_seed(seed, "models", 0))?;
        save_models(&ens, &cfg.dynamics.hidden, dir)
    })
}

/// Every stage for one seed, each reused from disk when complete.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(RunArtifacts, RunEval)> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let root = &cfg.output_root;
    let (data_dir, data_fp) = data_dir_of(&cfg)?;
    let data = DataBundle::load(&data_dir)?;

    let models = if cfg.variant.uses_models() { Some(models_stage(&cfg, &data_fp, &data, seed)?) } else { None };

    #[derive(Serialize)]
    struct ReprKey<'a> {
        data: &'a str,
        models: Option<&'a str>,
        settings: &'a ReprSettings,
        seed: u64,
    }
    let settings = ReprSettings {
        encoder: cfg.encoder.clone(),
        repr: cfg.repr.clone(),
        adversarial: cfg.variant.adjust(&cfg.adversarial),
        variant: cfg.variant,
    };
    let models_fp = models.as_ref().map(|(_, fp)| fp.as_str());
    let (encoder_dir, repr_fp) = run_stage(
        root,
        "encoder",
        &ReprKey { data: &data_fp, models: models_fp, settings: &settings, seed },
        |dir| {
            let ens = match &models {
                Some((mdir, _)) => Some(load_models(mdir)?),
                None => None,
            };
            let (enc, agent, history) = train_representation(&data, ens.as_deref(), &settings, derive_seed(seed, "repr", 0))?;
            save_representation(dir, &enc, agent.as_ref(), &history)
        },
    )?;

    #[derive(Serialize)]
    struct PolicyKey<'a> {
        data: &'a str,
        encoder: &'a str,
        meta: &'a MetaPolicyConfig,
        seed: u64,
    }
    let (policy_dir, policy_fp) =
        run_stage(root, "policy", &PolicyKey { data: &data_fp, encoder: &repr_fp, meta: &cfg.meta, seed }, |dir| {
            let enc = load_encoder(&encoder_dir)?;
            let policy = train_meta_policy(&data.seen, &enc, &cfg.meta, derive_seed(seed, "meta", 0))?;
            policy.save(&dir.join("policy"))
        })?;

    #[derive(Serialize)]
    struct EvalKey<'a> {
        policy: &'a str,
        eval: &'a EvalConfig,
        seed: u64,
    }
    let (eval_dir, _) = run_stage(root, "eval", &EvalKey { policy: &policy_fp, eval: &cfg.eval, seed }, |dir| {
        let enc = load_encoder(&encoder_dir)?;
        let policy = load_policy(&policy_dir)?;
        let run = evaluate_run(&data, &policy, &enc, &cfg.eval, &[Protocol::OnPolicy, Protocol::OffPolicy], seed, Some(dir))?;
        save_json(&dir.join("run.json"), &run)
    })?;
    let run: RunEval = {
        let path = eval_dir.join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?
    };
    let art = RunArtifacts {
        seed,
        data_dir,
        models_dir: models.map(|(d, _)| d),
        encoder_dir,
        policy_dir,
        eval_dir,
    };
    Ok((art, run))
}

/// Layout of an encoder directory: `encoder/`, optional
/// `adversarial-policy/` and `history.json`.
pub fn save_representation(dir: &Path, encoder: &Encoder, adversary: Option<&SacAgent>, history: &ReprHistory) -> Result<()> {
    encoder.save(&dir.join("encoder"))?;
    if let Some(a) = adversary {
        a.save(&dir.join("adversarial-policy"))?;
    }
    save_json(&dir.join("history.json"), history)
}

pub fn load_encoder(stage_dir: &Path) -> Result<Encoder> {
    require_complete(stage_dir, "encoder")?;
    Encoder::load(&stage_dir.join("encoder"))
}

pub fn load_policy(stage_dir: &Path) -> Result<MetaPolicy> {
    require_complete(stage_dir, "policy")?;
    SacAgent::load(&stage_dir.join("policy"))
}

/// Algorithm order for every seed, then one report over all seeds.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut evals = Vec::new();
    for &seed in &cfg.seeds {
        let (a, r) = run_seed(&cfg, seed)?;
        runs.push(a);
        evals.push(r);
    }
    let report_key = report_key(&cfg, &runs)?;
    let fp = fingerprint(&report_key)?;
    let (report_dir, _) = run_stage(&cfg.output_root, "reports", &report_key, |dir| {
        save_json(&dir.join("config.json"), &cfg)?;
        let mut exports = Vec::new();
        for a in &runs {
            let rows = read_embedding_csv(&a.eval_dir.join("embeddings.csv"))?;
            let name = format!("embeddings-seed{}.csv", a.seed);
            write_embedding_csv(&dir.join(&name), &rows)?;
            std::fs::write(dir.join(format!("embeddings-seed{}.svg", a.seed)), embedding_svg(&rows))?;
            exports.push(name);
        }
        let report = EvalReport::aggregate(cfg.variant.name(), &fp, cfg.eval.episodes, evals.clone(), exports)?;
        report.save(&dir.join("report.json"))
    })?;
    let report = EvalReport::load(&report_dir.join("report.json"))?;
    Ok(PipelineOutput { report, report_dir, runs })
}

/// The resolved config without its output location, plus the eval stages
/// it summarizes.
fn report_key(cfg: &ExperimentConfig, runs: &[RunArtifacts]) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("output_root");
    }
    let evals: Vec<String> = runs
        .iter()
        .map(|r| r.eval_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    Ok(serde_json::json!({ "config": v, "evals": evals }))
}

/// Runs `base` once per variant; all variants share data and models.
pub fn run_variant_sweep(base: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<PipelineOutput>> {
    variants.iter().map(|&v| run_pipeline(&base.with_variant(v))).collect()
}

/// Runs `base` once per ensemble size.
pub fn run_ensemble_sweep(base: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<PipelineOutput>> {
    sizes
        .iter()
        .map(|&m| {
            let mut c = base.clone();
            c.dynamics.ensemble_size = m;
            run_pipeline(&c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "paper", "quick", "didactic"] {
            let c = ExperimentConfig::preset(name).unwrap().resolved();
            c.validate().unwrap();
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(ExperimentConfig::from_json(&json).unwrap(), c);
        }
        assert!(ExperimentConfig::preset("huge").is_err());
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c = ExperimentConfig::from_json(r#"{"variant": "no-up", "seeds": [3]}"#).unwrap();
        assert_eq!(c.variant, Variant::NoUp);
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.encoder, EncoderConfig::default());
        assert!(ExperimentConfig::from_json(r#"{"unknown_field": 1}"#).is_err());
    }

    #[test]
    fn seed_override_parses_lists() {
        let mut c = ExperimentConfig::default();
        c.apply_seed_override(Some("4, 7,9")).unwrap();
        assert_eq!(c.seeds, vec![4, 7, 9]);
        assert!(c.apply_seed_override(Some("x")).is_err());
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.seeds, vec![4, 7, 9]);
    }

    #[test]
    fn variants_adjust_reward_weights() {
        let a = AdversarialConfig::default();
        assert_eq!(Variant::NoUp.adjust(&a).reward.lambda1, 0.0);
        assert_eq!(Variant::NoTc.adjust(&a).reward.lambda2, 0.0);
        assert_eq!(Variant::Full.adjust(&a), a);
        assert_eq!("no-adv".parse::<Variant>().unwrap(), Variant::NoAdv);
        assert!("none".parse::<Variant>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected_before_running() {
        let mut c = ExperimentConfig::quick();
        c.data.selection = Selection::Index { n: 2 };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::quick();
        c.adversarial.reward.lambda2 = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::quick();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprints_track_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        b.repr.rounds += 1;
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }

    #[test]
    fn completed_stages_are_not_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let mut calls = 0;
        for _ in 0..2 {
            run_stage(dir.path(), "data", &"key", |d| {
                calls += 1;
                std::fs::write(d.join("x"), "1").map_err(Error::from)
            })
            .unwrap();
        }
        assert_eq!(calls, 1);
        let err = run_stage(dir.path(), "models", &"other", |_| Err(Error::usage("boom"))).unwrap_err();
        assert!(err.to_string().contains("stage models failed"));
        assert!(dir.path().join("models").read_dir().unwrap().next().is_some());
    }

    #[test]
    fn representation_without_models_is_refused_for_model_variants() {
        let data = DataBundle { seen: Vec::new(), unseen: Vec::new() };
        let s = ReprSettings {
            encoder: EncoderConfig::default(),
            repr: ReprConfig::default(),
            adversarial: AdversarialConfig::default(),
            variant: Variant::Full,
        };
        assert!(train_representation(&data, None, &s, 0).is_err());
    }

    #[test]
    fn policy_stage_needs_an_encoder() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_encoder(dir.path()), Err(Error::Stage { stage: "encoder", .. })));
    }
}
