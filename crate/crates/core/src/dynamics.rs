//! Probabilistic dynamics ensembles, a shared reward model, aleatoric
//! uncertainty and branch rollouts.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use redaug_nn::{Activation, Adam, AdamConfig, Mlp, ParamSet, Tape};
use serde::{Deserialize, Serialize};

use crate::datagen::{OfflineDataset, Transition};
use crate::envsuite::{Family, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{mix64, stream, Rng};
use crate::sac::hcat;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without holdout improvement before stopping.
    pub patience: usize,
    pub ensemble_size: usize,
    /// Gradient steps per epoch; `None` means one pass over the bootstrap.
    pub steps_per_epoch: Option<usize>,
    /// Leading epochs that fit only the mean head by squared error, before
    /// the Gaussian likelihood takes over. Early stopping starts after them.
    pub mse_warmup_epochs: usize,
    /// Each element's likelihood term is weighted by the detached
    /// `std^(2 beta)`; 0 gives the plain Gaussian likelihood.
    pub nll_beta: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            ensemble_size: 3,
            steps_per_epoch: None,
            mse_warmup_epochs: 10,
            nll_beta: 0.5,
        }
    }
}

impl DynamicsConfig {
    /// Three layers of 200 units, batch 2048, as in the large-scale setup.
    pub fn paper() -> Self {
        Self { hidden: vec![200, 200, 200], batch_size: 2048, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 1 {
            return Err(Error::config("ensemble size must be at least 1"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::config("dynamics batch size, epochs and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Per-dimension affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Column statistics of `x`; dimensions with std below 1e-8 keep scale 1.
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = x
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s < 1e-8 { 1.0 } else { s })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for (j, mut col) in y.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        y
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for (j, mut col) in y.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        y
    }
}

/// Smooth map of the raw head output onto `[LOG_STD_MIN, LOG_STD_MAX]`.
fn soft_clamp(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

/// Gaussian model of `s' - s` given `(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDynamicsModel {
    mlp: Mlp,
    pub params: ParamSet,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl GaussianDynamicsModel {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], input_norm: Normalizer, target_norm: Normalizer, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, obs_dim + act_dim, hidden, 2 * obs_dim, Activation::Relu, rng);
        Self { mlp, params, input_norm, target_norm, obs_dim, act_dim }
    }

    /// Mean and log-std of the normalized delta.
    fn head(&self, params: &ParamSet, s: &Array2<f64>, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let x = self.input_norm.normalize(&hcat(&[s, a]));
        let out = self.mlp.eval(params, &x);
        let d = self.obs_dim;
        (out.slice(s![.., ..d]).to_owned(), out.slice(s![.., d..]).mapv(soft_clamp))
    }

    /// Raw-space mean delta and per-dimension std.
    pub fn predict_delta(&self, s: &Array2<f64>, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (mu, log_std) = self.head(&self.params, s, a);
        let mean = self.target_norm.denormalize(&mu);
        let mut std = log_std.mapv(f64::exp);
        for (j, mut col) in std.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.target_norm.std[j]);
        }
        (mean, std)
    }

    /// Mean next state `s + E[delta]` and std, in raw space.
    pub fn predict(&self, s: &Array2<f64>, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (delta, std) = self.predict_delta(s, a);
        (s + &delta, std)
    }

    /// Gaussian negative log-likelihood (per element, mean) of normalized
    /// targets, with gradients for `params`.
    pub fn nll_with(&self, params: &ParamSet, x_norm: &Array2<f64>, y_norm: &Array2<f64>) -> (f64, Vec<Array2<f64>>) {
        self.weighted_nll_with(params, x_norm, y_norm, 0.0)
    }

    /// As [`Self::nll_with`], each element weighted by the detached `std^(2 beta)`.
    pub fn weighted_nll_with(
        &self,
        params: &ParamSet,
        x_norm: &Array2<f64>,
        y_norm: &Array2<f64>,
        beta: f64,
    ) -> (f64, Vec<Array2<f64>>) {
        let d = self.obs_dim;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(x_norm.clone());
        let out = self.mlp.forward(&mut tape, &b, x);
        let mu = tape.slice_cols(out, 0, d);
        let raw = tape.slice_cols(out, d, 2 * d);
        let t = tape.tanh(raw);
        let t = tape.add_scalar(t, 1.0);
        let t = tape.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
        let log_std = tape.add_scalar(t, LOG_STD_MIN);
        let m2 = tape.scale(log_std, -2.0);
        let inv_var = tape.exp(m2);
        let y = tape.constant(y_norm.clone());
        let err = tape.sub(mu, y);
        let sq = tape.square(err);
        let w = tape.mul(sq, inv_var);
        let w = tape.scale(w, 0.5);
        let mut per = tape.add(w, log_std);
        if beta != 0.0 {
            let weight = tape.value(log_std).mapv(|l| (2.0 * beta * l).exp());
            let weight = tape.constant(weight);
            per = tape.mul(per, weight);
        }
        let loss = tape.mean(per);
        let g = tape.backward(loss);
        (tape.item(loss) + 0.5 * (2.0 * std::f64::consts::PI).ln(), params.grads(&b, &g))
    }

    /// Squared error of the mean head alone.
    fn mean_mse_with(&self, params: &ParamSet, x_norm: &Array2<f64>, y_norm: &Array2<f64>) -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(x_norm.clone());
        let out = self.mlp.forward(&mut tape, &b, x);
        let mu = tape.slice_cols(out, 0, self.obs_dim);
        let y = tape.constant(y_norm.clone());
        let err = tape.sub(mu, y);
        let sq = tape.square(err);
        let loss = tape.mean(sq);
        let g = tape.backward(loss);
        (tape.item(loss), params.grads(&b, &g))
    }

    fn nll_value(&self, params: &ParamSet, x_norm: &Array2<f64>, y_norm: &Array2<f64>) -> f64 {
        let out = self.mlp.eval(params, x_norm);
        let d = self.obs_dim;
        let mut total = 0.0;
        for i in 0..out.nrows() {
            for j in 0..d {
                let ls = soft_clamp(out[[i, d + j]]);
                let e = out[[i, j]] - y_norm[[i, j]];
                total += 0.5 * e * e * (-2.0 * ls).exp() + ls;
            }
        }
        total / (out.nrows() * d) as f64 + 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.act_dim
    }
}

/// Regressor `(s, a) -> r` shared by all tasks of a family.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    mlp: Mlp,
    pub params: ParamSet,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub holdout_rmse: f64,
}

impl RewardModel {
    pub fn predict(&self, s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        let x = self.input_norm.normalize(&hcat(&[s, a]));
        self.target_norm.denormalize(&self.mlp.eval(&self.params, &x))
    }

    fn mse_with(&self, params: &ParamSet, x_norm: &Array2<f64>, y_norm: &Array2<f64>) -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(x_norm.clone());
        let out = self.mlp.forward(&mut tape, &b, x);
        let y = tape.constant(y_norm.clone());
        let d = tape.sub(out, y);
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let g = tape.backward(loss);
        (tape.item(loss), params.grads(&b, &g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsEnsemble {
    pub task_id: u32,
    pub task: TaskSpec,
    pub members: Vec<GaussianDynamicsModel>,
    pub reward_model: RewardModel,
    pub holdout_nll: Vec<f64>,
}

/// One model-generated step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTransition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub uncertainty: f64,
    pub task_id: u32,
}

/// One branch rollout in one task's ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRollout {
    pub task_id: u32,
    pub steps: Vec<ModelTransition>,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).expect("ragged rows")
}

/// Indices held out for early stopping: about one record in ten.
pub fn is_holdout(index: usize) -> bool {
    mix64(index as u64) % 10 == 0
}

struct Split2 {
    train: Vec<usize>,
    holdout: Vec<usize>,
}

fn holdout_split(n: usize) -> Split2 {
    let (holdout, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_holdout(i));
    // Tiny datasets may hash everything to one side; keep both non-empty.
    match (train.is_empty(), holdout.is_empty()) {
        (false, false) => Split2 { train, holdout },
        _ => Split2 { train: (0..n).collect(), holdout: (0..n).collect() },
    }
}

fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Minibatch Adam loop with holdout early stopping; keeps the best parameters.
fn train_with_early_stopping(
    params: &mut ParamSet,
    x: &Array2<f64>,
    y: &Array2<f64>,
    train_idx: &[usize],
    holdout_idx: &[usize],
    cfg: &DynamicsConfig,
    rng: &mut Rng,
    context: &str,
    warmup_epochs: usize,
    mut loss_grad: impl FnMut(&ParamSet, &Array2<f64>, &Array2<f64>, bool) -> (f64, Vec<Array2<f64>>),
    mut holdout_loss: impl FnMut(&ParamSet, &Array2<f64>, &Array2<f64>) -> f64,
) -> Result<f64> {
    let hx = gather(x, holdout_idx);
    let hy = gather(y, holdout_idx);
    let mut opt = Adam::new(params, AdamConfig::with_lr(cfg.lr));
    let mut best = holdout_loss(params, &hx, &hy);
    let mut best_params = params.clone();
    let mut stale = 0;
    let n = train_idx.len();
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| n.div_ceil(cfg.batch_size)).max(1);
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.max_epochs + warmup_epochs {
        use rand::seq::SliceRandom;
        let warmup = epoch < warmup_epochs;
        order.shuffle(rng);
        for step in 0..steps {
            let start = (step * cfg.batch_size) % n;
            let idx: Vec<usize> = (0..cfg.batch_size.min(n)).map(|k| order[(start + k) % n]).collect();
            let (loss, grads) = loss_grad(params, &gather(x, &idx), &gather(y, &idx), warmup);
            if !loss.is_finite() {
                return Err(Error::divergence(context, format!("loss = {loss} at epoch {epoch}")));
            }
            opt.step(params, &grads).map_err(|e| Error::divergence(context, e.to_string()))?;
        }
        let h = holdout_loss(params, &hx, &hy);
        if !h.is_finite() {
            return Err(Error::divergence(context, format!("holdout loss = {h} at epoch {epoch}")));
        }
        if warmup {
            best = h;
            best_params = params.clone();
        } else if h < best {
            best = h;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *params = best_params;
    Ok(best)
}

fn train_arrays<'a>(transitions: impl Iterator<Item = &'a Transition>, od: usize, ad: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let ts: Vec<&Transition> = transitions.collect();
    let s = stack(ts.iter().map(|t| t.state.clone()), od);
    let a = stack(ts.iter().map(|t| t.action.clone()), ad);
    let r = stack(ts.iter().map(|t| vec![t.reward]), 1);
    let s2 = stack(ts.iter().map(|t| t.next_state.clone()), od);
    (s, a, r, s2)
}

/// Fits `cfg.ensemble_size` Gaussian members on bootstraps of the train split.
pub fn fit_dynamics(
    dataset: &OfflineDataset,
    reward_model: RewardModel,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<DynamicsEnsemble> {
    cfg.validate()?;
    let (od, ad) = (dataset.task.obs_dim(), dataset.task.act_dim());
    let (s, a, _, s2) = train_arrays(dataset.train(), od, ad);
    if s.nrows() == 0 {
        return Err(Error::config(format!("no train transitions for task {}", dataset.task_id)));
    }
    let inputs = hcat(&[&s, &a]);
    let delta = &s2 - &s;
    let input_norm = Normalizer::fit(&inputs);
    let target_norm = Normalizer::fit(&delta);
    let x = input_norm.normalize(&inputs);
    let y = target_norm.normalize(&delta);
    let split = holdout_split(s.nrows());

    let mut members = Vec::with_capacity(cfg.ensemble_size);
    let mut holdout_nll = Vec::with_capacity(cfg.ensemble_size);
    for m in 0..cfg.ensemble_size {
        let mut rng = stream(seed, "dynamics-member", ((dataset.task_id as u64) << 16) | m as u64);
        let mut model = GaussianDynamicsModel::new(od, ad, &cfg.hidden, input_norm.clone(), target_norm.clone(), &mut rng);
        let bootstrap: Vec<usize> = (0..split.train.len()).map(|_| *split.train.choose(&mut rng).expect("non-empty")).collect();
        let mut params = model.params.clone();
        let context = format!("dynamics member {m} of task {}", dataset.task_id);
        let h = train_with_early_stopping(
            &mut params,
            &x,
            &y,
            &bootstrap,
            &split.holdout,
            cfg,
            &mut rng,
            &context,
            cfg.mse_warmup_epochs,
            |p, bx, by, warmup| {
                if warmup {
                    model.mean_mse_with(p, bx, by)
                } else {
                    model.weighted_nll_with(p, bx, by, cfg.nll_beta)
                }
            },
            |p, hx, hy| model.nll_value(p, hx, hy),
        )?;
        model.params = params;
        members.push(model);
        holdout_nll.push(h);
    }
    Ok(DynamicsEnsemble { task_id: dataset.task_id, task: dataset.task, members, reward_model, holdout_nll })
}

/// Fits one reward regressor by squared error on the union of train splits.
pub fn fit_reward(datasets: &[&OfflineDataset], cfg: &DynamicsConfig, seed: u64) -> Result<RewardModel> {
    let first = datasets.first().ok_or_else(|| Error::config("fit_reward needs at least one dataset"))?;
    let (od, ad) = (first.task.obs_dim(), first.task.act_dim());
    if datasets.iter().any(|d| d.task.family != first.task.family) {
        return Err(Error::config("reward model datasets mix task families"));
    }
    let (s, a, r, _) = train_arrays(datasets.iter().flat_map(|d| d.train()), od, ad);
    if s.nrows() == 0 {
        return Err(Error::config("no train transitions for the reward model"));
    }
    let inputs = hcat(&[&s, &a]);
    let input_norm = Normalizer::fit(&inputs);
    let target_norm = Normalizer::fit(&r);
    let x = input_norm.normalize(&inputs);
    let y = target_norm.normalize(&r);
    let split = holdout_split(s.nrows());
    let mut rng = stream(seed, "reward-model", 0);
    let mut params = ParamSet::new();
    let mlp = Mlp::new(&mut params, od + ad, &cfg.hidden, 1, Activation::Relu, &mut rng);
    let mut model = RewardModel { mlp, params: ParamSet::new(), input_norm, target_norm, holdout_rmse: 0.0 };
    let mlp = model.mlp.clone();
    train_with_early_stopping(
        &mut params,
        &x,
        &y,
        &split.train,
        &split.holdout,
        cfg,
        &mut rng,
        "reward model",
        0,
        |p, bx, by, _| model.mse_with(p, bx, by),
        |p, hx, hy| (&mlp.eval(p, hx) - hy).mapv(|e| e * e).mean().unwrap_or(0.0),
    )?;
    model.params = params;
    let hs = gather(&s, &split.holdout);
    let ha = gather(&a, &split.holdout);
    let pred = model.predict(&hs, &ha);
    let truth = gather(&r, &split.holdout);
    model.holdout_rmse = (&pred - &truth).mapv(|e| e * e).mean().unwrap_or(0.0).sqrt();
    Ok(model)
}

impl DynamicsEnsemble {
    pub fn obs_dim(&self) -> usize {
        self.members[0].obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.members[0].act_dim
    }

    /// Mean of the members' mean next states.
    pub fn mean_prediction(&self, s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        let mut acc = Array2::zeros(s.dim());
        for m in &self.members {
            acc += &m.predict(s, a).0;
        }
        acc / self.members.len() as f64
    }

    /// `max` over members of the L2 norm of the predicted std, per row.
    pub fn uncertainty_batch(&self, s: &Array2<f64>, a: &Array2<f64>) -> Vec<f64> {
        let mut u = vec![0.0f64; s.nrows()];
        for m in &self.members {
            let (_, std) = m.predict_delta(s, a);
            for (i, row) in std.axis_iter(Axis(0)).enumerate() {
                u[i] = u[i].max(row.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
        }
        u
    }

    pub fn uncertainty(&self, s: &[f64], a: &[f64]) -> f64 {
        let s = Array2::from_shape_vec((1, s.len()), s.to_vec()).expect("row");
        let a = Array2::from_shape_vec((1, a.len()), a.to_vec()).expect("row");
        self.uncertainty_batch(&s, &a)[0]
    }

    pub fn save(&self, dir: &Path, hidden: &[usize]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, m) in self.members.iter().enumerate() {
            m.params.write_blob(&dir.join(format!("member-{k}.bin")))?;
        }
        self.reward_model.params.write_blob(&dir.join("reward.bin"))?;
        let manifest = EnsembleManifest {
            task_id: self.task_id,
            task: self.task,
            ensemble_size: self.members.len(),
            obs_dim: self.obs_dim(),
            act_dim: self.act_dim(),
            hidden: hidden.to_vec(),
            members: self
                .members
                .iter()
                .map(|m| MemberManifest { input_norm: m.input_norm.clone(), target_norm: m.target_norm.clone() })
                .collect(),
            holdout_nll: self.holdout_nll.clone(),
            reward: RewardManifest {
                input_norm: self.reward_model.input_norm.clone(),
                target_norm: self.reward_model.target_norm.clone(),
                holdout_rmse: self.reward_model.holdout_rmse,
            },
        };
        std::fs::write(dir.join("ensemble.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ensemble.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        let m: EnsembleManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
        if m.members.len() != m.ensemble_size || m.ensemble_size == 0 {
            return Err(Error::load(&path, "member count disagrees with ensemble_size"));
        }
        let mut rng = stream(0, "load", 0);
        let mut members = Vec::with_capacity(m.ensemble_size);
        for (k, mm) in m.members.iter().enumerate() {
            let mut model = GaussianDynamicsModel::new(
                m.obs_dim,
                m.act_dim,
                &m.hidden,
                mm.input_norm.clone(),
                mm.target_norm.clone(),
                &mut rng,
            );
            model.params = ParamSet::read_blob(&dir.join(format!("member-{k}.bin")), &model.params.shapes())?;
            members.push(model);
        }
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, m.obs_dim + m.act_dim, &m.hidden, 1, Activation::Relu, &mut rng);
        let params = ParamSet::read_blob(&dir.join("reward.bin"), &params.shapes())?;
        let reward_model = RewardModel {
            mlp,
            params,
            input_norm: m.reward.input_norm,
            target_norm: m.reward.target_norm,
            holdout_rmse: m.reward.holdout_rmse,
        };
        Ok(Self { task_id: m.task_id, task: m.task, members, reward_model, holdout_nll: m.holdout_nll })
    }
}

#[derive(Serialize, Deserialize)]
struct MemberManifest {
    input_norm: Normalizer,
    target_norm: Normalizer,
}

#[derive(Serialize, Deserialize)]
struct RewardManifest {
    input_norm: Normalizer,
    target_norm: Normalizer,
    holdout_rmse: f64,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    task_id: u32,
    task: TaskSpec,
    ensemble_size: usize,
    obs_dim: usize,
    act_dim: usize,
    hidden: Vec<usize>,
    members: Vec<MemberManifest>,
    holdout_nll: Vec<f64>,
    reward: RewardManifest,
}

/// Componentwise bounds of a family's observation space.
pub fn observation_bounds(family: Family) -> Vec<(f64, f64)> {
    use crate::envsuite::{PENDULUM_MAX_SPEED, POINT_MASS_POS_LIMIT, POINT_MASS_VEL_LIMIT};
    match family {
        Family::PointMass2d => vec![
            (-POINT_MASS_POS_LIMIT, POINT_MASS_POS_LIMIT),
            (-POINT_MASS_POS_LIMIT, POINT_MASS_POS_LIMIT),
            (-POINT_MASS_VEL_LIMIT, POINT_MASS_VEL_LIMIT),
            (-POINT_MASS_VEL_LIMIT, POINT_MASS_VEL_LIMIT),
        ],
        Family::Pendulum => vec![(-1.0, 1.0), (-1.0, 1.0), (-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)],
    }
}

/// Branch rollouts: for each ensemble, `batch` start states drawn uniformly
/// from `start_states`, each rolled `horizon` steps with `policy`. Every
/// step uses a uniformly chosen member; next states are sampled from its
/// Gaussian and kept inside the observation box.
pub fn branch_rollout(
    ensembles: &[DynamicsEnsemble],
    policy: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>,
    start_states: &[Vec<f64>],
    horizon: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<ModelRollout>> {
    if start_states.is_empty() {
        return Err(Error::config("branch rollout needs a non-empty joint dataset"));
    }
    if horizon == 0 || batch == 0 {
        return Err(Error::config("branch rollout horizon and batch must be at least 1"));
    }
    let mut out = Vec::with_capacity(ensembles.len() * batch);
    for ens in ensembles {
        let od = ens.obs_dim();
        let bounds = observation_bounds(ens.task.family);
        let mut state = stack((0..batch).map(|_| start_states.choose(rng).expect("non-empty").clone()), od);
        let mut rollouts: Vec<ModelRollout> =
            (0..batch).map(|_| ModelRollout { task_id: ens.task_id, steps: Vec::with_capacity(horizon) }).collect();
        for _ in 0..horizon {
            let action = policy(&state)?;
            if action.dim() != (batch, ens.act_dim()) {
                return Err(Error::usage("rollout policy returned actions of the wrong shape"));
            }
            let reward = ens.reward_model.predict(&state, &action);
            let uncertainty = ens.uncertainty_batch(&state, &action);
            let preds: Vec<(Array2<f64>, Array2<f64>)> = ens.members.iter().map(|m| m.predict(&state, &action)).collect();
            let mut next = Array2::zeros(state.dim());
            for i in 0..batch {
                let (mean, std) = &preds[rng.random_range(0..preds.len())];
                for j in 0..od {
                    let e: f64 = rng.sample(StandardNormal);
                    next[[i, j]] = (mean[[i, j]] + std[[i, j]] * e).clamp(bounds[j].0, bounds[j].1);
                }
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::divergence("branch rollout", format!("non-finite state in task {}", ens.task_id)));
            }
            for (i, r) in rollouts.iter_mut().enumerate() {
                r.steps.push(ModelTransition {
                    state: state.row(i).to_vec(),
                    action: action.row(i).to_vec(),
                    reward: reward[[i, 0]],
                    next_state: next.row(i).to_vec(),
                    uncertainty: uncertainty[i],
                    task_id: ens.task_id,
                });
            }
            state = next;
        }
        out.extend(rollouts);
    }
    Ok(out)
}

/// Train-split states of every dataset, the start-state pool for rollouts.
pub fn joint_start_states(datasets: &[OfflineDataset]) -> Vec<Vec<f64>> {
    datasets.iter().flat_map(|d| d.train().map(|t| t.state.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Split, Transition};
    use redaug_nn::gradcheck::{numeric_gradient, relative_error};
    use std::collections::BTreeMap;

    fn dataset_from(task: TaskSpec, task_id: u32, ts: Vec<Transition>) -> OfflineDataset {
        let mut split = BTreeMap::new();
        split.insert(1, Split::Train);
        OfflineDataset { task, task_id, transitions: ts, checkpoint_split: split }
    }

    fn random_point_mass(n: usize, damping: f64, seed: u64) -> OfflineDataset {
        use crate::envsuite::point_mass_dynamics;
        let mut rng = stream(seed, "pm-data", 0);
        let task = TaskSpec::new(Family::PointMass2d, 1.0, damping);
        let ts = (0..n)
            .map(|_| {
                let s = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let s2 = point_mass_dynamics(s, a, 1.0, damping);
                Transition {
                    state: s.to_vec(),
                    action: a.to_vec(),
                    reward: crate::envsuite::reward(Family::PointMass2d, &s, &a),
                    next_state: s2.to_vec(),
                    done: false,
                    checkpoint_id: 1,
                    task_id: 0,
                }
            })
            .collect();
        dataset_from(task, 0, ts)
    }

    fn quick_cfg() -> DynamicsConfig {
        DynamicsConfig { hidden: vec![16, 16], batch_size: 64, max_epochs: 3, ensemble_size: 2, ..Default::default() }
    }

    #[test]
    fn normalization_round_trip() {
        let x = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64 * 0.7 - 2.0);
        let mut x2 = x.clone();
        x2.column_mut(2).fill(4.0);
        for data in [x, x2] {
            let n = Normalizer::fit(&data);
            let back = n.denormalize(&n.normalize(&data));
            assert!((&back - &data).iter().all(|d| d.abs() < 1e-6));
        }
    }

    #[test]
    fn constant_dimension_keeps_unit_scale() {
        let x = Array2::from_elem((5, 2), 3.0);
        assert_eq!(Normalizer::fit(&x).std, vec![1.0, 1.0]);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = stream(2, "g", 0);
        let m = GaussianDynamicsModel::new(3, 1, &[5, 4], Normalizer::identity(4), Normalizer::identity(3), &mut rng);
        let x = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (v, g) = m.nll_with(&m.params, &x, &y);
        assert!((v - m.nll_value(&m.params, &x, &y)).abs() < 1e-10);
        let num = numeric_gradient(&m.params, 1e-6, |p| m.nll_with(p, &x, &y).0);
        let flat: Vec<f64> = g.iter().flat_map(|a| a.iter().copied()).collect();
        assert!(relative_error(&flat, &num) < 1e-4);
    }

    #[test]
    fn residual_consistency_and_clamped_log_std() {
        let mut rng = stream(3, "r", 0);
        let m = GaussianDynamicsModel::new(4, 2, &[8], Normalizer::identity(6), Normalizer::identity(4), &mut rng);
        let s = Array2::from_shape_fn((6, 4), |_| rng.random_range(-100.0..100.0));
        let a = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let (next, _) = m.predict(&s, &a);
        let (delta, std) = m.predict_delta(&s, &a);
        let residual = &next - &s;
        assert!(residual.iter().zip(&delta).all(|(r, d)| (r - d).abs() <= 1e-12 * (1.0 + d.abs().max(100.0))));
        assert!(std.iter().all(|v| (LOG_STD_MIN.exp()..=LOG_STD_MAX.exp()).contains(v)));
        for raw in [-1e6, -30.0, 0.0, 30.0, 1e6] {
            let c = soft_clamp(raw);
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&c));
        }
    }

    #[test]
    fn repeated_transition_drives_std_to_floor() {
        let task = TaskSpec::new(Family::PointMass2d, 1.0, 1.0);
        let t = Transition {
            state: vec![0.5, -0.5, 0.2, 0.1],
            action: vec![0.3, -0.7],
            reward: -1.0,
            next_state: vec![0.51, -0.49, 0.25, 0.05],
            done: false,
            checkpoint_id: 1,
            task_id: 0,
        };
        let d = dataset_from(task, 0, vec![t.clone(); 64]);
        let cfg = DynamicsConfig { hidden: vec![16], batch_size: 64, max_epochs: 200, steps_per_epoch: Some(50), ensemble_size: 1, ..Default::default() };
        let reward = fit_reward(&[&d], &quick_cfg(), 0).unwrap();
        let ens = fit_dynamics(&d, reward, &cfg, 0).unwrap();
        let s = Array2::from_shape_vec((1, 4), t.state.clone()).unwrap();
        let a = Array2::from_shape_vec((1, 2), t.action.clone()).unwrap();
        let (delta, std) = ens.members[0].predict_delta(&s, &a);
        for j in 0..4 {
            let err = (delta[[0, j]] - (t.next_state[j] - t.state[j])).abs();
            assert!(err < 5e-3, "dim {j}: {err}");
        }
        // Targets are constant, so their scale is 1: std approaches e^-10.
        assert!(std.iter().all(|&v| v < 1e-2), "{std:?}");
    }

    #[test]
    fn uncertainty_is_max_over_members() {
        let d = random_point_mass(300, 0.0, 1);
        let reward = fit_reward(&[&d], &quick_cfg(), 0).unwrap();
        let ens = fit_dynamics(&d, reward, &DynamicsConfig { ensemble_size: 3, ..quick_cfg() }, 0).unwrap();
        let s = [0.3, 0.1, -0.2, 0.4];
        let a = [0.5, -0.5];
        let norms: Vec<f64> = ens
            .members
            .iter()
            .map(|m| {
                let mut single = ens.clone();
                single.members = vec![m.clone()];
                single.uncertainty(&s, &a)
            })
            .collect();
        let u = ens.uncertainty(&s, &a);
        assert_eq!(u, norms.iter().cloned().fold(0.0, f64::max));
        assert!(u >= 0.0);
        let mut rev = ens.clone();
        rev.members.reverse();
        assert_eq!(rev.uncertainty(&s, &a), u);
        let mut fewer = ens.clone();
        fewer.members.pop();
        assert!(fewer.uncertainty(&s, &a) <= u);
    }

    #[test]
    fn reward_model_learns_a_constant() {
        let mut d = random_point_mass(300, 1.0, 2);
        for t in &mut d.transitions {
            t.reward = -2.5;
        }
        let cfg = DynamicsConfig { lr: 3e-4, max_epochs: 400, steps_per_epoch: Some(50), ..quick_cfg() };
        let r = fit_reward(&[&d], &cfg, 0).unwrap();
        let (s, a, _, _) = train_arrays(d.transitions.iter().take(20), 4, 2);
        assert!(r.predict(&s, &a).iter().all(|v| (v + 2.5).abs() < 1e-3), "{:?}", r.predict(&s, &a));
    }

    #[test]
    fn rollouts_are_tagged_counted_and_deterministic() {
        let d0 = random_point_mass(200, 0.0, 3);
        let mut d1 = random_point_mass(200, 0.0, 4);
        d1.task_id = 7;
        let reward = fit_reward(&[&d0, &d1], &quick_cfg(), 0).unwrap();
        let e0 = fit_dynamics(&d0, reward.clone(), &quick_cfg(), 0).unwrap();
        let e1 = fit_dynamics(&d1, reward, &quick_cfg(), 0).unwrap();
        let starts = joint_start_states(&[d0, d1]);
        let mut zero = |s: &Array2<f64>| Ok(Array2::zeros((s.nrows(), 2)));
        let run = |h: usize, policy: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>| {
            branch_rollout(&[e0.clone(), e1.clone()], policy, &starts, h, 9, &mut stream(5, "roll", 0)).unwrap()
        };
        let one = run(1, &mut zero);
        assert_eq!(one.len(), 18);
        assert_eq!(one.iter().map(|r| r.steps.len()).sum::<usize>(), 18);
        assert!(one[..9].iter().all(|r| r.task_id == 0 && r.steps.iter().all(|t| t.task_id == 0)));
        assert!(one[9..].iter().all(|r| r.task_id == 7 && r.steps.iter().all(|t| t.task_id == 7)));
        let five = run(5, &mut zero);
        assert_eq!(five, run(5, &mut zero));
        assert!(five.iter().all(|r| r.steps.len() == 5 && r.steps.iter().all(|t| t.uncertainty >= 0.0)));
        for r in &five {
            for w in r.steps.windows(2) {
                assert_eq!(w[0].next_state, w[1].state);
            }
        }
        assert!(branch_rollout(&[e0], &mut zero, &[], 1, 1, &mut stream(0, "x", 0)).is_err());
    }

    #[test]
    fn ensemble_round_trip() {
        let d = random_point_mass(200, 0.0, 6);
        let reward = fit_reward(&[&d], &quick_cfg(), 0).unwrap();
        let ens = fit_dynamics(&d, reward, &quick_cfg(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path(), &quick_cfg().hidden).unwrap();
        assert_eq!(DynamicsEnsemble::load(dir.path()).unwrap(), ens);
    }

    #[test]
    fn invalid_ensemble_size_is_rejected() {
        let d = random_point_mass(50, 0.0, 6);
        let reward = fit_reward(&[&d], &quick_cfg(), 0).unwrap();
        let cfg = DynamicsConfig { ensemble_size: 0, ..quick_cfg() };
        assert!(matches!(fit_dynamics(&d, reward, &cfg, 0), Err(Error::Config(_))));
    }
}
