//! Soft actor-critic with a squashed-Gaussian actor, twin critics, target
//! critics and a learned entropy temperature.
//!
//! The same learner backs three roles: online behavior policies, the
//! adversarial policy inside learned models, and the offline meta-policy. The
//! last one adds an optional task-embedding input (`cond`) and a
//! behavior-cloning term with `|Q|` normalization of the actor objective.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use redaug_nn::{tape::softplus, Activation, Adam, AdamConfig, Bound, Mlp, ParamSet, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub init_alpha: f64,
    pub learn_alpha: bool,
    /// Defaults to `-act_dim` when unset.
    pub target_entropy: Option<f64>,
    pub bc_weight: f64,
    /// Divide the actor's SAC term by the detached batch mean of `|Q|`.
    pub normalize_q: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            init_alpha: 0.2,
            learn_alpha: true,
            target_entropy: None,
            bc_weight: 0.0,
            normalize_q: false,
        }
    }
}

/// One minibatch. `cond`/`next_cond` may have zero columns.
#[derive(Clone, Debug)]
pub struct SacBatch {
    pub obs: Array2<f64>,
    pub cond: Array2<f64>,
    pub action: Array2<f64>,
    pub reward: Array2<f64>,
    pub next_obs: Array2<f64>,
    pub next_cond: Array2<f64>,
    /// `1 - terminal`, per row.
    pub not_done: Array2<f64>,
}

impl SacBatch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard-normal draws for the reparameterized actions of one update.
#[derive(Clone, Debug)]
pub struct SacNoise {
    pub next: Array2<f64>,
    pub current: Array2<f64>,
}

impl SacNoise {
    pub fn sample(rows: usize, act_dim: usize, rng: &mut Rng) -> Self {
        let mut draw = || Array2::from_shape_fn((rows, act_dim), |_| rng.sample::<f64, _>(StandardNormal));
        let next = draw();
        let current = draw();
        Self { next, current }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
}

#[derive(Clone, Debug)]
pub struct SacAgent {
    pub config: SacConfig,
    pub obs_dim: usize,
    pub cond_dim: usize,
    pub act_dim: usize,
    actor: Mlp,
    pub actor_params: ParamSet,
    actor_opt: Adam,
    critic: Mlp,
    pub q1: ParamSet,
    pub q2: ParamSet,
    pub q1_target: ParamSet,
    pub q2_target: ParamSet,
    q1_opt: Adam,
    q2_opt: Adam,
    pub log_alpha: f64,
    alpha_opt: Adam,
    alpha_param: ParamSet,
}

/// Row-wise `[a | b]`, tolerating zero-width parts.
pub fn hcat(parts: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().filter(|p| p.ncols() > 0).map(|p| p.view()).collect();
    if views.is_empty() {
        return Array2::zeros((parts.first().map_or(0, |p| p.nrows()), 0));
    }
    concatenate(Axis(1), &views).expect("hcat: row counts differ")
}

fn log_std_from_raw(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

/// `log(1 - tanh(u)^2)` in a form that does not lose precision for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

impl SacAgent {
    pub fn new(obs_dim: usize, cond_dim: usize, act_dim: usize, config: SacConfig, rng: &mut Rng) -> Self {
        let mut actor_params = ParamSet::new();
        let actor = Mlp::new(&mut actor_params, obs_dim + cond_dim, &config.hidden, 2 * act_dim, Activation::Relu, rng);
        let mut q1 = ParamSet::new();
        let critic = Mlp::new(&mut q1, obs_dim + cond_dim + act_dim, &config.hidden, 1, Activation::Relu, rng);
        let mut q2 = ParamSet::new();
        let critic2 = Mlp::new(&mut q2, obs_dim + cond_dim + act_dim, &config.hidden, 1, Activation::Relu, rng);
        debug_assert_eq!(critic, critic2);
        let mut alpha_param = ParamSet::new();
        let log_alpha = config.init_alpha.ln();
        alpha_param.push(Array2::from_elem((1, 1), log_alpha));
        Self {
            actor_opt: Adam::new(&actor_params, AdamConfig::with_lr(config.actor_lr)),
            q1_opt: Adam::new(&q1, AdamConfig::with_lr(config.critic_lr)),
            q2_opt: Adam::new(&q2, AdamConfig::with_lr(config.critic_lr)),
            alpha_opt: Adam::new(&alpha_param, AdamConfig::with_lr(config.alpha_lr)),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            obs_dim,
            cond_dim,
            act_dim,
            actor,
            actor_params,
            critic,
            q1,
            q2,
            log_alpha,
            alpha_param,
            config,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.act_dim as f64))
    }

    fn check_input(&self, obs: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
        if obs.ncols() != self.obs_dim || cond.ncols() != self.cond_dim || obs.nrows() != cond.nrows() {
            return Err(Error::usage(format!(
                "policy expects obs {} + cond {} columns, got {} + {} ({} vs {} rows)",
                self.obs_dim,
                self.cond_dim,
                obs.ncols(),
                cond.ncols(),
                obs.nrows(),
                cond.nrows()
            )));
        }
        Ok(())
    }

    /// Reparameterized sample and its log-density, off-tape.
    pub fn sample_eval(&self, obs: &Array2<f64>, cond: &Array2<f64>, noise: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        sample_from(&self.actor, &self.actor_params, self.act_dim, obs, cond, noise)
    }

    /// Actions for a batch of states; `deterministic` returns the squashed mean.
    pub fn act_batch(
        &self,
        obs: &Array2<f64>,
        cond: &Array2<f64>,
        deterministic: bool,
        rng: &mut Rng,
    ) -> Result<Array2<f64>> {
        self.check_input(obs, cond)?;
        Ok(act_from(&self.actor, &self.actor_params, self.act_dim, obs, cond, deterministic, rng))
    }

    pub fn act(&self, obs: &[f64], cond: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row");
        let c = Array2::from_shape_vec((1, cond.len()), cond.to_vec()).expect("row");
        Ok(self.act_batch(&o, &c, deterministic, rng)?.row(0).to_vec())
    }

    fn q_eval(&self, params: &ParamSet, obs: &Array2<f64>, cond: &Array2<f64>, action: &Array2<f64>) -> Array2<f64> {
        self.critic.eval(params, &hcat(&[obs, cond, action]))
    }

    /// Q-values of the first critic, off-tape.
    pub fn q_values(&self, obs: &Array2<f64>, cond: &Array2<f64>, action: &Array2<f64>) -> Array2<f64> {
        self.q_eval(&self.q1, obs, cond, action)
    }

    /// Entropy-regularized Bellman targets from the target critics.
    pub fn critic_targets(&self, batch: &SacBatch, noise_next: &Array2<f64>) -> Array2<f64> {
        let (next_a, next_logp) = self.sample_eval(&batch.next_obs, &batch.next_cond, noise_next);
        let t1 = self.q_eval(&self.q1_target, &batch.next_obs, &batch.next_cond, &next_a);
        let t2 = self.q_eval(&self.q2_target, &batch.next_obs, &batch.next_cond, &next_a);
        let alpha = self.alpha();
        let mut y = batch.reward.clone();
        for i in 0..y.nrows() {
            let v = t1[[i, 0]].min(t2[[i, 0]]) - alpha * next_logp[[i, 0]];
            y[[i, 0]] += self.config.gamma * batch.not_done[[i, 0]] * v;
        }
        y
    }

    /// Twin-critic squared Bellman error for the given critic parameters and
    /// fixed targets. Returns the loss and the gradients for `q1` and `q2`.
    pub fn critic_loss_with(
        &self,
        q1: &ParamSet,
        q2: &ParamSet,
        batch: &SacBatch,
        targets: &Array2<f64>,
    ) -> (f64, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let x = tape.constant(hcat(&[&batch.obs, &batch.cond, &batch.action]));
        let y = tape.constant(targets.clone());
        let b1 = q1.bind(&mut tape);
        let b2 = q2.bind(&mut tape);
        let l1 = self.critic_mse(&mut tape, &b1, x, y);
        let l2 = self.critic_mse(&mut tape, &b2, x, y);
        let loss = tape.add(l1, l2);
        let g = tape.backward(loss);
        (tape.item(loss), q1.grads(&b1, &g), q2.grads(&b2, &g))
    }

    fn critic_mse(&self, tape: &mut Tape, bound: &Bound, x: Var, y: Var) -> Var {
        let q = self.critic.forward(tape, bound, x);
        let d = tape.sub(q, y);
        let sq = tape.square(d);
        tape.mean(sq)
    }

    /// Records the reparameterized action and log-density on `tape`.
    fn sample_on_tape(&self, tape: &mut Tape, bound: &Bound, input: Var, noise: &Array2<f64>) -> (Var, Var, Var) {
        let a = self.act_dim;
        let out = self.actor.forward(tape, bound, input);
        let mu = tape.slice_cols(out, 0, a);
        let raw = tape.slice_cols(out, a, 2 * a);
        let t = tape.tanh(raw);
        let t = tape.add_scalar(t, 1.0);
        let t = tape.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
        let log_std = tape.add_scalar(t, LOG_STD_MIN);
        let std = tape.exp(log_std);
        let eps = tape.constant(noise.clone());
        let spread = tape.mul(std, eps);
        let u = tape.add(mu, spread);
        let action = tape.tanh(u);
        // log pi = sum_j [-eps^2/2 - log_std - ln(2 pi)/2 - 2 (ln 2 - u - softplus(-2u))]
        let m2u = tape.scale(u, -2.0);
        let sp = tape.softplus(m2u);
        let u_plus_sp = tape.add(u, sp);
        let corr = tape.scale(u_plus_sp, 2.0);
        let gauss = tape.constant(noise.mapv(|e| -0.5 * e * e - 0.5 * (2.0 * PI).ln() - 2.0 * LN_2));
        let lp = tape.sub(gauss, log_std);
        let lp = tape.add(lp, corr);
        let logp = tape.row_sum(lp);
        (action, logp, mu)
    }

    /// Actor objective for the given actor parameters with critics held fixed.
    ///
    /// `q_scale` overrides the `|Q|` normalizer (used to hold it constant under
    /// finite differences); otherwise it is the detached batch mean of `|Q|`
    /// when `normalize_q` is set, and 1 otherwise. Returns the loss, actor
    /// gradients, mean log-density and mean Q.
    pub fn actor_loss_with(
        &self,
        actor: &ParamSet,
        batch: &SacBatch,
        noise: &Array2<f64>,
        q_scale: Option<f64>,
    ) -> (f64, Vec<Array2<f64>>, f64, f64) {
        let mut tape = Tape::new();
        let ba = actor.bind(&mut tape);
        let obs = tape.constant(batch.obs.clone());
        let input = if self.cond_dim > 0 {
            let cond = tape.constant(batch.cond.clone());
            tape.concat_cols(&[obs, cond])
        } else {
            obs
        };
        let (action, logp, mu) = self.sample_on_tape(&mut tape, &ba, input, noise);
        let q_in = tape.concat_cols(&[input, action]);
        let c1 = self.q1.bind_constant(&mut tape);
        let c2 = self.q2.bind_constant(&mut tape);
        let q1 = self.critic.forward(&mut tape, &c1, q_in);
        let q2 = self.critic.forward(&mut tape, &c2, q_in);
        let q = tape.minimum(q1, q2);
        let q_vals = tape.value(q);
        let mean_q = q_vals.mean().unwrap_or(0.0);
        let scale = q_scale.unwrap_or_else(|| {
            if self.config.normalize_q {
                q_vals.mapv(f64::abs).mean().unwrap_or(1.0).max(1e-6)
            } else {
                1.0
            }
        });
        let ent = tape.scale(logp, self.alpha());
        let diff = tape.sub(ent, q);
        let sac = tape.mean(diff);
        let mut loss = tape.scale(sac, 1.0 / scale);
        if self.config.bc_weight > 0.0 {
            let mean_action = tape.tanh(mu);
            let data = tape.constant(batch.action.clone());
            let d = tape.sub(mean_action, data);
            let sq = tape.square(d);
            let mse = tape.mean(sq);
            let bc = tape.scale(mse, self.config.bc_weight);
            loss = tape.add(loss, bc);
        }
        let mean_logp = tape.value(logp).mean().unwrap_or(0.0);
        let g = tape.backward(loss);
        (tape.item(loss), actor.grads(&ba, &g), mean_logp, mean_q)
    }

    /// One SAC round: temperature, critics, actor, then Polyak targets.
    pub fn update(&mut self, batch: &SacBatch, noise: &SacNoise) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::usage("empty SAC batch"));
        }
        self.check_input(&batch.obs, &batch.cond)?;

        let targets = self.critic_targets(batch, &noise.next);
        let (critic_loss, g1, g2) = self.critic_loss_with(&self.q1, &self.q2, batch, &targets);
        if !critic_loss.is_finite() {
            return Err(Error::divergence("sac critic", format!("loss = {critic_loss}")));
        }
        self.q1_opt.step(&mut self.q1, &g1).map_err(|e| Error::divergence("sac critic", e.to_string()))?;
        self.q2_opt.step(&mut self.q2, &g2).map_err(|e| Error::divergence("sac critic", e.to_string()))?;

        let (actor_loss, ga, mean_logp, mean_q) = self.actor_loss_with(&self.actor_params, batch, &noise.current, None);
        if !actor_loss.is_finite() {
            return Err(Error::divergence("sac actor", format!("loss = {actor_loss}")));
        }
        self.actor_opt
            .step(&mut self.actor_params, &ga)
            .map_err(|e| Error::divergence("sac actor", e.to_string()))?;

        if self.config.learn_alpha {
            // d/d(log alpha) of -log_alpha * (log pi + H_target)
            let grad = -(mean_logp + self.target_entropy());
            self.alpha_opt
                .step(&mut self.alpha_param, &[Array2::from_elem((1, 1), grad)])
                .map_err(|e| Error::divergence("sac temperature", e.to_string()))?;
            let la = &mut self.alpha_param.get_mut(redaug_nn::ParamId(0))[[0, 0]];
            *la = la.clamp(-20.0, 5.0);
            self.log_alpha = *la;
        }

        self.q1_target.soft_update_from(&self.q1, self.config.tau);
        self.q2_target.soft_update_from(&self.q2, self.config.tau);
        Ok(UpdateStats { critic_loss, actor_loss, alpha: self.alpha(), mean_q })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = SacManifest {
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            cond_dim: self.cond_dim,
            act_dim: self.act_dim,
            log_alpha: self.log_alpha,
            actor_shapes: self.actor_params.shapes(),
            critic_shapes: self.q1.shapes(),
        };
        std::fs::write(dir.join("policy.json"), serde_json::to_string_pretty(&manifest)?)?;
        self.actor_params.write_blob(&dir.join("actor.bin"))?;
        self.q1.write_blob(&dir.join("q1.bin"))?;
        self.q2.write_blob(&dir.join("q2.bin"))?;
        self.q1_target.write_blob(&dir.join("q1_target.bin"))?;
        self.q2_target.write_blob(&dir.join("q2_target.bin"))?;
        Ok(())
    }

    /// Restores parameters and temperature. Optimizer moments restart at zero.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("policy.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        let m: SacManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
        let mut rng = crate::rng::stream(0, "sac-load", 0);
        let mut agent = SacAgent::new(m.obs_dim, m.cond_dim, m.act_dim, m.config, &mut rng);
        if agent.actor_params.shapes() != m.actor_shapes || agent.q1.shapes() != m.critic_shapes {
            return Err(Error::load(&path, "network shapes do not match the stored config"));
        }
        agent.actor_params = ParamSet::read_blob(&dir.join("actor.bin"), &m.actor_shapes)?;
        agent.q1 = ParamSet::read_blob(&dir.join("q1.bin"), &m.critic_shapes)?;
        agent.q2 = ParamSet::read_blob(&dir.join("q2.bin"), &m.critic_shapes)?;
        agent.q1_target = ParamSet::read_blob(&dir.join("q1_target.bin"), &m.critic_shapes)?;
        agent.q2_target = ParamSet::read_blob(&dir.join("q2_target.bin"), &m.critic_shapes)?;
        agent.log_alpha = m.log_alpha;
        agent.alpha_param.get_mut(redaug_nn::ParamId(0))[[0, 0]] = m.log_alpha;
        Ok(agent)
    }

    /// Copy of this agent's actor as a standalone policy.
    pub fn policy(&self) -> GaussianActor {
        GaussianActor {
            mlp: self.actor.clone(),
            params: self.actor_params.clone(),
            obs_dim: self.obs_dim,
            cond_dim: self.cond_dim,
            act_dim: self.act_dim,
        }
    }

    /// Replaces the actor parameters (e.g. with a checkpoint snapshot).
    pub fn set_actor(&mut self, params: ParamSet) -> Result<()> {
        if params.shapes() != self.actor_params.shapes() {
            return Err(Error::usage("actor snapshot has the wrong shapes"));
        }
        self.actor_params = params;
        Ok(())
    }
}

fn head_from(mlp: &Mlp, params: &ParamSet, act_dim: usize, obs: &Array2<f64>, cond: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let out = mlp.eval(params, &hcat(&[obs, cond]));
    let mu = out.slice(s![.., ..act_dim]).to_owned();
    let log_std = out.slice(s![.., act_dim..]).mapv(log_std_from_raw);
    (mu, log_std)
}

fn sample_from(
    mlp: &Mlp,
    params: &ParamSet,
    act_dim: usize,
    obs: &Array2<f64>,
    cond: &Array2<f64>,
    noise: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (mu, log_std) = head_from(mlp, params, act_dim, obs, cond);
    let n = mu.nrows();
    let mut action = Array2::zeros(mu.dim());
    let mut logp = Array2::zeros((n, 1));
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..act_dim {
            let e = noise[[i, j]];
            let ls = log_std[[i, j]];
            let u = mu[[i, j]] + ls.exp() * e;
            action[[i, j]] = u.tanh();
            lp += -0.5 * e * e - ls - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(u);
        }
        logp[[i, 0]] = lp;
    }
    (action, logp)
}

fn act_from(
    mlp: &Mlp,
    params: &ParamSet,
    act_dim: usize,
    obs: &Array2<f64>,
    cond: &Array2<f64>,
    deterministic: bool,
    rng: &mut Rng,
) -> Array2<f64> {
    if deterministic {
        return head_from(mlp, params, act_dim, obs, cond).0.mapv(f64::tanh);
    }
    let noise = Array2::from_shape_fn((obs.nrows(), act_dim), |_| rng.sample::<f64, _>(StandardNormal));
    sample_from(mlp, params, act_dim, obs, cond, &noise).0
}

/// Inference-only copy of a trained actor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActor {
    mlp: Mlp,
    pub params: ParamSet,
    pub obs_dim: usize,
    pub cond_dim: usize,
    pub act_dim: usize,
}

impl GaussianActor {
    /// Rebuilds an actor for `params` produced by an agent with this shape.
    pub fn from_params(obs_dim: usize, cond_dim: usize, act_dim: usize, hidden: &[usize], params: ParamSet) -> Result<Self> {
        let mut fresh = ParamSet::new();
        let mut rng = crate::rng::stream(0, "actor-shape", 0);
        let mlp = Mlp::new(&mut fresh, obs_dim + cond_dim, hidden, 2 * act_dim, Activation::Relu, &mut rng);
        if fresh.shapes() != params.shapes() {
            return Err(Error::usage("actor parameters do not match the requested shape"));
        }
        Ok(Self { mlp, params, obs_dim, cond_dim, act_dim })
    }

    pub fn act_batch(
        &self,
        obs: &Array2<f64>,
        cond: &Array2<f64>,
        deterministic: bool,
        rng: &mut Rng,
    ) -> Result<Array2<f64>> {
        if obs.ncols() != self.obs_dim || cond.ncols() != self.cond_dim || obs.nrows() != cond.nrows() {
            return Err(Error::usage(format!(
                "policy expects obs {} + cond {} columns, got {} + {}",
                self.obs_dim,
                self.cond_dim,
                obs.ncols(),
                cond.ncols()
            )));
        }
        Ok(act_from(&self.mlp, &self.params, self.act_dim, obs, cond, deterministic, rng))
    }

    pub fn act(&self, obs: &[f64], cond: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row");
        let c = Array2::from_shape_vec((1, cond.len()), cond.to_vec()).expect("row");
        Ok(self.act_batch(&o, &c, deterministic, rng)?.row(0).to_vec())
    }
}

#[derive(Serialize, Deserialize)]
struct SacManifest {
    config: SacConfig,
    obs_dim: usize,
    cond_dim: usize,
    act_dim: usize,
    log_alpha: f64,
    actor_shapes: Vec<(usize, usize)>,
    critic_shapes: Vec<(usize, usize)>,
}

/// Fixed-capacity FIFO of transitions for online training.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    action: Vec<f64>,
    reward: Vec<f64>,
    next_obs: Vec<f64>,
    not_done: Vec<f64>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            capacity,
            obs_dim,
            act_dim,
            obs: vec![0.0; capacity * obs_dim],
            action: vec![0.0; capacity * act_dim],
            reward: vec![0.0; capacity],
            next_obs: vec![0.0; capacity * obs_dim],
            not_done: vec![0.0; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
        let i = self.head;
        let (o, a) = (self.obs_dim, self.act_dim);
        self.obs[i * o..(i + 1) * o].copy_from_slice(obs);
        self.action[i * a..(i + 1) * a].copy_from_slice(action);
        self.reward[i] = reward;
        self.next_obs[i * o..(i + 1) * o].copy_from_slice(next_obs);
        self.not_done[i] = if terminal { 0.0 } else { 1.0 };
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> SacBatch {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len)).collect();
        let (o, a) = (self.obs_dim, self.act_dim);
        let gather = |src: &[f64], w: usize| Array2::from_shape_fn((n, w), |(r, c)| src[idx[r] * w + c]);
        SacBatch {
            obs: gather(&self.obs, o),
            cond: Array2::zeros((n, 0)),
            action: gather(&self.action, a),
            reward: gather(&self.reward, 1),
            next_obs: gather(&self.next_obs, o),
            next_cond: Array2::zeros((n, 0)),
            not_done: gather(&self.not_done, 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use redaug_nn::gradcheck::{numeric_gradient, relative_error};

    fn flat(gs: &[Array2<f64>]) -> Vec<f64> {
        gs.iter().flat_map(|g| g.iter().copied()).collect()
    }

    fn tiny_agent(cond_dim: usize, bc: f64, normalize: bool) -> SacAgent {
        let cfg = SacConfig { hidden: vec![6, 5], bc_weight: bc, normalize_q: normalize, ..SacConfig::default() };
        SacAgent::new(3, cond_dim, 2, cfg, &mut stream(11, "test", 0))
    }

    fn tiny_batch(n: usize, cond_dim: usize, seed: u64) -> SacBatch {
        let mut rng = stream(seed, "batch", 0);
        let mut m = |c: usize, scale: f64| Array2::from_shape_fn((n, c), |_| rng.random_range(-scale..scale));
        SacBatch {
            obs: m(3, 1.0),
            cond: m(cond_dim, 1.0),
            action: m(2, 0.9),
            reward: m(1, 2.0),
            next_obs: m(3, 1.0),
            next_cond: m(cond_dim, 1.0),
            not_done: Array2::ones((n, 1)),
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let agent = tiny_agent(2, 0.0, false);
        let batch = tiny_batch(4, 2, 1);
        let noise = SacNoise::sample(4, 2, &mut stream(5, "noise", 0));
        let y = agent.critic_targets(&batch, &noise.next);
        let (_, g1, g2) = agent.critic_loss_with(&agent.q1, &agent.q2, &batch, &y);
        let n1 = numeric_gradient(&agent.q1, 1e-6, |p| agent.critic_loss_with(p, &agent.q2, &batch, &y).0);
        let n2 = numeric_gradient(&agent.q2, 1e-6, |p| agent.critic_loss_with(&agent.q1, p, &batch, &y).0);
        assert!(relative_error(&flat(&g1), &n1) < 1e-4);
        assert!(relative_error(&flat(&g2), &n2) < 1e-4);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        for (bc, normalize) in [(0.0, false), (2.5, true)] {
            let agent = tiny_agent(2, bc, normalize);
            let batch = tiny_batch(4, 2, 2);
            let noise = SacNoise::sample(4, 2, &mut stream(6, "noise", 0));
            let (_, ga, _, _) = agent.actor_loss_with(&agent.actor_params, &batch, &noise.current, None);
            // Hold the |Q| normalizer at its base value: it is detached in the loss.
            let scale = if normalize {
                let (a, _) = agent.sample_eval(&batch.obs, &batch.cond, &noise.current);
                let q1 = agent.q_eval(&agent.q1, &batch.obs, &batch.cond, &a);
                let q2 = agent.q_eval(&agent.q2, &batch.obs, &batch.cond, &a);
                ndarray::Zip::from(&q1).and(&q2).map_collect(|x, y| x.min(*y).abs()).mean().unwrap()
            } else {
                1.0
            };
            let num = numeric_gradient(&agent.actor_params, 1e-6, |p| {
                agent.actor_loss_with(p, &batch, &noise.current, Some(scale)).0
            });
            let err = relative_error(&flat(&ga), &num);
            assert!(err < 1e-4, "bc={bc} err={err}");
        }
    }

    #[test]
    fn tape_sample_matches_off_tape_sample() {
        let agent = tiny_agent(0, 0.0, false);
        let batch = tiny_batch(5, 0, 3);
        let noise = SacNoise::sample(5, 2, &mut stream(7, "noise", 0));
        let (a, lp) = agent.sample_eval(&batch.obs, &batch.cond, &noise.current);
        let mut tape = Tape::new();
        let b = agent.actor_params.bind(&mut tape);
        let x = tape.constant(batch.obs.clone());
        let (ta, tlp, _) = agent.sample_on_tape(&mut tape, &b, x, &noise.current);
        assert!((tape.value(ta) - &a).iter().all(|d| d.abs() < 1e-12));
        assert!((tape.value(tlp) - &lp).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn critic_loss_decreases_on_a_fixed_batch() {
        let mut agent = tiny_agent(0, 0.0, false);
        agent.config.tau = 0.0;
        let batch = tiny_batch(16, 0, 4);
        let noise = SacNoise::sample(16, 2, &mut stream(8, "noise", 0));
        let first = agent.update(&batch, &noise).unwrap().critic_loss;
        let mut last = first;
        for _ in 0..100 {
            last = agent.update(&batch, &noise).unwrap().critic_loss;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_reward_updates_stay_finite() {
        let mut agent = tiny_agent(0, 0.0, false);
        let mut batch = tiny_batch(8, 0, 9);
        batch.reward.fill(0.0);
        let mut rng = stream(1, "n", 0);
        for _ in 0..50 {
            let s = agent.update(&batch, &SacNoise::sample(8, 2, &mut rng)).unwrap();
            assert!(s.actor_loss.is_finite() && s.critic_loss.is_finite());
        }
        assert!(agent.actor_params.is_finite());
    }

    #[test]
    fn actions_stay_in_bounds_and_determinism_holds() {
        let agent = tiny_agent(2, 0.0, false);
        let mut rng = stream(3, "act", 0);
        for _ in 0..200 {
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-10.0..10.0)).collect();
            let a = agent.act(&obs, &z, false, &mut rng).unwrap();
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
            let d1 = agent.act(&obs, &z, true, &mut rng).unwrap();
            let d2 = agent.act(&obs, &z, true, &mut rng).unwrap();
            assert_eq!(d1, d2);
        }
        let s1 = agent.act(&[0.1, 0.2, 0.3], &[0.0, 1.0], false, &mut stream(9, "a", 0)).unwrap();
        let s2 = agent.act(&[0.1, 0.2, 0.3], &[0.0, 1.0], false, &mut stream(9, "a", 0)).unwrap();
        assert_eq!(s1, s2);
        assert!(agent.act(&[0.1, 0.2], &[0.0, 1.0], true, &mut rng).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let agent = tiny_agent(2, 1.0, true);
        let dir = tempfile::tempdir().unwrap();
        agent.save(dir.path()).unwrap();
        let back = SacAgent::load(dir.path()).unwrap();
        assert_eq!(back.actor_params, agent.actor_params);
        assert_eq!(back.q2_target, agent.q2_target);
        assert_eq!(back.log_alpha, agent.log_alpha);
        assert_eq!(back.config, agent.config);
    }
}
