//! Parameterized continuous-control task families.
//!
//! Tasks within a family share the reward function and differ only in their
//! transition dynamics, through a gravity multiplier and a damping multiplier.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

pub const DT: f64 = 0.05;
pub const DEFAULT_HORIZON: usize = 100;

pub const POINT_MASS_GRAVITY: f64 = 1.0;
pub const POINT_MASS_DRAG: f64 = 0.5;
pub const POINT_MASS_GOAL: [f64; 2] = [3.0, 3.0];
pub const POINT_MASS_POS_LIMIT: f64 = 5.0;
pub const POINT_MASS_VEL_LIMIT: f64 = 10.0;

pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_FRICTION: f64 = 0.25;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(rename = "point_mass_2d")]
    PointMass2d,
    Pendulum,
}

impl Family {
    pub fn obs_dim(self) -> usize {
        match self {
            Family::PointMass2d => 4,
            Family::Pendulum => 3,
        }
    }

    pub fn act_dim(self) -> usize {
        match self {
            Family::PointMass2d => 2,
            Family::Pendulum => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::PointMass2d => "point_mass_2d",
            Family::Pendulum => "pendulum",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_mass_2d" => Ok(Family::PointMass2d),
            "pendulum" => Ok(Family::Pendulum),
            other => Err(Error::config(format!("unknown task family `{other}`"))),
        }
    }
}

/// One task instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: Family,
    pub gravity_scale: f64,
    pub damping_scale: f64,
    pub episode_horizon: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(family: Family, gravity_scale: f64, damping_scale: f64) -> Self {
        Self { family, gravity_scale, damping_scale, episode_horizon: DEFAULT_HORIZON, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gravity_scale > 0.0 && self.gravity_scale <= 10.0) {
            return Err(Error::config(format!("gravity_scale {} outside (0, 10]", self.gravity_scale)));
        }
        if !(0.0..=10.0).contains(&self.damping_scale) {
            return Err(Error::config(format!("damping_scale {} outside [0, 10]", self.damping_scale)));
        }
        if self.episode_horizon == 0 {
            return Err(Error::config("episode_horizon must be positive"));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.family.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.family.act_dim()
    }

    pub fn label(&self) -> String {
        format!("{}-g{}-d{}", self.family, self.gravity_scale, self.damping_scale)
    }
}

/// Which physical parameter a task set varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariedParameter {
    Gravity,
    Damping,
}

pub const TRAIN_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 1.5];
pub const TEST_MULTIPLIERS: [f64; 2] = [0.8, 1.2];

/// A family plus the parameter its tasks vary, e.g. `point_mass_2d-gravity`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSet {
    pub family: Family,
    pub varied: VariedParameter,
    #[serde(default = "default_horizon")]
    pub episode_horizon: usize,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

impl TaskSet {
    pub fn new(family: Family, varied: VariedParameter) -> Self {
        Self { family, varied, episode_horizon: DEFAULT_HORIZON }
    }

    /// Seen tasks (`train = true`) use multipliers 0.5/1.0/1.5, unseen tasks
    /// 0.8/1.2. The other parameter stays at 1.0.
    pub fn grid(&self, train: bool) -> Vec<TaskSpec> {
        let mults: &[f64] = if train { &TRAIN_MULTIPLIERS } else { &TEST_MULTIPLIERS };
        let offset = if train { 0 } else { TRAIN_MULTIPLIERS.len() as u64 };
        mults
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let (g, d) = match self.varied {
                    VariedParameter::Gravity => (m, 1.0),
                    VariedParameter::Damping => (1.0, m),
                };
                TaskSpec {
                    family: self.family,
                    gravity_scale: g,
                    damping_scale: d,
                    episode_horizon: self.episode_horizon,
                    seed: offset + i as u64,
                }
            })
            .collect()
    }

    pub fn name(&self) -> String {
        let p = match self.varied {
            VariedParameter::Gravity => "gravity",
            VariedParameter::Damping => "damping",
        };
        format!("{}-{p}", self.family)
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (fam, param) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::config(format!("task set `{s}` is not of the form <family>-<gravity|damping>")))?;
        let varied = match param {
            "gravity" => VariedParameter::Gravity,
            "damping" => VariedParameter::Damping,
            other => return Err(Error::config(format!("unknown varied parameter `{other}`"))),
        };
        Ok(TaskSet::new(fam.parse()?, varied))
    }
}

pub fn task_grid(set: &TaskSet, train: bool) -> Vec<TaskSpec> {
    set.grid(train)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Task reward as a function of the pre-step observation and the raw action.
/// It never reads task parameters, so every task of a family shares it.
pub fn reward(family: Family, obs: &[f64], action: &[f64]) -> f64 {
    let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    match family {
        Family::PointMass2d => {
            let dx = obs[0] - POINT_MASS_GOAL[0];
            let dy = obs[1] - POINT_MASS_GOAL[1];
            -(dx * dx + dy * dy).sqrt()
        }
        Family::Pendulum => {
            let theta = obs[1].atan2(obs[0]);
            let torque = PENDULUM_MAX_TORQUE * a[0];
            -(theta * theta + 0.1 * obs[2] * obs[2] + 0.001 * torque * torque)
        }
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// One semi-implicit Euler step of the point mass; `state = [x, y, vx, vy]`.
pub fn point_mass_dynamics(state: [f64; 4], force: [f64; 2], gravity_scale: f64, damping_scale: f64) -> [f64; 4] {
    let c = damping_scale * POINT_MASS_DRAG;
    let g = POINT_MASS_GRAVITY * gravity_scale;
    let vx = (state[2] + DT * (force[0] - c * state[2])).clamp(-POINT_MASS_VEL_LIMIT, POINT_MASS_VEL_LIMIT);
    let vy = (state[3] + DT * (force[1] - g - c * state[3])).clamp(-POINT_MASS_VEL_LIMIT, POINT_MASS_VEL_LIMIT);
    let x = (state[0] + DT * vx).clamp(-POINT_MASS_POS_LIMIT, POINT_MASS_POS_LIMIT);
    let y = (state[1] + DT * vy).clamp(-POINT_MASS_POS_LIMIT, POINT_MASS_POS_LIMIT);
    [x, y, vx, vy]
}

/// One step of the torque-driven pendulum; `state = [theta, theta_dot]`, with
/// `theta = 0` upright.
pub fn pendulum_dynamics(state: [f64; 2], torque: f64, gravity_scale: f64, damping_scale: f64) -> [f64; 2] {
    let [theta, theta_dot] = state;
    let g = PENDULUM_GRAVITY * gravity_scale;
    let (m, l) = (PENDULUM_MASS, PENDULUM_LENGTH);
    let accel = 3.0 * g / (2.0 * l) * theta.sin() + 3.0 / (m * l * l) * torque
        - damping_scale * PENDULUM_FRICTION * theta_dot;
    let new_dot = (theta_dot + DT * accel).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    [wrap_angle(theta + DT * new_dot), new_dot]
}

/// Stateful environment for one [`TaskSpec`].
#[derive(Clone, Debug)]
pub struct Environment {
    spec: TaskSpec,
    physical: Vec<f64>,
    step_index: usize,
    done: bool,
    started: bool,
    rng: Rng,
}

pub fn make_env(spec: TaskSpec) -> Result<Environment> {
    spec.validate()?;
    Ok(Environment {
        spec,
        physical: vec![0.0; match spec.family {
            Family::PointMass2d => 4,
            Family::Pendulum => 2,
        }],
        step_index: 0,
        done: false,
        started: false,
        rng: stream(spec.seed, "env-reset", 0),
    })
}

impl Environment {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.spec.act_dim()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts an episode from the initial-state distribution, continuing this
    /// environment's own seeded stream.
    pub fn reset(&mut self) -> Vec<f64> {
        let mut rng = std::mem::replace(&mut self.rng, stream(0, "", 0));
        let obs = self.reset_with(&mut rng);
        self.rng = rng;
        obs
    }

    /// Starts an episode whose initial state depends only on `seed`.
    pub fn reset_seeded(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "env-reset-seeded", self.spec.seed);
        self.reset_with(&mut rng)
    }

    fn reset_with(&mut self, rng: &mut Rng) -> Vec<f64> {
        self.physical = match self.spec.family {
            Family::PointMass2d => {
                vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0, 0.0]
            }
            Family::Pendulum => vec![wrap_angle(rng.random_range(-PI..=PI)), rng.random_range(-1.0..=1.0)],
        };
        self.step_index = 0;
        self.done = false;
        self.started = true;
        self.observation()
    }

    /// Places the environment in a given physical state (`[x, y, vx, vy]` or
    /// `[theta, theta_dot]`) at step 0.
    pub fn set_physical_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.physical.len() {
            return Err(Error::usage(format!(
                "physical state has {} entries, expected {}",
                state.len(),
                self.physical.len()
            )));
        }
        self.physical = state.to_vec();
        self.step_index = 0;
        self.done = false;
        self.started = true;
        Ok(())
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.spec.family {
            Family::PointMass2d => self.physical.clone(),
            Family::Pendulum => {
                let th = self.physical[0];
                vec![th.cos(), th.sin(), self.physical[1]]
            }
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if !self.started {
            return Err(Error::usage("step called before reset"));
        }
        if self.done {
            return Err(Error::usage("step called after episode end"));
        }
        if action.len() != self.act_dim() {
            return Err(Error::usage(format!("action has {} entries, expected {}", action.len(), self.act_dim())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::usage("action contains non-finite entries"));
        }
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let obs = self.observation();
        let r = reward(self.spec.family, &obs, &a);
        let (g, d) = (self.spec.gravity_scale, self.spec.damping_scale);
        self.physical = match self.spec.family {
            Family::PointMass2d => {
                let s = [self.physical[0], self.physical[1], self.physical[2], self.physical[3]];
                point_mass_dynamics(s, [a[0], a[1]], g, d).to_vec()
            }
            Family::Pendulum => {
                let s = [self.physical[0], self.physical[1]];
                pendulum_dynamics(s, PENDULUM_MAX_TORQUE * a[0], g, d).to_vec()
            }
        };
        self.step_index += 1;
        self.done = self.step_index >= self.spec.episode_horizon;
        Ok(StepResult { next_observation: self.observation(), reward: r, done: self.done })
    }
}
