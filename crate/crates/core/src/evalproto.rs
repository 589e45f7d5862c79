//! Evaluation: the on-policy and off-policy context protocols, return
//! aggregation across seeds, and encoder diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{OfflineDataset, Split};
use crate::envsuite::{make_env, TaskSpec};
use crate::error::{Error, Result};
use crate::metapolicy::MetaPolicy;
use crate::rng::{derive_seed, stream};
use crate::taskrep::{relative_metric, ContextEncoder, ContextStep, ContextWindow, EmbeddingRow, WindowSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OnPolicy,
    OffPolicy,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::OnPolicy => "on_policy",
            Protocol::OffPolicy => "off_policy",
        }
    }
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, "eval-episode", episode as u64)
}

/// Runs `episodes` deterministic-policy episodes in lockstep. Before every
/// step, `z_for` supplies the embeddings of all episodes that are still
/// running.
fn run_episodes(
    policy: &MetaPolicy,
    spec: TaskSpec,
    episodes: usize,
    seed: u64,
    mut z_for: impl FnMut(usize, &[Vec<ContextStep>], &[Vec<f64>]) -> Result<Array2<f64>>,
) -> Result<Vec<f64>> {
    let mut envs = (0..episodes).map(|_| make_env(spec)).collect::<Result<Vec<_>>>()?;
    let mut obs: Vec<Vec<f64>> = envs.iter_mut().enumerate().map(|(e, env)| env.reset_seeded(episode_seed(seed, e))).collect();
    let mut history: Vec<Vec<ContextStep>> = vec![Vec::new(); episodes];
    let mut returns = vec![0.0; episodes];
    let mut rng = stream(seed, "eval-policy", 0);
    let mut t = 0;
    while envs.iter().any(|e| !e.is_done()) {
        let z = z_for(t, &history, &obs)?;
        let s = Array2::from_shape_fn((episodes, spec.obs_dim()), |(i, j)| obs[i][j]);
        let a = policy.act_batch(&s, &z, true, &mut rng)?;
        for (i, env) in envs.iter_mut().enumerate() {
            if env.is_done() {
                continue;
            }
            let action = a.row(i).to_vec();
            let step = env.step(&action)?;
            returns[i] += step.reward;
            history[i].push(ContextStep { state: obs[i].clone(), action, next_state: step.next_observation.clone() });
            obs[i] = step.next_observation;
        }
        t += 1;
    }
    Ok(returns)
}

/// Context accumulates within each episode: at step `t` the policy sees the
/// embedding of its own last `min(t, L)` transitions.
pub fn eval_on_policy(
    policy: &MetaPolicy,
    encoder: &dyn ContextEncoder,
    spec: TaskSpec,
    episodes: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let act_dim = spec.act_dim();
    run_episodes(policy, spec, episodes, seed, |_, history, obs| {
        let windows: Vec<ContextWindow> =
            history.iter().zip(obs).map(|(h, s)| ContextWindow::from_history(h, window, s, act_dim)).collect();
        encoder.encode_batch(&windows)
    })
}

/// One window from the unseen-checkpoint pool per episode, encoded once and
/// held fixed for the whole episode.
pub fn eval_off_policy(
    policy: &MetaPolicy,
    encoder: &dyn ContextEncoder,
    spec: TaskSpec,
    test_pool: &OfflineDataset,
    episodes: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if test_pool.transitions.is_empty() {
        return Err(Error::config(format!("empty test pool for task {}", spec.label())));
    }
    if let Some(t) = test_pool.transitions.iter().find(|t| test_pool.split_of(t) != Some(Split::Test)) {
        return Err(Error::config(format!(
            "test pool for task {} contains checkpoint {} which is not a held-out checkpoint",
            spec.label(),
            t.checkpoint_id
        )));
    }
    let src = WindowSource::from_transitions(&test_pool.transitions);
    let mut rng = stream(seed, "eval-off-window", 0);
    let windows = src.sample_full(episodes, window, &mut rng)?;
    let fixed = encoder.encode_batch(&windows)?;
    run_episodes(policy, spec, episodes, seed, |_, _, _| Ok(fixed.clone()))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One `d(phi)` entry for the ordered pair (own task, other task).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DPhi {
    pub own_task: u32,
    pub other_task: u32,
    /// `None` when the encoder is collapsed on this pair.
    pub value: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub d_phi: Vec<DPhi>,
    pub embeddings: Vec<EmbeddingRow>,
}

impl Diagnostics {
    /// Mean of the finite entries.
    pub fn mean_d_phi(&self) -> Option<f64> {
        let vals: Vec<f64> = self.d_phi.iter().filter_map(|d| d.value).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn any_degenerate(&self) -> bool {
        self.d_phi.iter().any(|d| d.degenerate)
    }
}

/// `d(phi)` for every ordered task pair, using train-split windows of both
/// tasks and held-out windows of the own task, plus every embedding used.
pub fn encoder_diagnostics(
    encoder: &dyn ContextEncoder,
    train: &[OfflineDataset],
    test: &[OfflineDataset],
    windows_per_set: usize,
    window: usize,
    seed: u64,
) -> Result<Diagnostics> {
    if train.len() < 2 || train.len() != test.len() {
        return Err(Error::config("diagnostics need at least 2 train tasks, each with a held-out set"));
    }
    let mut rng = stream(seed, "diagnostics", 0);
    let mut train_w = Vec::new();
    let mut test_w = Vec::new();
    for (d, t) in train.iter().zip(test) {
        train_w.push(WindowSource::from_transitions(d.train()).sample_full(windows_per_set, window, &mut rng)?);
        test_w.push(WindowSource::from_transitions(&t.transitions).sample_full(windows_per_set, window, &mut rng)?);
    }
    let mut d_phi = Vec::new();
    for i in 0..train.len() {
        for j in 0..train.len() {
            if i == j {
                continue;
            }
            let (value, degenerate) = match relative_metric(encoder, &train_w[i], &train_w[j], &test_w[i]) {
                Ok(v) => (Some(v), false),
                Err(Error::Divergence { .. }) => (None, true),
                Err(e) => return Err(e),
            };
            d_phi.push(DPhi { own_task: train[i].task_id, other_task: train[j].task_id, value, degenerate });
        }
    }
    let mut embeddings = Vec::new();
    for (k, d) in train.iter().enumerate() {
        for (split, ws) in [("train", &train_w[k]), ("test", &test_w[k])] {
            let z = encoder.encode_batch(ws)?;
            embeddings.extend(
                z.outer_iter().map(|r| EmbeddingRow { task_id: d.task_id, split: split.to_string(), z: r.to_vec() }),
            );
        }
    }
    Ok(Diagnostics { d_phi, embeddings })
}

/// Projection onto the two leading principal components, found by power
/// iteration with deflation on the covariance matrix.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if points.is_empty() {
        return Vec::new();
    }
    let d = points[0].len();
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let x = Array2::from_shape_fn((points.len(), d), |(i, j)| points[i][j] - mean[j]);
    let mut cov = x.t().dot(&x) / n;
    let mut comps = Vec::new();
    for k in 0..2.min(d) {
        let mut v = ndarray::Array1::from_shape_fn(d, |j| if j == k { 1.0 } else { 0.5 / d as f64 });
        for _ in 0..500 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = Array2::from_shape_fn((d, d), |(a, b)| lambda * v[a] * v[b]);
        cov -= &outer;
        comps.push(v);
    }
    x.outer_iter()
        .map(|r| {
            let c0 = comps.first().map_or(0.0, |c| r.dot(c));
            let c1 = comps.get(1).map_or(0.0, |c| r.dot(c));
            [c0, c1]
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Scatter plot of the projected embeddings; color by task, hollow markers
/// for held-out contexts.
pub fn embedding_svg(rows: &[EmbeddingRow]) -> String {
    let pts = pca_2d(&rows.iter().map(|r| r.z.clone()).collect::<Vec<_>>());
    let (w, h, pad) = (480.0, 480.0, 30.0);
    let span = |k: usize| {
        let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xs), (y0, ys)) = (span(0), span(1));
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (r, p) in rows.iter().zip(&pts) {
        let cx = pad + (p[0] - x0) / xs * (w - 2.0 * pad);
        let cy = h - pad - (p[1] - y0) / ys * (h - 2.0 * pad);
        let color = PALETTE[r.task_id as usize % PALETTE.len()];
        let fill = if r.split == "train" { color } else { "none" };
        let _ = writeln!(svg, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{fill}" stroke="{color}"/>"#);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean return of one trained run on one task under one protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: TaskSpec,
    pub task_label: String,
    pub seen: bool,
    pub protocol: Protocol,
    pub mean_return: f64,
}

/// Returns of one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub seed: u64,
    pub tasks: Vec<TaskEval>,
    pub d_phi: Vec<DPhi>,
    pub mean_d_phi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_label: String,
    pub seen: bool,
    pub protocol: Protocol,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub protocol: Protocol,
    pub seen: bool,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub tasks: Vec<TaskSummary>,
    pub groups: Vec<GroupSummary>,
    pub runs: Vec<RunEval>,
    pub mean_d_phi: Option<f64>,
    pub embedding_export: Vec<String>,
}

impl EvalReport {
    /// Aggregates per-seed runs. Each group mean is first averaged over the
    /// group's tasks within a seed, then over seeds.
    pub fn aggregate(variant: &str, fingerprint: &str, episodes: usize, runs: Vec<RunEval>, embedding_export: Vec<String>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::usage("a report needs at least one run"));
        }
        let mut per_task: BTreeMap<(Protocol, bool, String), Vec<f64>> = BTreeMap::new();
        let mut per_group: BTreeMap<(Protocol, bool), Vec<f64>> = BTreeMap::new();
        for run in &runs {
            let mut within: BTreeMap<(Protocol, bool), Vec<f64>> = BTreeMap::new();
            for t in &run.tasks {
                per_task.entry((t.protocol, t.seen, t.task_label.clone())).or_default().push(t.mean_return);
                within.entry((t.protocol, t.seen)).or_default().push(t.mean_return);
            }
            for (k, v) in within {
                per_group.entry(k).or_default().push(mean_std(&v).0);
            }
        }
        let tasks = per_task
            .into_iter()
            .map(|((protocol, seen, task_label), per_seed)| {
                let (mean, std) = mean_std(&per_seed);
                TaskSummary { task_label, seen, protocol, mean, std, per_seed }
            })
            .collect();
        let groups = per_group
            .into_iter()
            .map(|((protocol, seen), v)| {
                let (mean, std) = mean_std(&v);
                GroupSummary { protocol, seen, mean, std }
            })
            .collect();
        let dvals: Vec<f64> = runs.iter().filter_map(|r| r.mean_d_phi).collect();
        let mean_d_phi = (!dvals.is_empty()).then(|| mean_std(&dvals).0);
        Ok(Self {
            variant: variant.to_string(),
            fingerprint: fingerprint.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            episodes,
            tasks,
            groups,
            runs,
            mean_d_phi,
            embedding_export,
        })
    }

    pub fn group(&self, protocol: Protocol, seen: bool) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.protocol == protocol && g.seen == seen)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }
}

/// Plain-text comparison table, one row per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let cols = [
        (Protocol::OnPolicy, true, "on/seen"),
        (Protocol::OnPolicy, false, "on/unseen"),
        (Protocol::OffPolicy, true, "off/seen"),
        (Protocol::OffPolicy, false, "off/unseen"),
    ];
    let mut out = format!("{:<10}", "variant");
    for (_, _, name) in cols {
        let _ = write!(out, " {name:>20}");
    }
    let _ = writeln!(out, " {:>8}", "d_phi");
    for r in reports {
        let _ = write!(out, "{:<10}", r.variant);
        for (p, seen, _) in cols {
            match r.group(p, seen) {
                Some(g) => {
                    let _ = write!(out, " {:>20}", format!("{:.1} ± {:.1}", g.mean, g.std));
                }
                None => {
                    let _ = write!(out, " {:>20}", "-");
                }
            }
        }
        let d = r.mean_d_phi.map_or("-".to_string(), |d| format!("{d:.3}"));
        let _ = writeln!(out, " {d:>8}");
    }
    out
}

/// Uniform-random-action return on `spec`, the floor any trained policy
/// should clear.
pub fn random_policy_returns(spec: TaskSpec, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream(seed, "random-policy", 0);
    (0..episodes)
        .map(|e| {
            let mut env = make_env(spec)?;
            env.reset_seeded(episode_seed(seed, e));
            let mut ret = 0.0;
            while !env.is_done() {
                let a: Vec<f64> = (0..spec.act_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
                ret += env.step(&a)?.reward;
            }
            Ok(ret)
        })
        .collect()
}
