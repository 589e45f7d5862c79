//! Task representation: context windows, the attention context encoder,
//! the InfoNCE objective, the per-step adversarial reward and the relative
//! representation metric.
//!
//! A context window holds up to `L` consecutive transitions of one task.
//! Tokens are `(s, a, s' - s)`; the query comes from the current observation
//! and the previous action and also occupies attention slot 0, so a window
//! with every slot masked still has a well-defined embedding.

use std::cell::Cell;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use redaug_nn::{Adam, AdamConfig, Bound, LayerNorm, Linear, ParamSet, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::Transition;
use crate::dynamics::{ModelRollout, Normalizer};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// One `(s, a, s')` token source.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

impl From<&Transition> for ContextStep {
    fn from(t: &Transition) -> Self {
        Self { state: t.state.clone(), action: t.action.clone(), next_state: t.next_state.clone() }
    }
}

/// Up to `L` steps plus a validity mask; `mask[i] == false` marks padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub steps: Vec<ContextStep>,
    pub mask: Vec<bool>,
    pub query_state: Vec<f64>,
    pub query_prev_action: Vec<f64>,
}

impl ContextWindow {
    /// A window whose steps are all valid.
    pub fn new(steps: Vec<ContextStep>, query_state: Vec<f64>, query_prev_action: Vec<f64>) -> Self {
        let mask = vec![true; steps.len()];
        Self { steps, mask, query_state, query_prev_action }
    }

    /// The window used after `history`: the last `min(len, L)` steps, queried
    /// at the state reached after the final step.
    pub fn from_history(history: &[ContextStep], window: usize, start_state: &[f64], act_dim: usize) -> Self {
        let from = history.len().saturating_sub(window);
        let steps = history[from..].to_vec();
        match history.last() {
            Some(last) => {
                let (q, a) = (last.next_state.clone(), last.action.clone());
                Self::new(steps, q, a)
            }
            None => Self::new(Vec::new(), start_state.to_vec(), vec![0.0; act_dim]),
        }
    }

    /// Prefix `t` of a model rollout: its first `t` steps, queried at `s_t`.
    pub fn rollout_prefix(rollout: &ModelRollout, t: usize) -> Self {
        let steps: Vec<ContextStep> = rollout.steps[..t]
            .iter()
            .map(|m| ContextStep { state: m.state.clone(), action: m.action.clone(), next_state: m.next_state.clone() })
            .collect();
        let act_dim = rollout.steps.first().map_or(0, |s| s.action.len());
        let (q, a) = if t == 0 {
            (rollout.steps[0].state.clone(), vec![0.0; act_dim])
        } else {
            (rollout.steps[t - 1].next_state.clone(), rollout.steps[t - 1].action.clone())
        };
        Self::new(steps, q, a)
    }

    /// Pads with masked zero steps up to `len` slots.
    pub fn padded(mut self, len: usize, obs_dim: usize, act_dim: usize) -> Self {
        while self.steps.len() < len {
            self.steps.push(ContextStep { state: vec![0.0; obs_dim], action: vec![0.0; act_dim], next_state: vec![0.0; obs_dim] });
            self.mask.push(false);
        }
        self
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn validate(&self, obs_dim: usize, act_dim: usize) -> Result<()> {
        if self.mask.len() != self.steps.len() {
            return Err(Error::usage("context window mask length differs from its step count"));
        }
        if self.query_state.len() != obs_dim || self.query_prev_action.len() != act_dim {
            return Err(Error::usage(format!(
                "context query has dims ({}, {}), encoder expects ({obs_dim}, {act_dim})",
                self.query_state.len(),
                self.query_prev_action.len()
            )));
        }
        for s in &self.steps {
            if s.state.len() != obs_dim || s.next_state.len() != obs_dim || s.action.len() != act_dim {
                return Err(Error::usage("context step dimensions do not match the encoder"));
            }
        }
        Ok(())
    }
}

/// Steps of one task in storage order, cut into episodes.
#[derive(Clone, Debug)]
pub struct WindowSource {
    pub steps: Vec<ContextStep>,
    segments: Vec<Range<usize>>,
    segment_of: Vec<usize>,
}

impl WindowSource {
    /// An episode ends at `done` or where the next record does not continue
    /// from this record's next state.
    pub fn from_transitions<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Self {
        let ts: Vec<&Transition> = transitions.into_iter().collect();
        let mut segments = Vec::new();
        let mut start = 0;
        for i in 0..ts.len() {
            let boundary = ts[i].done || i + 1 == ts.len() || ts[i].next_state != ts[i + 1].state;
            if boundary {
                segments.push(start..i + 1);
                start = i + 1;
            }
        }
        let steps = ts.iter().map(|t| ContextStep::from(*t)).collect();
        Self::with_segments(steps, segments)
    }

    /// Each rollout is its own episode.
    pub fn from_rollouts<'a>(rollouts: impl IntoIterator<Item = &'a ModelRollout>) -> Self {
        let mut steps = Vec::new();
        let mut segments = Vec::new();
        for r in rollouts {
            let start = steps.len();
            steps.extend(r.steps.iter().map(|m| ContextStep {
                state: m.state.clone(),
                action: m.action.clone(),
                next_state: m.next_state.clone(),
            }));
            if steps.len() > start {
                segments.push(start..steps.len());
            }
        }
        Self::with_segments(steps, segments)
    }

    fn with_segments(steps: Vec<ContextStep>, segments: Vec<Range<usize>>) -> Self {
        let mut segment_of = vec![0; steps.len()];
        for (k, seg) in segments.iter().enumerate() {
            for i in seg.clone() {
                segment_of[i] = k;
            }
        }
        Self { steps, segments, segment_of }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    /// The window of `len` steps ending at `end` (inclusive), clipped to the
    /// episode start.
    pub fn window_ending_at(&self, end: usize, len: usize) -> ContextWindow {
        let seg = &self.segments[self.segment_of[end]];
        let from = (end + 1).saturating_sub(len).max(seg.start);
        let steps = self.steps[from..=end].to_vec();
        let last = &self.steps[end];
        ContextWindow::new(steps, last.next_state.clone(), last.action.clone())
    }

    /// `n` windows of `len` consecutive steps. Episodes shorter than `len`
    /// give their whole length.
    pub fn sample_full(&self, n: usize, len: usize, rng: &mut Rng) -> Result<Vec<ContextWindow>> {
        self.ensure_nonempty()?;
        Ok((0..n)
            .map(|_| {
                let mut end = rng.random_range(0..self.len());
                let seg = &self.segments[self.segment_of[end]];
                if end + 1 - seg.start < len && seg.len() >= len {
                    end = seg.start + len - 1;
                }
                self.window_ending_at(end, len)
            })
            .collect())
    }

    /// `n` windows whose length is uniform in `1..=max_len` (clipped to the
    /// episode start).
    pub fn sample_variable(&self, n: usize, max_len: usize, rng: &mut Rng) -> Result<Vec<ContextWindow>> {
        self.ensure_nonempty()?;
        Ok((0..n)
            .map(|_| {
                let end = rng.random_range(0..self.len());
                let len = rng.random_range(1..=max_len.max(1));
                self.window_ending_at(end, len)
            })
            .collect())
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::config("cannot sample context windows from an empty dataset"));
        }
        Ok(())
    }
}

/// Anything that maps context windows to embeddings.
pub trait ContextEncoder {
    fn z_dim(&self) -> usize;

    /// One embedding row per window.
    fn encode_batch(&self, windows: &[ContextWindow]) -> Result<Array2<f64>>;

    fn encode(&self, window: &ContextWindow) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(window))?.row(0).to_vec())
    }
}

/// Encoder defined by a closure; diagnostics with hand-made embeddings.
pub struct FnEncoder<F> {
    pub z_dim: usize,
    pub f: F,
}

impl<F: Fn(&ContextWindow) -> Vec<f64>> ContextEncoder for FnEncoder<F> {
    fn z_dim(&self) -> usize {
        self.z_dim
    }

    fn encode_batch(&self, windows: &[ContextWindow]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((windows.len(), self.z_dim));
        for (i, w) in windows.iter().enumerate() {
            let z = (self.f)(w);
            if z.len() != self.z_dim {
                return Err(Error::usage("closure encoder returned the wrong dimension"));
            }
            out.row_mut(i).assign(&ndarray::Array1::from(z));
        }
        Ok(out)
    }
}

/// Wraps an encoder and counts how many windows it has encoded.
pub struct CountingEncoder<'a, E: ?Sized> {
    inner: &'a E,
    calls: Cell<usize>,
}

impl<'a, E: ContextEncoder + ?Sized> CountingEncoder<'a, E> {
    pub fn new(inner: &'a E) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }
}

impl<E: ContextEncoder + ?Sized> ContextEncoder for CountingEncoder<'_, E> {
    fn z_dim(&self) -> usize {
        self.inner.z_dim()
    }

    fn encode_batch(&self, windows: &[ContextWindow]) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + windows.len());
        self.inner.encode_batch(windows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub z_dim: usize,
    pub z_max: f64,
    pub window: usize,
    pub temperature: f64,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 64, ff_dim: 64, z_dim: 8, z_max: 10.0, window: 32, temperature: 1.0, lr: 3e-4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.ff_dim == 0 || self.z_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("context window length L must be at least 1"));
        }
        if !(self.z_max > 0.0 && self.temperature > 0.0 && self.lr > 0.0) {
            return Err(Error::config("z_max, temperature and lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layers {
    key: Linear,
    value: Linear,
    query_embed: Linear,
    query_proj: Linear,
    slot0_key: Linear,
    slot0_value: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
    head: Linear,
}

/// Single-layer, single-head attention encoder with a bounded linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub token_norm: Normalizer,
    pub query_norm: Normalizer,
    pub params: ParamSet,
    layers: Layers,
}

/// Window features laid out for one batched forward pass.
struct Prepared {
    rows: usize,
    slots: usize,
    tokens: Array2<f64>,
    query: Array2<f64>,
    mask: Array2<bool>,
}

impl Encoder {
    pub fn new(
        config: EncoderConfig,
        obs_dim: usize,
        act_dim: usize,
        token_norm: Normalizer,
        query_norm: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if token_norm.mean.len() != 2 * obs_dim + act_dim || query_norm.mean.len() != obs_dim + act_dim {
            return Err(Error::usage("feature normalizers do not match the encoder dimensions"));
        }
        let mut rng = stream(seed, "encoder-init", 0);
        let mut p = ParamSet::new();
        let (e, f) = (config.embed_dim, 2 * obs_dim + act_dim);
        let layers = Layers {
            key: Linear::new(&mut p, f, e, &mut rng),
            value: Linear::new(&mut p, f, e, &mut rng),
            query_embed: Linear::new(&mut p, obs_dim + act_dim, e, &mut rng),
            query_proj: Linear::new(&mut p, e, e, &mut rng),
            slot0_key: Linear::new(&mut p, e, e, &mut rng),
            slot0_value: Linear::new(&mut p, e, e, &mut rng),
            out: Linear::new(&mut p, e, e, &mut rng),
            norm1: LayerNorm::new(&mut p, e),
            ff1: Linear::new(&mut p, e, config.ff_dim, &mut rng),
            ff2: Linear::new(&mut p, config.ff_dim, e, &mut rng),
            norm2: LayerNorm::new(&mut p, e),
            head: Linear::with_gain(&mut p, e, config.z_dim, 0.1, &mut rng),
        };
        Ok(Self { config, obs_dim, act_dim, token_norm, query_norm, params: p, layers })
    }

    /// Builds an encoder whose feature normalizers are fitted on `steps`.
    pub fn fitted(config: EncoderConfig, steps: &[ContextStep], seed: u64) -> Result<Self> {
        let first = steps.first().ok_or_else(|| Error::config("encoder normalizers need at least one step"))?;
        let (od, ad) = (first.state.len(), first.action.len());
        let (tn, qn) = feature_normalizers(steps);
        Self::new(config, od, ad, tn, qn, seed)
    }

    fn prepare(&self, windows: &[ContextWindow]) -> Result<Prepared> {
        let (od, ad) = (self.obs_dim, self.act_dim);
        for w in windows {
            w.validate(od, ad)?;
        }
        let rows = windows.len();
        let slots = windows.iter().map(|w| w.steps.len()).max().unwrap_or(0);
        let fdim = 2 * od + ad;
        let mut tokens = Array2::zeros((rows * slots, fdim));
        let mut query = Array2::zeros((rows, od + ad));
        let mut mask = Array2::from_elem((rows, slots + 1), false);
        for (i, w) in windows.iter().enumerate() {
            mask[[i, 0]] = true;
            for (j, qv) in w.query_state.iter().chain(&w.query_prev_action).enumerate() {
                query[[i, j]] = (qv - self.query_norm.mean[j]) / self.query_norm.std[j];
            }
            for (k, (step, &valid)) in w.steps.iter().zip(&w.mask).enumerate() {
                if !valid {
                    continue;
                }
                mask[[i, k + 1]] = true;
                let row = i * slots + k;
                let delta = step.next_state.iter().zip(&step.state).map(|(n, s)| n - s);
                let feats = step.state.iter().copied().chain(step.action.iter().copied()).chain(delta);
                for (j, v) in feats.enumerate() {
                    tokens[[row, j]] = (v - self.token_norm.mean[j]) / self.token_norm.std[j];
                }
            }
        }
        Ok(Prepared { rows, slots, tokens, query, mask })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Prepared) -> Var {
        let l = &self.layers;
        let xq = tape.constant(batch.query.clone());
        let qe = l.query_embed.forward(tape, p, xq);
        let q = l.query_proj.forward(tape, p, qe);
        let q = tape.scale(q, 1.0 / (self.config.embed_dim as f64).sqrt());
        let k0 = l.slot0_key.forward(tape, p, qe);
        let v0 = l.slot0_value.forward(tape, p, qe);
        let qk0 = tape.mul(q, k0);
        let s0 = tape.row_sum(qk0);
        let h = if batch.slots == 0 {
            v0
        } else {
            let xt = tape.constant(batch.tokens.clone());
            let kt = l.key.forward(tape, p, xt);
            let vt = l.value.forward(tape, p, xt);
            let st = tape.group_dots(q, kt, batch.slots);
            let scores = tape.concat_cols(&[s0, st]);
            let w = tape.masked_softmax(scores, batch.mask.clone());
            let w0 = tape.slice_cols(w, 0, 1);
            let wt = tape.slice_cols(w, 1, batch.slots + 1);
            let part0 = tape.mul_col(v0, w0);
            let part_t = tape.group_weighted_sum(wt, vt, batch.slots);
            tape.add(part0, part_t)
        };
        let o = l.out.forward(tape, p, h);
        let r1 = tape.add(qe, o);
        let r1 = l.norm1.forward(tape, p, r1);
        let f = l.ff1.forward(tape, p, r1);
        let f = tape.relu(f);
        let f = l.ff2.forward(tape, p, f);
        let r2 = tape.add(r1, f);
        let r2 = l.norm2.forward(tape, p, r2);
        let u = l.head.forward(tape, p, r2);
        bounded(tape, u, self.config.z_max)
    }

    /// Embeddings of `windows` recorded on `tape` with `params` as leaves.
    pub fn embed_on_tape(&self, tape: &mut Tape, bound: &Bound, windows: &[ContextWindow]) -> Result<Var> {
        let batch = self.prepare(windows)?;
        debug_assert_eq!(batch.rows, windows.len());
        Ok(self.forward(tape, bound, &batch))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.write_blob(&dir.join("encoder.bin"))?;
        let manifest = EncoderManifest {
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            token_norm: self.token_norm.clone(),
            query_norm: self.query_norm.clone(),
            shapes: self.params.shapes(),
        };
        std::fs::write(dir.join("encoder.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        let m: EncoderManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
        let mut enc = Self::new(m.config, m.obs_dim, m.act_dim, m.token_norm, m.query_norm, 0)?;
        if enc.params.shapes() != m.shapes {
            return Err(Error::load(&path, "parameter shapes disagree with the encoder config"));
        }
        enc.params = ParamSet::read_blob(&dir.join("encoder.bin"), &m.shapes)?;
        if !enc.params.is_finite() {
            return Err(Error::load(dir.join("encoder.bin"), "non-finite encoder parameter"));
        }
        Ok(enc)
    }
}

impl ContextEncoder for Encoder {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn encode_batch(&self, windows: &[ContextWindow]) -> Result<Array2<f64>> {
        if windows.is_empty() {
            return Ok(Array2::zeros((0, self.config.z_dim)));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let z = self.embed_on_tape(&mut tape, &bound, windows)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderManifest {
    config: EncoderConfig,
    obs_dim: usize,
    act_dim: usize,
    token_norm: Normalizer,
    query_norm: Normalizer,
    shapes: Vec<(usize, usize)>,
}

/// `z_max * u / sqrt(1 + |u|^2)` row-wise; the norm stays below `z_max`.
fn bounded(tape: &mut Tape, u: Var, z_max: f64) -> Var {
    let sq = tape.square(u);
    let n2 = tape.row_sum(sq);
    let d = tape.add_scalar(n2, 1.0);
    let d = tape.sqrt(d);
    let inv = tape.recip(d);
    let z = tape.mul_col(u, inv);
    tape.scale(z, z_max)
}

/// Standardization of token features `(s, a, s' - s)` and query features
/// `(s', a)` over `steps`.
pub fn feature_normalizers(steps: &[ContextStep]) -> (Normalizer, Normalizer) {
    let od = steps[0].state.len();
    let ad = steps[0].action.len();
    let mut tok = Array2::zeros((steps.len(), 2 * od + ad));
    let mut qry = Array2::zeros((steps.len(), od + ad));
    for (i, s) in steps.iter().enumerate() {
        let delta = s.next_state.iter().zip(&s.state).map(|(n, x)| n - x);
        for (j, v) in s.state.iter().copied().chain(s.action.iter().copied()).chain(delta).enumerate() {
            tok[[i, j]] = v;
        }
        for (j, v) in s.next_state.iter().chain(&s.action).enumerate() {
            qry[[i, j]] = *v;
        }
    }
    (Normalizer::fit(&tok), Normalizer::fit(&qry))
}

/// Index sets behind the InfoNCE loss: who is a negative of whom, the
/// positive-averaging weights and the anchor weights.
struct Contrast {
    others: Array2<bool>,
    positive_weight: Array2<f64>,
    anchor_weight: Array2<f64>,
}

fn contrast(labels: &[u32]) -> Result<Contrast> {
    let n = labels.len();
    let mut tasks: Vec<u32> = labels.to_vec();
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.len() < 2 {
        return Err(Error::usage("InfoNCE needs embeddings from at least 2 tasks"));
    }
    let others = Array2::from_shape_fn((n, n), |(i, j)| i != j);
    let mut positive_weight = Array2::zeros((n, n));
    let mut anchors = Vec::new();
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        for &j in &pos {
            positive_weight[[i, j]] = 1.0 / pos.len() as f64;
        }
        anchors.push(i);
    }
    if anchors.is_empty() {
        return Err(Error::usage("InfoNCE batch has no task with two embeddings"));
    }
    let mut anchor_weight = Array2::zeros((n, 1));
    for &i in &anchors {
        anchor_weight[[i, 0]] = 1.0 / anchors.len() as f64;
    }
    Ok(Contrast { others, positive_weight, anchor_weight })
}

/// InfoNCE over rows of `z` labelled by task, as a tape node. Every row with
/// at least one same-task partner is an anchor; its positives are averaged
/// and its contrast set is every other row.
pub fn infonce_on_tape(tape: &mut Tape, z: Var, labels: &[u32], temperature: f64) -> Result<Var> {
    if tape.shape(z).0 != labels.len() {
        return Err(Error::usage("InfoNCE: one label per embedding row"));
    }
    let c = contrast(labels)?;
    let zt = tape.transpose(z);
    let s = tape.matmul(z, zt);
    let s = tape.scale(s, 1.0 / temperature);
    let lse = tape.masked_logsumexp(s, c.others);
    let pw = tape.constant(c.positive_weight);
    let sp = tape.mul(s, pw);
    let pos = tape.row_sum(sp);
    let per_anchor = tape.sub(lse, pos);
    let aw = tape.constant(c.anchor_weight);
    let weighted = tape.mul(per_anchor, aw);
    Ok(tape.sum(weighted))
}

/// Value of [`infonce_on_tape`] without recording a graph.
pub fn infonce_loss(z: &Array2<f64>, labels: &[u32], temperature: f64) -> Result<f64> {
    if z.nrows() != labels.len() {
        return Err(Error::usage("InfoNCE: one label per embedding row"));
    }
    let c = contrast(labels)?;
    let n = labels.len();
    let s = z.dot(&z.t()) / temperature;
    let mut total = 0.0;
    for i in 0..n {
        let w = c.anchor_weight[[i, 0]];
        if w == 0.0 {
            continue;
        }
        let lse = logsumexp((0..n).filter(|&j| j != i).map(|j| s[[i, j]]));
        let pos: f64 = (0..n).map(|j| c.positive_weight[[i, j]] * s[[i, j]]).sum();
        total += w * (lse - pos);
    }
    Ok(total)
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `R(z)`: mean over positives `z*` of `log [exp(z.z*/t) / sum_{z' in pool} exp(z.z'/t)]`.
pub fn representation_value(z: &[f64], positives: &[Vec<f64>], pool: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::usage("representation value needs a non-empty contrast pool"));
    }
    if positives.is_empty() {
        return Err(Error::usage("representation value needs at least one positive"));
    }
    let lse = logsumexp(pool.iter().map(|p| dot(z, p) / temperature));
    let mean_pos = positives.iter().map(|p| dot(z, p) / temperature).sum::<f64>() / positives.len() as f64;
    Ok(mean_pos - lse)
}

/// Which way the adversarial reward points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvSign {
    /// `R(z_t) - R(z_{t+1})`: the policy gains by lowering representation quality.
    #[default]
    Decrease,
    /// `R(z_{t+1}) - R(z_t)`.
    Increase,
}

/// Frozen contrast targets for one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardPool<'a> {
    pub positives: &'a [Vec<f64>],
    pub pool: &'a [Vec<f64>],
    pub temperature: f64,
}

impl RewardPool<'_> {
    pub fn value(&self, z: &[f64]) -> Result<f64> {
        representation_value(z, self.positives, self.pool, self.temperature)
    }
}

pub fn adversarial_reward(z_t: &[f64], z_next: &[f64], pool: &RewardPool<'_>, sign: AdvSign) -> Result<f64> {
    let diff = pool.value(z_next)? - pool.value(z_t)?;
    Ok(match sign {
        AdvSign::Increase => diff,
        AdvSign::Decrease => -diff,
    })
}

/// Per-step rewards along a rollout from its prefix embeddings `z_0..z_T`.
pub fn adversarial_rewards(prefix_z: &[Vec<f64>], pool: &RewardPool<'_>, sign: AdvSign) -> Result<Vec<f64>> {
    let values: Vec<f64> = prefix_z.iter().map(|z| pool.value(z)).collect::<Result<_>>()?;
    Ok(values
        .windows(2)
        .map(|w| match sign {
            AdvSign::Increase => w[1] - w[0],
            AdvSign::Decrease => w[0] - w[1],
        })
        .collect())
}

/// Encoder plus its optimizer state.
#[derive(Clone, Debug)]
pub struct EncoderTrainer {
    pub encoder: Encoder,
    opt: Adam,
}

impl EncoderTrainer {
    pub fn new(encoder: Encoder) -> Self {
        let opt = Adam::new(&encoder.params, AdamConfig { max_grad_norm: Some(10.0), ..AdamConfig::with_lr(encoder.config.lr) });
        Self { encoder, opt }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    /// Loss and parameter gradients on `windows_by_task[i]` labelled `i`.
    pub fn loss_and_grads(&self, windows_by_task: &[Vec<ContextWindow>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for (k, ws) in windows_by_task.iter().enumerate() {
            windows.extend(ws.iter().cloned());
            labels.extend(std::iter::repeat_n(k as u32, ws.len()));
        }
        if windows.is_empty() {
            return Err(Error::usage("encoder update called with an empty batch"));
        }
        let enc = &self.encoder;
        let mut tape = Tape::new();
        let bound = enc.params.bind(&mut tape);
        let z = enc.embed_on_tape(&mut tape, &bound, &windows)?;
        let loss = infonce_on_tape(&mut tape, z, &labels, enc.config.temperature)?;
        let value = tape.item(loss);
        let grads = enc.params.grads(&bound, &tape.backward(loss));
        Ok((value, grads))
    }

    /// One Adam step descending the InfoNCE loss; returns the pre-step loss.
    pub fn update(&mut self, windows_by_task: &[Vec<ContextWindow>]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(windows_by_task)?;
        if !loss.is_finite() {
            return Err(Error::divergence("encoder update", format!("loss {loss}")));
        }
        self.opt
            .step(&mut self.encoder.params, &grads)
            .map_err(|e| Error::divergence("encoder update", e.to_string()))?;
        Ok(loss)
    }
}

fn rows(z: &Array2<f64>) -> Vec<Vec<f64>> {
    z.outer_iter().map(|r| r.to_vec()).collect()
}

fn sum_sq_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()))
        .sum()
}

/// `d = [|D2| sum_{z1, z} |z1 - z|^2] / [|D1| sum_{z2, z} |z2 - z|^2]` where
/// `z` ranges over the held-out task-1 embeddings.
pub fn relative_metric_from_embeddings(z1: &[Vec<f64>], z2: &[Vec<f64>], z_test: &[Vec<f64>]) -> Result<f64> {
    if z1.is_empty() || z2.is_empty() || z_test.is_empty() {
        return Err(Error::usage("relative metric needs three non-empty embedding sets"));
    }
    let num = z2.len() as f64 * sum_sq_dist(z1, z_test);
    let den = z1.len() as f64 * sum_sq_dist(z2, z_test);
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::divergence("relative metric", "zero denominator: the encoder is collapsed"));
    }
    Ok(num / den)
}

pub fn relative_metric(
    encoder: &dyn ContextEncoder,
    d1_train: &[ContextWindow],
    d2_train: &[ContextWindow],
    d1_test: &[ContextWindow],
) -> Result<f64> {
    let z1 = rows(&encoder.encode_batch(d1_train)?);
    let z2 = rows(&encoder.encode_batch(d2_train)?);
    let zt = rows(&encoder.encode_batch(d1_test)?);
    relative_metric_from_embeddings(&z1, &z2, &zt)
}

/// One exported embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub task_id: u32,
    pub split: String,
    pub z: Vec<f64>,
}

/// CSV with columns `task_id, split, z_0 .. z_{d-1}`.
pub fn write_embedding_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.z.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["task_id".to_string(), "split".to_string()];
    header.extend((0..dim).map(|k| format!("z_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.task_id.to_string(), r.split.clone()];
        rec.extend(r.z.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::load(path, format!("row {i}: {what}"));
        let task_id = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("task_id"))?;
        let split = rec.get(1).ok_or_else(|| bad("split"))?.to_string();
        let z = rec.iter().skip(2).map(|s| s.parse::<f64>().map_err(|_| bad("z value"))).collect::<Result<_>>()?;
        out.push(EmbeddingRow { task_id, split, z });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use redaug_nn::gradcheck::{numeric_gradient, relative_error};

    /// Direct double sum over anchors, positives and contrast terms.
    fn brute_infonce(z: &[Vec<f64>], labels: &[u32]) -> f64 {
        let n = z.len();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..n).filter(|&j| j != i).map(|j| dot(&z[i], &z[j]).exp()).sum();
            let mut acc = 0.0;
            for &p in &pos {
                acc += -(dot(&z[i], &z[p]).exp() / denom).ln();
            }
            total += acc / pos.len() as f64;
        }
        total / anchors as f64
    }

    fn step(s: f64, a: f64, n: f64) -> ContextStep {
        ContextStep { state: vec![s, 0.5 * s], action: vec![a], next_state: vec![n, 0.5 * n] }
    }

    fn toy_encoder(seed: u64) -> Encoder {
        let cfg = EncoderConfig { embed_dim: 8, ff_dim: 8, z_dim: 3, ..EncoderConfig::default() };
        Encoder::new(cfg, 2, 1, Normalizer::identity(5), Normalizer::identity(3), seed).unwrap()
    }

    fn toy_window(k: usize, shift: f64) -> ContextWindow {
        let steps = (0..k).map(|i| step(i as f64 * 0.1 + shift, -0.3 + 0.2 * i as f64, i as f64 * 0.1 + shift + 0.05)).collect();
        ContextWindow::new(steps, vec![shift, 1.0], vec![0.2])
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one() {
        let z = Array2::from_elem((6, 3), 0.7);
        let labels = [0, 0, 1, 1, 2, 2];
        let loss = infonce_loss(&z, &labels, 1.0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pairs_match_hand_computation() {
        for c in [1.0f64, 2.0] {
            let z = array![[c, 0.0], [c, 0.0], [0.0, c]];
            let loss = infonce_loss(&z, &[0, 0, 1], 1.0).unwrap();
            // Both task-0 anchors see one positive (c^2) and one orthogonal negative.
            assert!((loss - ((c * c).exp() + 1.0).ln() + c * c).abs() < 1e-12);
            let z = array![[c, 0.0], [c, 0.0], [0.0, c], [0.0, c]];
            let loss = infonce_loss(&z, &[0, 0, 1, 1], 1.0).unwrap();
            assert!((loss - ((c * c).exp() + 2.0).ln() + c * c).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_tasks_are_skipped_or_rejected() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        assert!(infonce_loss(&z, &[0, 1, 2], 1.0).is_err());
        assert!(infonce_loss(&z, &[0, 0, 0], 1.0).is_err());
        let z = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]];
        let with_singleton = infonce_loss(&z, &[0, 0, 1], 1.0).unwrap();
        let rows = rows(&z);
        assert!((with_singleton - brute_infonce(&rows, &[0, 0, 1])).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_value_and_finite_differences() {
        let z0 = array![[0.3, -0.2], [0.5, 0.1], [-0.4, 0.7], [-0.1, 0.9]];
        let labels = [0, 0, 1, 1];
        let mut zp = ParamSet::new();
        zp.push(z0.clone());
        let f = |p: &ParamSet| {
            let mut t = Tape::new();
            let v = t.leaf(p.get(redaug_nn::ParamId(0)).clone());
            let l = infonce_on_tape(&mut t, v, &labels, 0.7).unwrap();
            t.item(l)
        };
        let mut t = Tape::new();
        let v = t.leaf(z0.clone());
        let l = infonce_on_tape(&mut t, v, &labels, 0.7).unwrap();
        assert!((t.item(l) - infonce_loss(&z0, &labels, 0.7).unwrap()).abs() < 1e-12);
        let g: Vec<f64> = t.backward(l).get(v).unwrap().iter().copied().collect();
        let num = numeric_gradient(&zp, 1e-6, f);
        assert!(relative_error(&g, &num) < 1e-6);
    }

    #[test]
    fn representation_value_edge_cases() {
        let pool = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let pos = vec![vec![1.0, 0.0]];
        let r = representation_value(&[0.0, 0.0], &pos, &pool, 1.0).unwrap();
        assert!((r + 4f64.ln()).abs() < 1e-12);
        assert!(representation_value(&[1.0, 0.0], &pos, &[], 1.0).is_err());
    }

    #[test]
    fn unchanged_embedding_has_zero_reward() {
        let pool = vec![vec![1.0, 0.3], vec![-0.2, 0.4]];
        let p = RewardPool { positives: &pool[..1], pool: &pool, temperature: 1.0 };
        let z = [0.4, -0.8];
        assert_eq!(adversarial_reward(&z, &z, &p, AdvSign::Decrease).unwrap(), 0.0);
    }

    #[test]
    fn masked_padding_does_not_change_embeddings() {
        let enc = toy_encoder(3);
        let w = toy_window(4, 0.2);
        let z = enc.encode(&w).unwrap();
        let padded = w.clone().padded(9, 2, 1);
        let mut scrambled = padded.clone();
        scrambled.steps[6] = step(9.0, 1.0, -4.0);
        scrambled.steps.swap(5, 7);
        for other in [padded, scrambled] {
            let zp = enc.encode(&other).unwrap();
            for (a, b) in z.iter().zip(&zp) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let batch = enc.encode_batch(&[w.clone(), toy_window(7, -0.4)]).unwrap();
        for (a, b) in z.iter().zip(batch.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_gives_query_only_embedding() {
        let enc = toy_encoder(4);
        let empty = ContextWindow::new(Vec::new(), vec![0.1, 0.2], vec![0.0]);
        let all_masked = ContextWindow { mask: vec![false; 3], ..toy_window(3, 0.0) };
        let all_masked = ContextWindow { query_state: vec![0.1, 0.2], query_prev_action: vec![0.0], ..all_masked };
        assert_eq!(enc.encode(&empty).unwrap(), enc.encode(&all_masked).unwrap());
    }

    #[test]
    fn encoder_rejects_mismatched_dimensions() {
        let enc = toy_encoder(5);
        let w = ContextWindow::new(Vec::new(), vec![0.1, 0.2, 0.3], vec![0.0]);
        assert!(matches!(enc.encode(&w), Err(Error::Usage(_))));
    }

    #[test]
    fn encoder_is_deterministic_and_round_trips() {
        let a = toy_encoder(11);
        let b = toy_encoder(11);
        let w = toy_window(5, 0.3);
        assert_eq!(a.encode(&w).unwrap(), b.encode(&w).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let c = Encoder::load(dir.path()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.encode(&w).unwrap(), c.encode(&w).unwrap());
    }

    #[test]
    fn encoder_parameter_gradient_matches_finite_differences() {
        let mut enc = toy_encoder(8);
        // Unit-scale scores keep the loss away from saturation.
        enc.config.z_max = 1.0;
        let trainer = EncoderTrainer::new(enc);
        let batch = vec![vec![toy_window(3, 0.0), toy_window(2, 0.1)], vec![toy_window(3, 1.0), toy_window(1, 1.2)]];
        let (_, grads) = trainer.loss_and_grads(&batch).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let num = numeric_gradient(&trainer.encoder.params, 1e-6, |p| {
            let mut t = trainer.clone();
            t.encoder.params = p.clone();
            t.loss_and_grads(&batch).unwrap().0
        });
        let err = relative_error(&analytic, &num);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let mut trainer = EncoderTrainer::new(toy_encoder(9));
        trainer.set_lr(1e-4);
        let batch = vec![vec![toy_window(3, 0.0), toy_window(4, 0.1)], vec![toy_window(3, 1.0), toy_window(2, 1.2)]];
        let before = trainer.update(&batch).unwrap();
        let after = trainer.loss_and_grads(&batch).unwrap().0;
        assert!(after < before, "{after} >= {before}");
        assert!(matches!(trainer.update(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn embedding_norm_stays_bounded() {
        let mut enc = toy_encoder(1);
        let flat: Vec<f64> = enc.params.flatten().iter().map(|x| x * 50.0).collect();
        enc.params.set_flat(&flat);
        let z = enc.encode(&toy_window(6, 3.0)).unwrap();
        assert!(z.iter().map(|x| x * x).sum::<f64>().sqrt() <= enc.config.z_max);
    }

    #[test]
    fn relative_metric_constant_point_cases() {
        let p = vec![vec![1.0, 0.0]; 4];
        let q = vec![vec![0.0, 3.0]; 4];
        assert_eq!(relative_metric_from_embeddings(&p, &q, &p).unwrap(), 0.0);
        let near_p = vec![vec![1.0, 0.0], vec![1.1, 0.0]];
        assert!(relative_metric_from_embeddings(&q, &near_p, &p).unwrap() > 1.0);
        assert!(relative_metric_from_embeddings(&p, &p, &p).is_err());
    }

    #[test]
    fn windows_respect_episode_boundaries() {
        let mk = |s: f64, done: bool| Transition {
            state: vec![s],
            action: vec![0.0],
            reward: 0.0,
            next_state: vec![s + 1.0],
            done,
            checkpoint_id: 1,
            task_id: 0,
        };
        // 0->1->2 | 10->11 (state jump) | 20 (done)
        let ts = vec![mk(0.0, false), mk(1.0, false), mk(10.0, false), mk(11.0, true), mk(20.0, true)];
        let src = WindowSource::from_transitions(&ts);
        assert_eq!(src.segments(), &[0..2, 2..4, 4..5]);
        let w = src.window_ending_at(3, 32);
        assert_eq!(w.steps.len(), 2);
        assert_eq!(w.query_state, vec![12.0]);
        let mut rng = stream(0, "t", 0);
        for w in src.sample_full(20, 2, &mut rng).unwrap() {
            assert!(w.steps.windows(2).all(|p| p[0].next_state == p[1].state));
        }
    }

    #[test]
    fn embedding_csv_round_trips() {
        let rows = vec![
            EmbeddingRow { task_id: 0, split: "train".into(), z: vec![0.1, -2.5e-7] },
            EmbeddingRow { task_id: 3, split: "test".into(), z: vec![1.0 / 3.0, 7.0] },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        write_embedding_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task_id,split,z_0,z_1"));
        assert_eq!(read_embedding_csv(&path).unwrap(), rows);
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u32>)> {
        (2usize..=8).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), n),
                prop::collection::vec(0u32..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn infonce_matches_brute_force((z, labels) in batch_strategy()) {
            let arr = Array2::from_shape_vec((z.len(), 3), z.concat()).unwrap();
            match infonce_loss(&arr, &labels, 1.0) {
                Ok(v) => prop_assert!((v - brute_infonce(&z, &labels)).abs() < 1e-6),
                Err(_) => {
                    let mut u = labels.clone();
                    u.sort_unstable();
                    u.dedup();
                    let paired = labels.iter().any(|l| labels.iter().filter(|m| *m == l).count() > 1);
                    prop_assert!(u.len() < 2 || !paired);
                }
            }
        }

        #[test]
        fn infonce_is_permutation_invariant((z, labels) in batch_strategy(), seed in 0u64..1000) {
            let arr = Array2::from_shape_vec((z.len(), 3), z.concat()).unwrap();
            if let Ok(v) = infonce_loss(&arr, &labels, 1.0) {
                let mut idx: Vec<usize> = (0..z.len()).collect();
                let mut rng = stream(seed, "perm", 0);
                for i in (1..idx.len()).rev() {
                    idx.swap(i, rng.random_range(0..=i));
                }
                let zs: Vec<f64> = idx.iter().flat_map(|&i| z[i].clone()).collect();
                let ls: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
                let arr = Array2::from_shape_vec((z.len(), 3), zs).unwrap();
                prop_assert!((infonce_loss(&arr, &ls, 1.0).unwrap() - v).abs() < 1e-9);
            }
        }

        #[test]
        fn rewards_telescope(zs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..21)) {
            let pool = vec![vec![1.0, 0.5], vec![-0.7, 0.2], vec![0.1, -1.1]];
            let p = RewardPool { positives: &pool[..2], pool: &pool, temperature: 1.0 };
            let total = p.value(zs.last().unwrap()).unwrap() - p.value(&zs[0]).unwrap();
            let up: f64 = adversarial_rewards(&zs, &p, AdvSign::Increase).unwrap().iter().sum();
            let down: f64 = adversarial_rewards(&zs, &p, AdvSign::Decrease).unwrap().iter().sum();
            prop_assert!((up - total).abs() < 1e-6);
            prop_assert!((down + total).abs() < 1e-6);
        }
    }
}
