//! The parametric question policy `pi(q | o)`.
//!
//! Observations are fixed-length vectors built from the scene and the QA history
//! only; the target never reaches this module. The layout is:
//!
//! | block        | length         | content                                                     |
//! |--------------|----------------|-------------------------------------------------------------|
//! | scene        | see below      | category, color (+ colorless), size counts and x/y histograms, all divided by M |
//! | split        | 3 x bank       | per question, pseudo-belief mass on objects answering yes / no / na |
//! | gain         | bank           | per question, information gain under the pseudo-belief, divided by ln 3 |
//! | focus        | bank           | per question, pseudo-posterior of the current best object after its likely answer |
//! | lead         | 2 x bank       | per question, 1 if its gain (resp. focus) is maximal within 1e-12, else 0 |
//! | summary      | 2              | max pseudo-belief weight, pseudo-belief entropy / ln M      |
//! | status       | 4 x bank       | per question one-hot over {unasked, yes, no, na} (latest answer) |
//! | round        | t_max          | one-hot of the round index t (1-based)                      |
//!
//! The pseudo-belief weights each object by `exp(evidence_weight * (agreements -
//! disagreements))` over the history answers its ground-truth predicate agrees or
//! disagrees with. Gain and focus use the matching symmetric answer-noise model
//! `p(a | c) = 1 - e` on the truth and `e / 2` otherwise, with `e = 2 / (exp(2w) + 2)`,
//! so for a true oracle with noise `e` the pseudo-belief is the exact posterior.
//! No fitted oracle model is read.
//!
//! The logits are the sum of two paths, either of which may be disabled:
//!
//! - a dense network (tanh hidden layers, linear output) from the whole observation to
//!   one logit per bank question;
//! - a question head with weights shared across questions, scoring each question from
//!   its own split, gain, focus, lead and status features plus the summary and round
//!   blocks, with a learned per-question bias.
//!
//! The policy is the softmax of the logits. Gradients are derived by hand.
//!
//! Checkpoint file (JSON):
//!
//! ```text
//! {"format_version":1,"horizon":5,"schema":{...},
//!  "params":{"layers":[{"inputs":480,"outputs":64,"weights":[...row-major outputs x inputs...],"biases":[...]}, ...],
//!            "head":{"layout":{...},"width":32,"a":[...],"b":[...],"c":[...],"u":[...],"bias":[...]}}}
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::History;
use crate::error::{Error, Result};
use crate::oracle::Answer;
use crate::qbank::{truth_table, QuestionBank};
use crate::rng::{self, tag};
use crate::scene::{Scene, SceneConfig, Size};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub position_bins: usize,
    pub t_max: usize,
    pub bank_size: usize,
    pub evidence_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub scene: (usize, usize),
    pub split: (usize, usize),
    pub gain: (usize, usize),
    pub focus: (usize, usize),
    pub lead: (usize, usize),
    pub summary: (usize, usize),
    pub status: (usize, usize),
    pub round: (usize, usize),
    pub dim: usize,
}

impl FeatureSchema {
    pub fn new(scene: &SceneConfig, bank: &QuestionBank, t_max: usize) -> Self {
        Self {
            categories: scene.category_names(),
            colors: scene.color_names(),
            position_bins: 5,
            t_max,
            bank_size: bank.size(),
            evidence_weight: evidence_weight_for(0.1),
        }
    }

    /// Answer-noise rate implied by `evidence_weight`.
    pub fn implied_noise(&self) -> f64 {
        2.0 / ((2.0 * self.evidence_weight).exp() + 2.0)
    }

    fn scene_len(&self) -> usize {
        self.categories.len() + self.colors.len() + 1 + Size::ALL.len() + 2 * self.position_bins
    }

    pub fn layout(&self) -> Layout {
        let mut at = 0;
        let mut block = |len: usize| {
            let r = (at, at + len);
            at += len;
            r
        };
        let scene = block(self.scene_len());
        let split = block(3 * self.bank_size);
        let gain = block(self.bank_size);
        let focus = block(self.bank_size);
        let lead = block(2 * self.bank_size);
        let summary = block(2);
        let status = block(4 * self.bank_size);
        let round = block(self.t_max);
        Layout {
            scene,
            split,
            gain,
            focus,
            lead,
            summary,
            status,
            round,
            dim: at,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub vector: Vec<f64>,
    pub round: usize,
}

impl Observation {
    pub fn block<'a>(&'a self, range: (usize, usize)) -> &'a [f64] {
        &self.vector[range.0..range.1]
    }

    /// One-hot status row of question `qid`: `[unasked, yes, no, na]`.
    pub fn status_row(&self, schema: &FeatureSchema, qid: usize) -> &[f64] {
        let s = schema.layout().status.0 + 4 * qid;
        &self.vector[s..s + 4]
    }
}

/// Evidence weight whose implied symmetric noise rate is `noise`:
/// `0.5 * ln((1 - noise) / (noise / 2))`.
pub fn evidence_weight_for(noise: f64) -> f64 {
    0.5 * ((1.0 - noise) / (noise / 2.0)).ln()
}

/// Scene-only part of the observation; constant over an episode.
pub fn scene_features(schema: &FeatureSchema, scene: &Scene) -> Vec<f64> {
    let m = scene.objects.len().max(1) as f64;
    let k = schema.categories.len();
    let c = schema.colors.len();
    let b = schema.position_bins;
    let mut f = vec![0.0; schema.scene_len()];
    let bin = |v: f64| ((v * b as f64) as usize).min(b - 1);
    for o in &scene.objects {
        if let Some(i) = schema.categories.iter().position(|x| *x == o.category) {
            f[i] += 1.0;
        }
        match &o.color {
            Some(col) => {
                if let Some(i) = schema.colors.iter().position(|x| x == col) {
                    f[k + i] += 1.0;
                }
            }
            None => f[k + c] += 1.0,
        }
        f[k + c + 1 + o.size.index()] += 1.0;
        f[k + c + 4 + bin(o.x)] += 1.0;
        f[k + c + 4 + b + bin(o.y)] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= m);
    f
}

/// Featurize with a precomputed ground-truth table `truth[qid][object]` and scene block.
pub fn featurize_with(
    schema: &FeatureSchema,
    scene_block: &[f64],
    truth: &[Vec<Answer>],
    history: &History,
    t: usize,
) -> Observation {
    let layout = schema.layout();
    let mut v = vec![0.0; layout.dim];
    v[layout.scene.0..layout.scene.1].copy_from_slice(scene_block);

    let m = truth.first().map_or(0, Vec::len);
    let mut score = vec![0.0f64; m];
    for turn in history.iter() {
        for (c, s) in score.iter_mut().enumerate() {
            *s += if truth[turn.qid][c] == turn.answer { 1.0 } else { -1.0 };
        }
    }
    let max = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = score
        .iter()
        .map(|s| (schema.evidence_weight * (s - max)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);

    let e = schema.implied_noise();
    let lik = |truth: Answer, a: usize| if truth.index() == a { 1.0 - e } else { 0.5 * e };
    let cond = {
        let d = [1.0 - e, 0.5 * e, 0.5 * e];
        -d.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
    };
    let best = crate::policy::argmax(&w);
    for (q, row) in truth.iter().enumerate() {
        let base = layout.split.0 + 3 * q;
        let mut mass = [0.0; 3];
        for (c, a) in row.iter().enumerate() {
            mass[a.index()] += w[c];
        }
        v[base..base + 3].copy_from_slice(&mass);
        let marginal: Vec<f64> = (0..3)
            .map(|a| (0..3).map(|b| mass[b] * lik(Answer::from_index(b), a)).sum())
            .collect();
        let h: f64 = -marginal
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum::<f64>();
        v[layout.gain.0 + q] = ((h - cond).max(0.0)) / 3f64.ln();
        let a = row[best].index();
        v[layout.focus.0 + q] = w[best] * lik(row[best], a) / marginal[a];
    }
    for (k, block) in [layout.gain, layout.focus].into_iter().enumerate() {
        let max = v[block.0..block.1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for q in 0..truth.len() {
            if v[block.0 + q] >= max - crate::experts::TIE_TOLERANCE {
                v[layout.lead.0 + 2 * q + k] = 1.0;
            }
        }
    }
    let wmax = w.iter().copied().fold(0.0, f64::max);
    let ent: f64 = w.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    v[layout.summary.0] = wmax;
    v[layout.summary.0 + 1] = if m > 1 { ent / (m as f64).ln() } else { 0.0 };

    let mut latest: Vec<Option<Answer>> = vec![None; schema.bank_size];
    for turn in history.iter() {
        latest[turn.qid] = Some(turn.answer);
    }
    for (q, a) in latest.iter().enumerate() {
        let slot = a.map_or(0, |a| 1 + a.index());
        v[layout.status.0 + 4 * q + slot] = 1.0;
    }
    if t >= 1 && t <= schema.t_max {
        v[layout.round.0 + t - 1] = 1.0;
    }
    Observation {
        vector: v,
        round: t,
    }
}

/// Observation for round `t` (1-based) after `history`. Reads only the scene and history.
pub fn featurize(
    schema: &FeatureSchema,
    scene: &Scene,
    history: &History,
    bank: &QuestionBank,
    t: usize,
) -> Observation {
    let truth = truth_table(bank, scene);
    featurize_with(schema, &scene_features(schema, scene), &truth, history, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Network architecture. The logits are the sum of the enabled paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyArch {
    /// Hidden widths of the dense path (observation -> bank logits); `None` disables it.
    pub dense: Option<Vec<usize>>,
    /// Hidden width of the shared per-question head; `None` disables it.
    pub head: Option<usize>,
    /// Dense weights are uniform in `[-dense_init, dense_init]`.
    pub dense_init: f64,
    /// Head weights are uniform in `[-head_init, head_init]`.
    pub head_init: f64,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            dense: Some(vec![64]),
            head: Some(32),
            dense_init: 0.05,
            head_init: 0.5,
        }
    }
}

/// Features of one question: split (3), gain, focus, lead (2), status (4).
pub const QUESTION_FEATURES: usize = 11;

/// Weight-shared scorer applied to every question:
/// `logit_q = u . tanh(A f_q + B g + c) + bias_q`, where `f_q` are the question's own
/// features and `g` the context (summary and round blocks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionHead {
    pub layout: Layout,
    pub width: usize,
    /// `width x QUESTION_FEATURES`, row-major.
    pub a: Vec<f64>,
    /// `width x context_len`, row-major.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub u: Vec<f64>,
    /// One per question.
    pub bias: Vec<f64>,
}

impl QuestionHead {
    fn bank_size(&self) -> usize {
        self.bias.len()
    }

    fn context_len(&self) -> usize {
        (self.layout.summary.1 - self.layout.summary.0) + (self.layout.round.1 - self.layout.round.0)
    }

    fn context(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let mut g = x[l.summary.0..l.summary.1].to_vec();
        g.extend_from_slice(&x[l.round.0..l.round.1]);
        g
    }

    fn question_features(&self, x: &[f64], q: usize) -> [f64; QUESTION_FEATURES] {
        let l = &self.layout;
        let mut f = [0.0; QUESTION_FEATURES];
        f[..3].copy_from_slice(&x[l.split.0 + 3 * q..l.split.0 + 3 * q + 3]);
        f[3] = x[l.gain.0 + q];
        f[4] = x[l.focus.0 + q];
        f[5..7].copy_from_slice(&x[l.lead.0 + 2 * q..l.lead.0 + 2 * q + 2]);
        f[7..].copy_from_slice(&x[l.status.0 + 4 * q..l.status.0 + 4 * q + 4]);
        f
    }

    fn zeros(layout: Layout, width: usize, bank: usize) -> Self {
        let mut h = Self {
            layout,
            width,
            a: vec![0.0; width * QUESTION_FEATURES],
            b: Vec::new(),
            c: vec![0.0; width],
            u: vec![0.0; width],
            bias: vec![0.0; bank],
        };
        h.b = vec![0.0; width * h.context_len()];
        h
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .chain(&self.u)
            .chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.a
            .iter_mut()
            .chain(&mut self.b)
            .chain(&mut self.c)
            .chain(&mut self.u)
            .chain(&mut self.bias)
    }
}

/// Network parameters. Also used as the gradient container (same shape).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Dense path; empty when disabled.
    pub layers: Vec<Dense>,
    #[serde(default)]
    pub head: Option<QuestionHead>,
}

struct HeadCache {
    context: Vec<f64>,
    /// `bank x width` tanh activations.
    hidden: Vec<f64>,
}

/// Intermediate values of a forward pass.
pub struct ForwardCache {
    /// Dense activations: `acts[0]` is the input, the last entry the dense logits.
    acts: Vec<Vec<f64>>,
    head: Option<HeadCache>,
    input: Vec<f64>,
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.map_or(true, |m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if allowed(i) { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Inverse-CDF sample from a categorical distribution with `u` in `[0, 1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_layers(
    input_dim: usize,
    hidden: &[usize],
    outputs: usize,
    scale: f64,
    rng: &mut rng::StreamRng,
) -> Vec<Dense> {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(outputs);
    dims.windows(2)
        .map(|w| {
            let mut d = Dense::zeros(w[0], w[1]);
            d.weights
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-scale..=scale));
            d
        })
        .collect()
}

/// Argmax with ties to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl PolicyParams {
    /// Dense-only network: weights uniform in `[-scale, scale]`, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], outputs: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tag::INIT]);
        Self {
            layers: dense_layers(input_dim, hidden, outputs, scale, &mut rng),
            head: None,
        }
    }

    /// Network for `schema` with architecture `arch`.
    pub fn build(schema: &FeatureSchema, arch: &PolicyArch, seed: u64) -> Result<Self> {
        if arch.dense.is_none() && arch.head.is_none() {
            return Err(Error::config("policy needs a dense path or a question head"));
        }
        if arch.head == Some(0) {
            return Err(Error::config("question head width must be positive"));
        }
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let layers = match &arch.dense {
            Some(hidden) => dense_layers(schema.dim(), hidden, schema.bank_size, arch.dense_init, &mut rng),
            None => Vec::new(),
        };
        let head = arch.head.map(|width| {
            let mut h = QuestionHead::zeros(schema.layout(), width, schema.bank_size);
            let s = arch.head_init;
            for v in h.a.iter_mut().chain(&mut h.b).chain(&mut h.u) {
                *v = rng.gen_range(-s..=s);
            }
            h
        });
        Ok(Self { layers, head })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.iter_mut().for_each(|v| *v = 0.0);
        z
    }

    pub fn input_dim(&self) -> usize {
        match (self.layers.first(), &self.head) {
            (Some(l), _) => l.inputs,
            (None, Some(h)) => h.layout.dim,
            (None, None) => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match (self.layers.last(), &self.head) {
            (Some(l), _) => l.outputs,
            (None, Some(h)) => h.bank_size(),
            (None, None) => 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.iter().count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .chain(self.head.iter().flat_map(|h| h.params()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
            .chain(self.head.iter_mut().flat_map(|h| h.params_mut()))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, alpha: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() && self.head.is_none() {
            return Err(Error::config("policy has no layers"));
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Dimension {
                    expected: w[0].outputs,
                    got: w[1].inputs,
                });
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::config("layer parameter lengths inconsistent"));
            }
        }
        if let Some(h) = &self.head {
            let ok = h.a.len() == h.width * QUESTION_FEATURES
                && h.b.len() == h.width * h.context_len()
                && h.c.len() == h.width
                && h.u.len() == h.width
                && h.layout.status.1 - h.layout.status.0 == 4 * h.bank_size();
            if !ok {
                return Err(Error::config("question head parameter lengths inconsistent"));
            }
            if !self.layers.is_empty()
                && (h.layout.dim != self.input_dim() || h.bank_size() != self.output_dim())
            {
                return Err(Error::Dimension {
                    expected: self.input_dim(),
                    got: h.layout.dim,
                });
            }
        }
        if !self.is_finite() {
            return Err(Error::config("non-finite parameters"));
        }
        Ok(())
    }

    fn check_input(&self, obs: &Observation) -> Result<()> {
        if obs.vector.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: obs.vector.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> ForwardCache {
        let mut logits = vec![0.0; self.output_dim()];
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        if !self.layers.is_empty() {
            acts.push(input.to_vec());
            let last = self.layers.len() - 1;
            for (i, layer) in self.layers.iter().enumerate() {
                let mut out = Vec::with_capacity(layer.outputs);
                layer.forward(acts.last().unwrap(), &mut out);
                if i < last {
                    out.iter_mut().for_each(|v| *v = v.tanh());
                }
                acts.push(out);
            }
            logits.copy_from_slice(acts.last().unwrap());
        }
        let head = self.head.as_ref().map(|h| {
            let context = h.context(input);
            let k = context.len();
            let shared: Vec<f64> = (0..h.width)
                .map(|j| h.c[j] + dot(&h.b[j * k..(j + 1) * k], &context))
                .collect();
            let mut hidden = vec![0.0; h.bank_size() * h.width];
            for (q, logit) in logits.iter_mut().enumerate() {
                let f = h.question_features(input, q);
                let row = &mut hidden[q * h.width..(q + 1) * h.width];
                for j in 0..h.width {
                    let a = &h.a[j * QUESTION_FEATURES..(j + 1) * QUESTION_FEATURES];
                    row[j] = (shared[j] + dot(a, &f)).tanh();
                }
                *logit += h.bias[q] + dot(&h.u, row);
            }
            HeadCache { context, hidden }
        });
        ForwardCache {
            acts,
            head,
            input: input.to_vec(),
            logits,
        }
    }

    pub fn logits(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.check_input(obs)?;
        Ok(self.forward(&obs.vector).logits)
    }

    /// Softmax over the bank; `mask[q] == false` removes question `q`.
    pub fn distribution(&self, obs: &Observation, mask: Option<&[bool]>) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(obs)?, mask))
    }

    /// Backpropagate `dlogits` (gradient w.r.t. the logits) and add `scale` times the
    /// parameter gradient into `grad`.
    pub fn accumulate_grad(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        scale: f64,
        grad: &mut PolicyParams,
    ) {
        let dl: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
        if !self.layers.is_empty() {
            self.dense_backward(cache, dl.clone(), grad);
        }
        if let (Some(h), Some(hc), Some(g)) = (&self.head, &cache.head, grad.head.as_mut()) {
            let k = hc.context.len();
            for (q, d) in dl.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[q] += d;
                let f = h.question_features(&cache.input, q);
                let row = &hc.hidden[q * h.width..(q + 1) * h.width];
                for j in 0..h.width {
                    g.u[j] += d * row[j];
                    let dz = d * h.u[j] * (1.0 - row[j] * row[j]);
                    g.c[j] += dz;
                    for (ga, fi) in g.a[j * QUESTION_FEATURES..(j + 1) * QUESTION_FEATURES]
                        .iter_mut()
                        .zip(&f)
                    {
                        *ga += dz * fi;
                    }
                    for (gb, ci) in g.b[j * k..(j + 1) * k].iter_mut().zip(&hc.context) {
                        *gb += dz * ci;
                    }
                }
            }
        }
    }

    fn dense_backward(&self, cache: &ForwardCache, mut delta: Vec<f64>, grad: &mut PolicyParams) {
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.acts[li];
            let g = &mut grad.layers[li];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if li == 0 {
                break;
            }
            // input to this layer is tanh output of the previous one
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    /// `grad_theta ln pi(q | o)`.
    pub fn grad_log_prob(
        &self,
        obs: &Observation,
        qid: usize,
        mask: Option<&[bool]>,
    ) -> Result<PolicyParams> {
        self.check_input(obs)?;
        let cache = self.forward(&obs.vector);
        let p = softmax(cache.logits(), mask);
        let mut dl: Vec<f64> = p.iter().map(|v| -v).collect();
        dl[qid] += 1.0;
        let mut g = self.zeros_like();
        self.accumulate_grad(&cache, &dl, 1.0, &mut g);
        Ok(g)
    }

    /// Mean negative log-likelihood of `batch` and its gradient.
    pub fn cross_entropy_grad(&self, batch: &[(Observation, usize)]) -> Result<(PolicyParams, f64)> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let mut g = self.zeros_like();
        let mut loss = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for (obs, y) in batch {
            self.check_input(obs)?;
            let cache = self.forward(&obs.vector);
            let p = softmax(cache.logits(), None);
            loss -= p[*y].max(f64::MIN_POSITIVE).ln();
            let mut dl = p;
            dl[*y] -= 1.0;
            self.accumulate_grad(&cache, &dl, inv, &mut g);
        }
        Ok((g, loss * inv))
    }

    /// One gradient-descent step on the mean negative log-likelihood; returns the loss
    /// before the step.
    pub fn cross_entropy_step(&mut self, batch: &[(Observation, usize)], lr: f64) -> Result<f64> {
        let (g, loss) = self.cross_entropy_grad(batch)?;
        if lr != 0.0 {
            self.add_scaled(&g, -lr);
        }
        Ok(loss)
    }
}

/// A policy together with the feature schema it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub horizon: usize,
    pub schema: FeatureSchema,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(horizon: usize, schema: FeatureSchema, params: PolicyParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            horizon,
            schema,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                c.format_version
            )));
        }
        c.params.validate()?;
        if c.params.input_dim() != c.schema.dim() || c.params.output_dim() != c.schema.bank_size {
            return Err(Error::Dimension {
                expected: c.schema.dim(),
                got: c.params.input_dim(),
            });
        }
        Ok(c)
    }
}
