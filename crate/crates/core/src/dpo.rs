//! Preference induction, the DPO objective and the two training phases.
//!
//! Off-policy: a teacher proposes `n` plans per failed-or-not state, each is
//! executed and scored, and every strictly ordered pair becomes a triple; the
//! reference policy is uniform. On-policy: the policy itself proposes `k`
//! plans per state (slot 0 is the greedy decode) for `T` iterations, with the
//! reference frozen at the off-policy result.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{propose_plans, TeacherOptions};
use crate::executor::Executor;
use crate::policy::{mix_seed, Gradient, PolicyError, PolicyParams};
use crate::reward::{reward_of, CorrectnessRule, Reward};
use crate::types::{
    validate_state, OpKind, Phase, Plan, PlanDefaults, PreferenceTriple, RagState,
    RefineInstruction, RewriteInstruction, DEFAULT_MAX_PLAN_LEN,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("config is not a JSON object: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpoError {
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("no training data")]
    NoTrainingData,
    #[error("{skipped} of {total} instances skipped, more than half")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("instance {index} (`{id}`): {message}")]
    InvalidInstance {
        index: usize,
        id: String,
        message: String,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}


fn default_batch_size() -> usize {
    2
}

fn default_max_plan_len() -> usize {
    DEFAULT_MAX_PLAN_LEN
}

fn default_topk() -> usize {
    crate::retrieval::DEFAULT_TOPK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs_off: usize,
    pub on_policy_iters: usize,
    pub candidates_off: usize,
    pub candidates_on: usize,
    /// Pairs whose reward gap is at most this are dropped; 0 keeps every strict pair.
    pub tie_epsilon: f64,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_plan_len")]
    pub max_plan_len: usize,
    #[serde(default = "default_topk")]
    pub topk: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pairs_per_instance: Option<usize>,
    #[serde(default)]
    pub correctness_rule: CorrectnessRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1e-2,
            epochs_off: 1,
            on_policy_iters: 3,
            candidates_off: 4,
            candidates_on: 4,
            tie_epsilon: 0.0,
            seed: 0,
            batch_size: default_batch_size(),
            max_plan_len: default_max_plan_len(),
            topk: default_topk(),
            optimizer: OptimizerKind::Sgd,
            max_pairs_per_instance: None,
            correctness_rule: CorrectnessRule::ExactMatch,
        }
    }
}

impl TrainConfig {
    /// Keys a config file must spell out.
    pub const REQUIRED_KEYS: [&'static str; 8] = [
        "beta",
        "learning_rate",
        "epochs_off",
        "on_policy_iters",
        "candidates_off",
        "candidates_on",
        "tie_epsilon",
        "seed",
    ];

    pub const OPTIONAL_KEYS: [&'static str; 6] = [
        "batch_size",
        "max_plan_len",
        "topk",
        "optimizer",
        "max_pairs_per_instance",
        "correctness_rule",
    ];

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ConfigError::Parse("top level must be an object".into()))?;
        for key in Self::REQUIRED_KEYS {
            if !obj.contains_key(key) {
                return Err(ConfigError::MissingKey(key.to_string()));
            }
        }
        for key in obj.keys() {
            if !Self::REQUIRED_KEYS.contains(&key.as_str()) && !Self::OPTIONAL_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        for (key, v) in obj {
            let probe = serde_json::json!({ key.clone(): v.clone() });
            if let Err(e) = check_field(probe) {
                return Err(ConfigError::Invalid {
                    key: key.clone(),
                    message: e,
                });
            }
        }
        let config: TrainConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid {
            key: "<config>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Invalid {
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.epochs_off < 1 {
            return bad("epochs_off", "must be at least 1");
        }
        if self.on_policy_iters < 1 {
            return bad("on_policy_iters", "must be at least 1");
        }
        if self.candidates_off < 2 {
            return bad("candidates_off", "must be at least 2");
        }
        if self.candidates_on < 2 {
            return bad("candidates_on", "must be at least 2");
        }
        if !(self.tie_epsilon >= 0.0 && self.tie_epsilon.is_finite()) {
            return bad("tie_epsilon", "must be non-negative");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_plan_len < 1 {
            return bad("max_plan_len", "must be at least 1");
        }
        if self.topk < 1 {
            return bad("topk", "must be at least 1");
        }
        if self.max_pairs_per_instance == Some(0) {
            return bad("max_pairs_per_instance", "must be at least 1");
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad("optimizer", "adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        if let CorrectnessRule::F1Threshold(tau) = self.correctness_rule {
            if !(0.0..=1.0).contains(&tau) {
                return bad("correctness_rule", "tau must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn plan_defaults(&self) -> PlanDefaults {
        PlanDefaults {
            topk: self.topk,
            rewrite: RewriteInstruction::Clarify,
            refine: RefineInstruction::Summarize,
        }
    }
}

/// Type-checks one key in isolation so errors name the offending key.
fn check_field(probe: serde_json::Value) -> Result<(), String> {
    #[derive(Deserialize)]
    #[allow(dead_code)]
    struct Probe {
        beta: Option<f64>,
        learning_rate: Option<f64>,
        epochs_off: Option<usize>,
        on_policy_iters: Option<usize>,
        candidates_off: Option<usize>,
        candidates_on: Option<usize>,
        tie_epsilon: Option<f64>,
        seed: Option<u64>,
        batch_size: Option<usize>,
        max_plan_len: Option<usize>,
        topk: Option<usize>,
        optimizer: Option<OptimizerKind>,
        max_pairs_per_instance: Option<Option<usize>>,
        correctness_rule: Option<CorrectnessRule>,
    }
    serde_json::from_value::<Probe>(probe)
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Every pair `(i, j)`, `i < j`, whose rewards differ by more than
/// `tie_epsilon`, oriented so the better plan is preferred.
pub fn build_preferences(
    state: &Arc<RagState>,
    candidates: &[(Plan, Reward)],
    tie_epsilon: f64,
) -> Result<Vec<PreferenceTriple>, DpoError> {
    if candidates.len() < 2 {
        return Err(DpoError::TooFewCandidates(candidates.len()));
    }
    let mut out = Vec::new();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            let (ri, rj) = (candidates[i].1.value(), candidates[j].1.value());
            let (plus, minus) = if ri - rj > tie_epsilon {
                (i, j)
            } else if rj - ri > tie_epsilon {
                (j, i)
            } else {
                continue;
            };
            let triple = PreferenceTriple::new(
                Arc::clone(state),
                candidates[plus].0.clone(),
                candidates[minus].0.clone(),
                candidates[plus].1.value(),
                candidates[minus].1.value(),
            )
            .expect("orientation guarantees a strict reward gap");
            out.push(triple);
        }
    }
    Ok(out)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `β·[(ln πθ(y+) − ln πref(y+)) − (ln πθ(y−) − ln πref(y−))]`.
pub fn dpo_margin(
    theta: &PolicyParams,
    reference: &PolicyParams,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64, PolicyError> {
    let s = triple.state();
    let plus = theta.plan_logprob(s, triple.preferred())? - reference.plan_logprob(s, triple.preferred())?;
    let minus =
        theta.plan_logprob(s, triple.dispreferred())? - reference.plan_logprob(s, triple.dispreferred())?;
    Ok(beta * (plus - minus))
}

/// `−ln σ(margin)`.
pub fn dpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64, PolicyError> {
    Ok(softplus(-dpo_margin(theta, reference, triple, beta)?))
}

/// `−β·σ(−margin)·[∇ ln πθ(y+) − ∇ ln πθ(y−)]`.
pub fn dpo_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<Gradient, PolicyError> {
    Ok(dpo_loss_and_grad(theta, reference, triple, beta)?.1)
}

pub fn dpo_loss_and_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<(f64, Gradient), PolicyError> {
    let margin = dpo_margin(theta, reference, triple, beta)?;
    let coef = -beta * sigmoid(-margin);
    let s = triple.state();
    let gp = theta.grad_logprob(s, &triple.preferred().kinds())?;
    let gm = theta.grad_logprob(s, &triple.dispreferred().kinds())?;
    let g = gp.iter().zip(&gm).map(|(a, b)| coef * (a - b)).collect();
    Ok((softplus(-margin), g))
}

/// Moment estimates carried between Adam steps; empty for SGD.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self::with_state(kind, learning_rate, OptimizerState::default())
    }

    pub fn with_state(kind: OptimizerKind, learning_rate: f64, state: OptimizerState) -> Self {
        Self {
            kind,
            learning_rate,
            state,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64]) {
        let lr = self.learning_rate;
        let w = params.weights_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for (wi, gi) in w.iter_mut().zip(grad) {
                    *wi -= lr * gi;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let st = &mut self.state;
                if st.m.len() != w.len() {
                    st.m = vec![0.0; w.len()];
                    st.v = vec![0.0; w.len()];
                }
                st.t += 1;
                let b1t = 1.0 - beta1.powi(st.t as i32);
                let b2t = 1.0 - beta2.powi(st.t as i32);
                for i in 0..w.len() {
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = st.m[i] / b1t;
                    let vh = st.v[i] / b2t;
                    w[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Loss statistics of one pass over a triple set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub index: usize,
    pub triples: usize,
    pub batches: usize,
    /// Mean pre-update loss over all triples; absent when there were none.
    pub mean_loss: Option<f64>,
    /// Mean reward of the greedy candidate (on-policy only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_greedy_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub phase: Phase,
    pub seed: u64,
    pub config: TrainConfig,
    pub instances: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
    pub triples: usize,
    pub first_batch_loss: Option<f64>,
    pub epochs: Vec<EpochStats>,
}

impl RunManifest {
    fn new(phase: Phase, config: &TrainConfig, instances: usize) -> Self {
        Self {
            phase,
            seed: config.seed,
            config: config.clone(),
            instances,
            skipped: 0,
            skipped_ids: Vec::new(),
            triples: 0,
            first_batch_loss: None,
            epochs: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DpoError> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DpoError> {
    let io = |e: std::io::Error| DpoError::Checkpoint(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| DpoError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

fn check_dataset(dataset: &[RagState], phase: Phase) -> Result<(), DpoError> {
    if dataset.is_empty() {
        return Err(DpoError::NoTrainingData);
    }
    for (index, s) in dataset.iter().enumerate() {
        let fail = |message: String| DpoError::InvalidInstance {
            index,
            id: s.question.id.clone(),
            message,
        };
        if s.phase != phase {
            return Err(fail(format!("expected phase {phase:?}, found {:?}", s.phase)));
        }
        if s.gold_answers().is_none_or(|g| g.is_empty()) {
            return Err(fail("gold answers are required for training".into()));
        }
        if let Some(v) = validate_state(s).first() {
            return Err(fail(v.to_string()));
        }
    }
    Ok(())
}

/// Keeps the `m` pairs with the largest reward gap, preserving order among equals.
fn cap_pairs(mut triples: Vec<PreferenceTriple>, cap: Option<usize>) -> Vec<PreferenceTriple> {
    if let Some(m) = cap {
        if triples.len() > m {
            triples.sort_by(|a, b| {
                let ga = a.reward_plus() - a.reward_minus();
                let gb = b.reward_plus() - b.reward_minus();
                gb.total_cmp(&ga)
            });
            triples.truncate(m);
        }
    }
    triples
}

/// One shuffled pass of mini-batch updates with the mean batch gradient.
fn run_pass(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    optimizer: &mut Optimizer,
    triples: &[PreferenceTriple],
    config: &TrainConfig,
    shuffle_seed: u64,
    index: usize,
) -> Result<(EpochStats, Option<f64>), DpoError> {
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let mut total_loss = 0.0;
    let mut first = None;
    let mut batches = 0;
    for batch in order.chunks(config.batch_size) {
        let mut grad = vec![0.0; PolicyParams::N_WEIGHTS];
        let mut batch_loss = 0.0;
        for &i in batch {
            let (l, g) = dpo_loss_and_grad(params, reference, &triples[i], config.beta)?;
            batch_loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        first.get_or_insert(batch_loss / n);
        total_loss += batch_loss;
        batches += 1;
        optimizer.step(params, &grad);
    }
    let stats = EpochStats {
        index,
        triples: triples.len(),
        batches,
        mean_loss: (!triples.is_empty()).then(|| total_loss / triples.len() as f64),
        mean_greedy_reward: None,
    };
    Ok((stats, first))
}

const SALT_SHUFFLE_OFF: u64 = 0x6f66_665f_7368_7566;
const SALT_SHUFFLE_ON: u64 = 0x6f6e_5f73_6875_6666;
const SALT_SAMPLE_ON: u64 = 0x6f6e_5f73_616d_706c;

/// Off-policy bootstrapping from teacher proposals. Returns `π_off`.
pub fn train_off_policy(
    dataset: &[RagState],
    config: &TrainConfig,
    executor: &Executor<'_>,
) -> Result<(PolicyParams, RunManifest), DpoError> {
    config.validate()?;
    check_dataset(dataset, Phase::OffPolicy)?;
    let teacher = TeacherOptions {
        max_plan_len: config.max_plan_len,
        ..TeacherOptions::default()
    };
    let per_instance: Vec<Option<Vec<PreferenceTriple>>> = dataset
        .par_iter()
        .map(|state| {
            let plans = match propose_plans(executor.backend(), state, config.candidates_off, teacher) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("skipping `{}`: teacher failed: {e}", state.question.id);
                    return None;
                }
            };
            let scored: Vec<(Plan, Reward)> = plans
                .into_iter()
                .map(|p| {
                    let (r, _) = reward_of(state, &p, executor).expect("dataset checked for golds");
                    (p, r)
                })
                .collect();
            let shared = Arc::new(state.clone());
            let triples = build_preferences(&shared, &scored, config.tie_epsilon).unwrap_or_default();
            Some(cap_pairs(triples, config.max_pairs_per_instance))
        })
        .collect();

    let mut manifest = RunManifest::new(Phase::OffPolicy, config, dataset.len());
    let mut triples = Vec::new();
    for (state, r) in dataset.iter().zip(per_instance) {
        match r {
            Some(t) => triples.extend(t),
            None => {
                manifest.skipped += 1;
                manifest.skipped_ids.push(state.question.id.clone());
            }
        }
    }
    if manifest.skipped * 2 > dataset.len() {
        return Err(DpoError::TooManySkipped {
            skipped: manifest.skipped,
            total: dataset.len(),
        });
    }
    manifest.triples = triples.len();

    let reference = PolicyParams::zeros(config.max_plan_len);
    let mut params = reference.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    for epoch in 0..config.epochs_off {
        let seed = mix_seed(&[config.seed, SALT_SHUFFLE_OFF, epoch as u64]);
        let (stats, first) = run_pass(&mut params, &reference, &mut optimizer, &triples, config, seed, epoch)?;
        if epoch == 0 {
            manifest.first_batch_loss = first;
        }
        log::info!(
            "off-policy epoch {epoch}: {} triples, mean loss {:?}",
            stats.triples,
            stats.mean_loss
        );
        manifest.epochs.push(stats);
    }
    Ok((params, manifest))
}

const ON_POLICY_CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue an interrupted on-policy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnPolicyCheckpoint {
    pub format_version: u32,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub iterations_done: usize,
    pub optimizer: OptimizerState,
    pub manifest: RunManifest,
}

impl OnPolicyCheckpoint {
    /// A fresh run starting from `π_off`, which also becomes the frozen reference.
    pub fn start(pi_off: &PolicyParams, config: &TrainConfig, instances: usize) -> Self {
        Self {
            format_version: ON_POLICY_CHECKPOINT_VERSION,
            params: pi_off.clone(),
            reference: pi_off.clone(),
            iterations_done: 0,
            optimizer: OptimizerState::default(),
            manifest: RunManifest::new(Phase::OnPolicy, config, instances),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.iterations_done >= self.manifest.config.on_policy_iters
    }

    pub fn save(&self, path: &Path) -> Result<(), DpoError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, DpoError> {
        let file = File::open(path).map_err(|e| DpoError::Checkpoint(format!("{}: {e}", path.display())))?;
        let c: Self = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DpoError::Checkpoint(e.to_string()))?;
        if c.format_version != ON_POLICY_CHECKPOINT_VERSION {
            return Err(DpoError::Checkpoint(format!(
                "unsupported format version {}",
                c.format_version
            )));
        }
        Ok(c)
    }
}

/// Candidate kinds for one instance: greedy decode first, then samples, deduplicated.
fn on_policy_candidates(
    params: &PolicyParams,
    state: &RagState,
    config: &TrainConfig,
    iteration: usize,
    instance: usize,
) -> Vec<Plan> {
    let defaults = config.plan_defaults();
    let mut plans = vec![params.decode_plan(state, defaults)];
    for slot in 1..config.candidates_on {
        let seed = mix_seed(&[config.seed, SALT_SAMPLE_ON, iteration as u64, instance as u64, slot as u64]);
        let p = params.sample_plan(state, seed, defaults);
        if !plans.contains(&p) {
            plans.push(p);
        }
    }
    plans
}

/// Runs on-policy iterations from `checkpoint` until the configured count is
/// reached or `stop_after` further iterations have run.
pub fn continue_on_policy(
    mut checkpoint: OnPolicyCheckpoint,
    dataset: &[RagState],
    executor: &Executor<'_>,
    stop_after: Option<usize>,
) -> Result<OnPolicyCheckpoint, DpoError> {
    let config = checkpoint.manifest.config.clone();
    config.validate()?;
    check_dataset(dataset, Phase::OnPolicy)?;
    if checkpoint.manifest.instances != dataset.len() {
        return Err(DpoError::Checkpoint(format!(
            "checkpoint was built for {} instances, dataset has {}",
            checkpoint.manifest.instances,
            dataset.len()
        )));
    }
    let mut optimizer =
        Optimizer::with_state(config.optimizer, config.learning_rate, checkpoint.optimizer.clone());
    let mut ran = 0;
    while !checkpoint.is_finished() && stop_after.is_none_or(|n| ran < n) {
        let iteration = checkpoint.iterations_done;
        let params = &checkpoint.params;
        let per_instance: Vec<(Vec<PreferenceTriple>, f64)> = dataset
            .par_iter()
            .enumerate()
            .map(|(i, state)| {
                let scored: Vec<(Plan, Reward)> = on_policy_candidates(params, state, &config, iteration, i)
                    .into_iter()
                    .map(|p| {
                        let (r, _) = reward_of(state, &p, executor).expect("dataset checked for golds");
                        (p, r)
                    })
                    .collect();
                let greedy = scored[0].1.value();
                let shared = Arc::new(state.clone());
                let triples = build_preferences(&shared, &scored, config.tie_epsilon).unwrap_or_default();
                (cap_pairs(triples, config.max_pairs_per_instance), greedy)
            })
            .collect();
        let greedy_mean = per_instance.iter().map(|(_, g)| g).sum::<f64>() / dataset.len() as f64;
        let triples: Vec<PreferenceTriple> = per_instance.into_iter().flat_map(|(t, _)| t).collect();
        let seed = mix_seed(&[config.seed, SALT_SHUFFLE_ON, iteration as u64]);
        let (mut stats, first) = run_pass(
            &mut checkpoint.params,
            &checkpoint.reference,
            &mut optimizer,
            &triples,
            &config,
            seed,
            iteration,
        )?;
        stats.mean_greedy_reward = Some(greedy_mean);
        if iteration == 0 {
            checkpoint.manifest.first_batch_loss = first;
        }
        log::info!(
            "on-policy iteration {iteration}: {} triples, greedy reward {greedy_mean:.4}, mean loss {:?}",
            stats.triples,
            stats.mean_loss
        );
        checkpoint.manifest.triples += triples.len();
        checkpoint.manifest.epochs.push(stats);
        checkpoint.iterations_done += 1;
        checkpoint.optimizer = optimizer.state().clone();
        ran += 1;
    }
    Ok(checkpoint)
}

/// On-policy refinement of `π_off` for the configured number of iterations.
pub fn train_on_policy(
    dataset: &[RagState],
    pi_off: &PolicyParams,
    config: &TrainConfig,
    executor: &Executor<'_>,
) -> Result<(PolicyParams, RunManifest), DpoError> {
    config.validate()?;
    if pi_off.max_len() != config.max_plan_len {
        return Err(DpoError::Policy(PolicyError::DimensionMismatch {
            expected: config.max_plan_len,
            got: pi_off.max_len(),
        }));
    }
    let start = OnPolicyCheckpoint::start(pi_off, config, dataset.len());
    let done = continue_on_policy(start, dataset, executor, None)?;
    Ok((done.params, done.manifest))
}

/// Distribution of kinds in a set of plans, excluding the terminal step.
pub fn kind_histogram<'a>(plans: impl IntoIterator<Item = &'a Plan>) -> [usize; OpKind::COUNT] {
    let mut h = [0; OpKind::COUNT];
    for p in plans {
        for k in p.kinds() {
            if k != OpKind::GenerateAnswer {
                h[k.index()] += 1;
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Document, PlanSource, Question};

    fn state() -> Arc<RagState> {
        Arc::new(RagState {
            question: Question::new("q", "capital of france").with_golds(vec!["paris".into()]),
            docs: vec![Document::new("d", "paris")],
            initial_answer: "lyon".into(),
            phase: Phase::OnPolicy,
            correctness: Some(true),
            reasoning_trace: None,
        })
    }

    fn plan(kinds: &[OpKind]) -> Plan {
        Plan::from_kinds(kinds, PlanDefaults::default(), PlanSource::Manual, 6).unwrap()
    }

    fn r(x: f64) -> Reward {
        Reward::new(x).unwrap()
    }

    #[test]
    fn preference_pairs() {
        let s = state();
        let a = plan(&[OpKind::Retrieval]);
        let b = plan(&[]);
        assert_eq!(build_preferences(&s, &[(a.clone(), r(1.0)), (b.clone(), r(0.0))], 0.0).unwrap().len(), 1);
        assert!(build_preferences(&s, &[(a.clone(), r(0.5)), (b.clone(), r(0.5))], 0.0).unwrap().is_empty());
        let c = plan(&[OpKind::RewriteQuery]);
        let d = plan(&[OpKind::RefineDoc]);
        let four = [(a, r(0.9)), (b, r(0.5)), (c, r(0.5)), (d, r(0.1))];
        let t = build_preferences(&s, &four, 0.0).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|t| t.reward_plus() > t.reward_minus()));
        assert_eq!(build_preferences(&s, &four, 0.5).unwrap().len(), 1);
        assert_eq!(build_preferences(&s, &four[..1], 0.0).unwrap_err(), DpoError::TooFewCandidates(1));
    }

    #[test]
    fn loss_at_reference_is_ln2() {
        let s = state();
        let t = build_preferences(&s, &[(plan(&[OpKind::Retrieval]), r(1.0)), (plan(&[]), r(0.0))], 0.0)
            .unwrap()
            .remove(0);
        let mut p = PolicyParams::zeros(2);
        p.set_weight(OpKind::Retrieval, 3, 0.7);
        for beta in [0.05, 0.1, 2.0] {
            assert!((dpo_loss(&p, &p, &t, beta).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let mut q = p.clone();
        q.set_weight(OpKind::Retrieval, 0, 500.0);
        q.set_weight(OpKind::GenerateAnswer, 0, -500.0);
        assert!(dpo_loss(&q, &p, &t, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn identical_kind_sequences_have_zero_gradient() {
        let s = state();
        let a = plan(&[OpKind::Retrieval]);
        let mut b = Plan::from_kinds(
            &[OpKind::Retrieval],
            PlanDefaults { topk: 2, ..Default::default() },
            PlanSource::Manual,
            6,
        )
        .unwrap();
        b = b.with_source(PlanSource::Teacher);
        let t = PreferenceTriple::new(s, a, b, 1.0, 0.0).unwrap();
        let p = PolicyParams::zeros(6);
        assert!(dpo_grad(&p, &p, &t, 0.1).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_step_lowers_loss() {
        let s = state();
        let t = PreferenceTriple::new(s, plan(&[OpKind::DecomposeQuery, OpKind::Retrieval]), plan(&[]), 1.0, 0.2)
            .unwrap();
        let reference = PolicyParams::zeros(6);
        let mut p = reference.clone();
        let l0 = dpo_loss(&p, &reference, &t, 0.1).unwrap();
        let g = dpo_grad(&p, &reference, &t, 0.1).unwrap();
        Optimizer::new(OptimizerKind::Sgd, 1e-2).step(&mut p, &g);
        assert!(dpo_loss(&p, &reference, &t, 0.1).unwrap() < l0);

        let mut adam = Optimizer::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, 1e-2);
        let mut p = reference.clone();
        let g = dpo_grad(&p, &reference, &t, 0.1).unwrap();
        adam.step(&mut p, &g);
        assert_eq!(adam.state().t, 1);
        assert!(dpo_loss(&p, &reference, &t, 0.1).unwrap() < l0);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn config_parsing() {
        let full = r#"{"beta":0.1,"learning_rate":0.01,"epochs_off":1,"on_policy_iters":3,
            "candidates_off":4,"candidates_on":4,"tie_epsilon":0.0,"seed":7}"#;
        let c = TrainConfig::from_json_str(full).unwrap();
        assert_eq!(c, TrainConfig { seed: 7, ..TrainConfig::default() });

        let missing = r#"{"beta":0.1,"learning_rate":0.01,"epochs_off":1,"on_policy_iters":3,
            "candidates_off":4,"tie_epsilon":0.0,"seed":7}"#;
        assert_eq!(
            TrainConfig::from_json_str(missing).unwrap_err(),
            ConfigError::MissingKey("candidates_on".into())
        );
        let unknown = full.replace("\"seed\":7", "\"seed\":7,\"gamma\":1");
        assert_eq!(TrainConfig::from_json_str(&unknown).unwrap_err(), ConfigError::UnknownKey("gamma".into()));
        let bad = full.replace("\"beta\":0.1", "\"beta\":\"big\"");
        assert!(matches!(TrainConfig::from_json_str(&bad), Err(ConfigError::Invalid { key, .. }) if key == "beta"));
        let neg = full.replace("\"beta\":0.1", "\"beta\":-1");
        assert!(matches!(TrainConfig::from_json_str(&neg), Err(ConfigError::Invalid { key, .. }) if key == "beta"));
        let small = full.replace("\"candidates_on\":4", "\"candidates_on\":1");
        assert!(TrainConfig::from_json_str(&small).is_err());
        let adam = full.replace("\"seed\":7", r#""seed":7,"optimizer":{"kind":"adam","beta1":0.9,"beta2":0.999,"eps":1e-8}"#);
        assert!(matches!(TrainConfig::from_json_str(&adam).unwrap().optimizer, OptimizerKind::Adam { .. }));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let idx = crate::retrieval::build_index(
            &crate::retrieval::Corpus::new(vec![Document::new("d", "x")]).unwrap(),
        )
        .unwrap();
        let b = crate::backend::ScriptedBackend::new(vec![]).unwrap();
        let ex = Executor::new(&idx, &b, Default::default());
        assert_eq!(
            train_off_policy(&[], &TrainConfig::default(), &ex).unwrap_err(),
            DpoError::NoTrainingData
        );
        let pi = PolicyParams::zeros(DEFAULT_MAX_PLAN_LEN);
        assert_eq!(
            train_on_policy(&[], &pi, &TrainConfig::default(), &ex).unwrap_err(),
            DpoError::NoTrainingData
        );
    }
}
