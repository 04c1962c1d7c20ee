//! The RL loop: snapshot, sample groups of joint rollouts, score, standardize
//! rewards within each group, then take several clipped-surrogate ascent steps
//! per snapshot with linear warmup and decoupled weight decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magspo::{magspo_objective, ClipConfig, MagspoError, RolloutGroup, SurrogateInputs, DEFAULT_STD_FLOOR};
use crate::policy::{PolicyError, PolicyModel, PolicyParameters};
use crate::rewards::{RewardBreakdown, RewardError, Scorer};
use crate::synthenv::{short_hash, Case, CaseDataset, Split};
use crate::workflow::{final_report, mix_seed, run_joint_rollout, snapshot_all, AgentId, AgentParams, WorkflowError, WorkflowPlan};

pub const METRICS_HEADER_TAG: &str = "# metrics-v1";
pub const CHECKPOINT_SCHEMA: &str = "checkpoint-v1";
const GRAD_NORM_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("step {step}: {source}")]
    Workflow {
        step: u64,
        #[source]
        source: WorkflowError,
    },
    #[error("step {step}: {source}")]
    Surrogate {
        step: u64,
        #[source]
        source: MagspoError,
    },
    #[error("step {step}: {source}")]
    Reward {
        step: u64,
        #[source]
        source: RewardError,
    },
    #[error("step {step}: divergence in agent {agent}: {detail}")]
    Divergence { step: u64, agent: AgentId, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Update rule applied to each agent's surrogate gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain ascent: `w <- w * (1 - lr * wd) + lr * g`.
    Sgd,
    /// Bias-corrected first and second moments with decoupled decay.
    #[serde(rename = "adamw")]
    AdamW,
}

impl OptimizerKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::AdamW => "adamw",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::AdamW),
            _ => Err(()),
        }
    }
}

/// Training hyperparameters. Parsed from flat `key = value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub cases_per_batch: usize,
    pub update_minibatch: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub total_steps: u64,
    pub std_floor: f64,
    pub master_seed: u64,
    pub checkpoint_every: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            cases_per_batch: 16,
            update_minibatch: 4,
            learning_rate: 0.05,
            warmup_fraction: 0.05,
            weight_decay: 0.1,
            temperature: 1.0,
            eps_low: 3e-4,
            eps_high: 4e-4,
            total_steps: 300,
            std_floor: DEFAULT_STD_FLOOR,
            master_seed: 0,
            checkpoint_every: 50,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Settings for a billion-parameter policy: same schedule, much smaller rate.
    pub fn large_model() -> Self {
        Self {
            learning_rate: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.cases_per_batch == 0 || self.update_minibatch == 0 {
            return bad("cases_per_batch and update_minibatch must be positive");
        }
        if !self.cases_per_batch.is_multiple_of(self.update_minibatch) {
            return bad("update_minibatch must divide cases_per_batch");
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("std_floor", self.std_floor),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.learning_rate * self.weight_decay < 1.0) {
            return bad("weight_decay must be non-negative with learning_rate * weight_decay < 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        self.clip()?;
        Ok(())
    }

    pub fn clip(&self) -> Result<ClipConfig, TrainError> {
        ClipConfig::new(self.eps_low, self.eps_high).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let err = || TrainError::Config(format!("line {}: bad value {value:?} for {key}", n + 1));
            macro_rules! set {
                ($field:ident) => {
                    cfg.$field = value.parse().map_err(|_| err())?
                };
            }
            match key {
                "group_size" => set!(group_size),
                "cases_per_batch" => set!(cases_per_batch),
                "update_minibatch" => set!(update_minibatch),
                "learning_rate" => set!(learning_rate),
                "warmup_fraction" => set!(warmup_fraction),
                "weight_decay" => set!(weight_decay),
                "temperature" => set!(temperature),
                "eps_low" => set!(eps_low),
                "eps_high" => set!(eps_high),
                "total_steps" => set!(total_steps),
                "std_floor" => set!(std_floor),
                "master_seed" => set!(master_seed),
                "checkpoint_every" => set!(checkpoint_every),
                "optimizer" => set!(optimizer),
                "beta1" => set!(beta1),
                "beta2" => set!(beta2),
                "adam_eps" => set!(adam_eps),
                other => return Err(TrainError::Config(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "cases_per_batch = {}", self.cases_per_batch);
        let _ = writeln!(s, "update_minibatch = {}", self.update_minibatch);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "warmup_fraction = {:?}", self.warmup_fraction);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "temperature = {:?}", self.temperature);
        let _ = writeln!(s, "eps_low = {:?}", self.eps_low);
        let _ = writeln!(s, "eps_high = {:?}", self.eps_high);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "std_floor = {:?}", self.std_floor);
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "optimizer = {}", self.optimizer.label());
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "adam_eps = {:?}", self.adam_eps);
        s
    }

    pub fn hash(&self) -> String {
        short_hash(self.to_config_string().as_bytes())
    }

    /// `lr_max * min(1, step / (warmup_fraction * total_steps))` for the
    /// 1-based index of the step being executed.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_fraction * self.total_steps as f64;
        if warm <= 0.0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / warm).min(1.0)
    }
}

/// Per-agent AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    const MAGIC: &'static str = "adam-moments v1";

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n", Self::MAGIC, self.t, self.m.len()).into_bytes();
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(format!("moments: {m}"));
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(Self::MAGIC.as_bytes()) {
            return Err(bad("bad header"));
        }
        let dims = std::str::from_utf8(lines.next().ok_or_else(|| bad("missing sizes"))?).map_err(|_| bad("sizes not utf-8"))?;
        let (t, len) = dims.split_once(' ').ok_or_else(|| bad("bad sizes"))?;
        let t: u64 = t.parse().map_err(|_| bad("bad update count"))?;
        let len: usize = len.parse().map_err(|_| bad("bad length"))?;
        let body = lines.next().unwrap_or_default();
        if body.len() != 16 * len {
            return Err(bad("truncated body"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            t,
            m: vals[..len].to_vec(),
            v: vals[len..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub params: AgentParams,
    /// Empty under plain ascent.
    pub moments: BTreeMap<AgentId, Moments>,
}

impl TrainState {
    pub fn init(plan: &WorkflowPlan, model: &PolicyModel) -> Self {
        Self {
            step: 0,
            params: plan.init_params(model),
            moments: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_rouge_l: f64,
    pub mean_label_acc: f64,
    pub mean_graph_f1: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub grad_norms: BTreeMap<AgentId, f64>,
    /// Objective of every minibatch, in update order.
    #[serde(skip)]
    pub minibatch_objectives: Vec<f64>,
    #[serde(skip)]
    pub minibatch_clip_fractions: Vec<f64>,
}

impl StepMetrics {
    pub fn csv_header(agents: &[AgentId]) -> String {
        let mut h = String::from("step,mean_reward,mean_rouge_l,mean_label_acc,mean_graph_f1,objective,clip_fraction");
        for a in agents {
            let _ = write!(h, ",grad_norm_{a}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            self.mean_reward,
            self.mean_rouge_l,
            self.mean_label_acc,
            self.mean_graph_f1,
            self.objective,
            self.clip_fraction
        );
        for n in self.grad_norms.values() {
            let _ = write!(r, ",{n:?}");
        }
        r
    }
}

/// Where the next batch comes from: epoch and position within its permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub master_seed: u64,
    pub epoch: u64,
    pub cursor: u64,
}

/// Training run bound to a plan, dataset split and config.
pub struct Trainer<'a> {
    pub plan: &'a WorkflowPlan,
    pub model: &'a PolicyModel,
    pub scorer: &'a Scorer,
    pub cases: Vec<&'a Case>,
    pub config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        plan: &'a WorkflowPlan,
        model: &'a PolicyModel,
        scorer: &'a Scorer,
        dataset: &'a CaseDataset,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let cases = dataset.split(Split::Train);
        if cases.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        Ok(Self {
            plan,
            model,
            scorer,
            cases,
            config,
        })
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.cases.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.master_seed, 0xE90C, epoch]));
        order.shuffle(&mut rng);
        order
    }

    /// Sampler position before `step` (0-based) runs.
    pub fn sampler_state(&self, step: u64) -> SamplerState {
        let pos = step * self.config.cases_per_batch as u64;
        let n = self.cases.len() as u64;
        SamplerState {
            master_seed: self.config.master_seed,
            epoch: pos / n,
            cursor: pos % n,
        }
    }

    /// Training cases for `step`: consecutive slots of per-epoch permutations,
    /// so each epoch visits every case once.
    pub fn batch_for(&self, step: u64) -> Vec<&'a Case> {
        let n = self.cases.len() as u64;
        let start = step * self.config.cases_per_batch as u64;
        let mut out = Vec::with_capacity(self.config.cases_per_batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for p in start..start + self.config.cases_per_batch as u64 {
            let epoch = p / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            let order = &cached.as_ref().expect("set above").1;
            out.push(self.cases[order[(p % n) as usize]]);
        }
        out
    }

    /// Sample, score and group the rollouts for one step under the current
    /// parameters (which act as the step's snapshot).
    pub fn collect_groups(&self, state: &TrainState) -> Result<(Vec<RolloutGroup>, Vec<RewardBreakdown>), TrainError> {
        let step = state.step;
        let snaps = snapshot_all(&state.params);
        let batch = self.batch_for(step);
        let g = self.config.group_size;
        let jobs: Vec<(usize, usize)> = (0..batch.len()).flat_map(|c| (0..g).map(move |i| (c, i))).collect();
        let results: Vec<_> = jobs
            .par_iter()
            .map(|&(c, i)| {
                let case = batch[c];
                let seed = mix_seed(&[self.config.master_seed, step, case.case_id, i as u64]);
                let rollout = run_joint_rollout(
                    self.plan,
                    self.model,
                    &snaps,
                    self.scorer.vocab(),
                    case.query(),
                    self.config.temperature,
                    seed,
                )
                .map_err(|source| TrainError::Workflow { step, source })?;
                let report = final_report(&rollout, self.scorer.vocab());
                let reward = self
                    .scorer
                    .combined_reward(&report, &case.truth_report, &case.truth_labels, &case.truth_graph)
                    .map_err(|source| TrainError::Reward { step, source })?;
                Ok((rollout, reward))
            })
            .collect::<Result<_, TrainError>>()?;
        let mut groups = Vec::with_capacity(batch.len());
        let mut breakdowns = Vec::with_capacity(results.len());
        let mut it = results.into_iter();
        for case in &batch {
            let (rollouts, rewards): (Vec<_>, Vec<_>) = it.by_ref().take(g).unzip();
            let totals: Vec<f64> = rewards.iter().map(|r: &RewardBreakdown| r.total).collect();
            breakdowns.extend(rewards);
            let mut group =
                RolloutGroup::new(case.case_id, rollouts, totals).map_err(|source| TrainError::Surrogate { step, source })?;
            group
                .fill_advantages(self.config.std_floor)
                .map_err(|source| TrainError::Surrogate { step, source })?;
            groups.push(group);
        }
        Ok((groups, breakdowns))
    }

    /// One outer step: rollouts under a snapshot, then one update per minibatch.
    pub fn train_step(&self, state: &mut TrainState) -> Result<StepMetrics, TrainError> {
        let step = state.step;
        let (groups, breakdowns) = self.collect_groups(state)?;
        let clip = self.config.clip()?;
        let lr = self.config.lr_at(step + 1);
        let decay = 1.0 - lr * self.config.weight_decay;
        let mut objectives = Vec::new();
        let mut clip_fracs = Vec::new();
        let mut clipped = 0usize;
        let mut terms = 0usize;
        let mut norm_acc: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
        for mb in groups.chunks(self.config.update_minibatch) {
            let inputs = SurrogateInputs {
                plan: self.plan,
                model: self.model,
                params: &state.params,
                clip,
                temperature: self.config.temperature,
            };
            let report = magspo_objective(mb, &inputs).map_err(|source| TrainError::Surrogate { step, source })?;
            objectives.push(report.objective);
            clip_fracs.push(report.clip_fraction());
            clipped += report.clipped_count();
            terms += report.terms.len();
            for (agent, grad) in &report.gradients {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm.is_nan() || norm > GRAD_NORM_LIMIT {
                    return Err(TrainError::Divergence {
                        step,
                        agent: agent.clone(),
                        detail: format!("gradient norm {norm}"),
                    });
                }
                norm_acc.entry(agent.clone()).or_default().push(norm);
                let params = state.params.get_mut(agent).expect("gradient agents come from params");
                match self.config.optimizer {
                    OptimizerKind::Sgd => apply_update(params, grad, lr, decay),
                    OptimizerKind::AdamW => {
                        let mom = state
                            .moments
                            .entry(agent.clone())
                            .or_insert_with(|| Moments::zeros(grad.len()));
                        apply_adamw(params, mom, grad, lr, decay, &self.config);
                    }
                }
                if !params.is_finite() {
                    return Err(TrainError::Divergence {
                        step,
                        agent: agent.clone(),
                        detail: "non-finite parameter".into(),
                    });
                }
            }
        }
        state.step += 1;
        let n = breakdowns.len() as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| breakdowns.iter().map(f).sum::<f64>() / n;
        Ok(StepMetrics {
            step: state.step,
            mean_reward: mean(|b| b.total),
            mean_rouge_l: mean(|b| b.rouge_l),
            mean_label_acc: mean(|b| b.label_acc),
            mean_graph_f1: mean(|b| b.graph_f1),
            objective: objectives.iter().sum::<f64>() / objectives.len().max(1) as f64,
            clip_fraction: if terms == 0 { 0.0 } else { clipped as f64 / terms as f64 },
            grad_norms: norm_acc
                .into_iter()
                .map(|(a, v)| (a, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
            minibatch_objectives: objectives,
            minibatch_clip_fractions: clip_fracs,
        })
    }
}

/// Decoupled weight decay then gradient ascent: `w <- w * decay + lr * g`.
pub fn apply_update(params: &mut PolicyParameters, grad: &[f64], lr: f64, decay: f64) {
    for (w, g) in params.weights_mut().iter_mut().zip(grad) {
        *w = *w * decay + lr * g;
    }
}

/// AdamW ascent step: moments updated with `g`, then
/// `w <- w * decay + lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn apply_adamw(params: &mut PolicyParameters, mom: &mut Moments, grad: &[f64], lr: f64, decay: f64, cfg: &TrainConfig) {
    mom.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(mom.t as i32);
    let c2 = 1.0 - b2.powi(mom.t as i32);
    for (((w, g), m), v) in params
        .weights_mut()
        .iter_mut()
        .zip(grad)
        .zip(mom.m.iter_mut())
        .zip(mom.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let step = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        *w = *w * decay + lr * step;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSidecar {
    schema: String,
    step: u64,
    plan: String,
    rng: SamplerState,
    config_hash: String,
    dataset_hash: String,
    agents: Vec<AgentId>,
}

fn checkpoint_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("ckpt-{step:06}"))
}

/// Path of the sidecar inside a checkpoint directory.
pub fn sidecar_path(dir: &Path) -> PathBuf {
    dir.join("state.json")
}

pub fn write_checkpoint(root: &Path, trainer: &Trainer<'_>, dataset: &CaseDataset, state: &TrainState) -> Result<PathBuf, TrainError> {
    let dir = checkpoint_dir(root, state.step);
    fs::create_dir_all(&dir)?;
    for (id, p) in &state.params {
        p.save(&dir.join(format!("{id}.policy")))?;
    }
    for (id, m) in &state.moments {
        fs::write(dir.join(format!("{id}.moments")), m.to_bytes())?;
    }
    let side = CheckpointSidecar {
        schema: CHECKPOINT_SCHEMA.into(),
        step: state.step,
        plan: trainer.plan.name().to_owned(),
        rng: trainer.sampler_state(state.step),
        config_hash: trainer.config.hash(),
        dataset_hash: dataset.config_hash(),
        agents: state.params.keys().cloned().collect(),
    };
    let path = sidecar_path(&dir);
    fs::write(&path, serde_json::to_string_pretty(&side).map_err(|e| TrainError::Checkpoint(e.to_string()))?)?;
    Ok(path)
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub state: TrainState,
    pub plan: WorkflowPlan,
    pub config_hash: String,
    pub rng: SamplerState,
}

/// Load from a checkpoint directory or its `state.json`.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let sidecar = if path.is_dir() { sidecar_path(path) } else { path.to_path_buf() };
    let dir = sidecar
        .parent()
        .ok_or_else(|| TrainError::Checkpoint("sidecar has no parent directory".into()))?;
    let text = fs::read_to_string(&sidecar)?;
    let side: CheckpointSidecar = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if side.schema != CHECKPOINT_SCHEMA {
        return Err(TrainError::Checkpoint(format!("unsupported schema {:?}", side.schema)));
    }
    let plan = WorkflowPlan::by_name(&side.plan)
        .ok_or_else(|| TrainError::Checkpoint(format!("unknown plan {:?}", side.plan)))?;
    let mut params = AgentParams::new();
    let mut moments = BTreeMap::new();
    for id in side.agents {
        let p = PolicyParameters::load(&dir.join(format!("{id}.policy")))?;
        let mpath = dir.join(format!("{id}.moments"));
        if mpath.exists() {
            moments.insert(id.clone(), Moments::from_bytes(&fs::read(&mpath)?)?);
        }
        params.insert(id, p);
    }
    Ok(LoadedCheckpoint {
        state: TrainState {
            step: side.step,
            params,
            moments,
        },
        plan,
        config_hash: side.config_hash,
        rng: side.rng,
    })
}

/// Most recent checkpoint directory under `root`.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>, TrainError> {
    let mut best: Option<(u64, PathBuf)> = None;
    if !root.exists() {
        return Ok(None);
    }
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("ckpt-")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if sidecar_path(&entry.path()).exists() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Result of a training loop.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Options controlling where a loop starts and stops.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoopControl {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many completed steps (simulates an interruption).
    pub halt_after: Option<u64>,
}

/// Run `total_steps` steps, writing `metrics.csv` and checkpoints under `out`.
pub fn train_loop(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    scorer: &Scorer,
    dataset: &CaseDataset,
    config: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome, TrainError> {
    train_loop_with(plan, model, scorer, dataset, config, out, LoopControl::default())
}

pub fn train_loop_with(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    scorer: &Scorer,
    dataset: &CaseDataset,
    config: &TrainConfig,
    out: &Path,
    control: LoopControl,
) -> Result<TrainOutcome, TrainError> {
    let trainer = Trainer::new(plan, model, scorer, dataset, config.clone())?;
    fs::create_dir_all(out)?;
    let agents = plan.agent_ids();
    let metrics_path = out.join(METRICS_FILE);
    let header = format!("{METRICS_HEADER_TAG}\n{}\n", StepMetrics::csv_header(&agents));

    let (mut state, mut last_ckpt) = match (control.resume, latest_checkpoint(out)?) {
        (true, Some(dir)) => {
            let loaded = load_checkpoint(&dir)?;
            if loaded.config_hash != config.hash() {
                return Err(TrainError::Checkpoint("config differs from the checkpointed run".into()));
            }
            if loaded.plan.name() != plan.name() {
                return Err(TrainError::Checkpoint("plan differs from the checkpointed run".into()));
            }
            // keep metric rows up to the checkpoint, drop the rest
            let existing = fs::read_to_string(&metrics_path).unwrap_or_default();
            let mut kept = header.clone();
            for line in existing.lines().skip(2) {
                let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if step <= loaded.state.step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&metrics_path, kept)?;
            (loaded.state, sidecar_path(&dir))
        }
        _ => {
            let state = TrainState::init(plan, model);
            fs::write(&metrics_path, &header)?;
            let p = write_checkpoint(out, &trainer, dataset, &state)?;
            (state, p)
        }
    };

    let mut metrics_file = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let mut metrics = Vec::new();
    while state.step < config.total_steps {
        if control.halt_after.is_some_and(|h| state.step >= h) {
            break;
        }
        let m = match trainer.train_step(&mut state) {
            Ok(m) => m,
            Err(e) => {
                metrics_file.flush()?;
                return Err(e);
            }
        };
        writeln!(metrics_file, "{}", m.csv_row())?;
        metrics_file.flush()?;
        metrics.push(m);
        if state.step % config.checkpoint_every == 0 || state.step == config.total_steps {
            last_ckpt = write_checkpoint(out, &trainer, dataset, &state)?;
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        final_checkpoint: last_ckpt,
    })
}
