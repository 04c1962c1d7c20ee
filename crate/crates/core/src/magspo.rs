//! Group-relative advantages, sequence-level importance ratios and the
//! clipped multi-agent surrogate with its analytic gradient.
//!
//! For a batch of groups, each holding `G` joint rollouts through `K` slots,
//! the surrogate is
//!
//! ```text
//! J = mean_groups (1/K) sum_k (1/G) sum_i min(s_ik A_i, clip(s_ik, 1-eps_low, 1+eps_high) A_i)
//! s_ik = exp((log pi_k(x_ik | c_ik) - log pi_k_old(x_ik | c_ik)) / |x_ik|)
//! ```
//!
//! where the advantage `A_i` is shared by every slot of rollout `i`. With
//! `K = 1` this is the single-agent sequence-level objective.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyError, PolicyModel};
use crate::workflow::{AgentId, AgentParams, JointRollout, WorkflowPlan};

pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MagspoError {
    #[error("group of size {0} is too small for advantages (need at least 2)")]
    GroupTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no parameters for agent {0}")]
    MissingAgent(AgentId),
    #[error("invalid clip config: eps_low={eps_low}, eps_high={eps_high}")]
    InvalidClip { eps_low: f64, eps_high: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Sum by recursive halving; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Element-wise pairwise reduction of equally sized vectors.
fn pairwise_reduce(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("non-empty")
}

/// `(r_i - mean) / std` with the population standard deviation. Groups whose
/// std falls below `std_floor` get all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, MagspoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(MagspoError::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = pairwise_sum(rewards) / n;
    let first: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    // second pass removes the rounding error left in the mean
    let drift = pairwise_sum(&first) / n;
    let centered: Vec<f64> = first.into_iter().map(|c| c - drift).collect();
    let var = pairwise_sum(&centered.iter().map(|c| c * c).collect::<Vec<_>>()) / n;
    let std = var.sqrt();
    if std.is_nan() || std < std_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(centered.into_iter().map(|c| c / std).collect())
}

/// `(pi_new / pi_old)^(1/length)` computed in log space.
pub fn sequence_importance_ratio(new_logprob: f64, old_logprob: f64, length: usize) -> f64 {
    debug_assert!(length >= 1);
    ((new_logprob - old_logprob) / length as f64).exp()
}

/// Asymmetric clip band `[1 - eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, MagspoError> {
        let ok = |e: f64| e > 0.0 && e < 1.0;
        if !(ok(eps_low) && ok(eps_high)) {
            return Err(MagspoError::InvalidClip { eps_low, eps_high });
        }
        Ok(Self { eps_low, eps_high })
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 3e-4,
            eps_high: 4e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Unclipped,
    Clipped,
}

/// `min(s A, clamp(s) A)` and which argument attained it; ties are unclipped.
pub fn clipped_term(s: f64, advantage: f64, clip: ClipConfig) -> (f64, Branch) {
    let raw = s * advantage;
    let clipped = s.clamp(clip.lower(), clip.upper()) * advantage;
    if clipped < raw {
        (clipped, Branch::Clipped)
    } else {
        (raw, Branch::Unclipped)
    }
}

/// `G` joint rollouts of one case with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub case_id: u64,
    pub rollouts: Vec<JointRollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Group with advantages left empty.
    pub fn new(case_id: u64, rollouts: Vec<JointRollout>, rewards: Vec<f64>) -> Result<Self, MagspoError> {
        if rollouts.len() != rewards.len() || rollouts.is_empty() {
            return Err(MagspoError::ShapeMismatch(format!(
                "{} rollouts but {} rewards",
                rollouts.len(),
                rewards.len()
            )));
        }
        Ok(Self {
            case_id,
            rollouts,
            rewards,
            advantages: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn fill_advantages(&mut self, std_floor: f64) -> Result<(), MagspoError> {
        self.advantages = compute_advantages(&self.rewards, std_floor)?;
        Ok(())
    }
}

/// One `(group, rollout, slot)` surrogate term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub group: usize,
    pub rollout: usize,
    pub slot: usize,
    pub agent_id: AgentId,
    pub ratio: f64,
    pub branch: Branch,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateReport {
    pub objective: f64,
    pub terms: Vec<TermRecord>,
    /// Empty when only the objective was requested.
    pub gradients: BTreeMap<AgentId, Vec<f64>>,
}

impl SurrogateReport {
    pub fn clipped_count(&self) -> usize {
        self.terms.iter().filter(|t| t.branch == Branch::Clipped).count()
    }

    /// Share of terms where the clipped argument attained the min.
    pub fn clip_fraction(&self) -> f64 {
        if self.terms.is_empty() {
            0.0
        } else {
            self.clipped_count() as f64 / self.terms.len() as f64
        }
    }
}

/// Everything the surrogate needs besides the batch.
#[derive(Clone, Copy)]
pub struct SurrogateInputs<'a> {
    pub plan: &'a WorkflowPlan,
    pub model: &'a PolicyModel,
    pub params: &'a AgentParams,
    pub clip: ClipConfig,
    pub temperature: f64,
}

fn check_shapes(groups: &[RolloutGroup], inp: &SurrogateInputs<'_>) -> Result<(), MagspoError> {
    for id in inp.plan.agent_ids() {
        if !inp.params.contains_key(&id) {
            return Err(MagspoError::MissingAgent(id));
        }
    }
    for (gi, g) in groups.iter().enumerate() {
        if g.advantages.len() != g.rollouts.len() || g.rewards.len() != g.rollouts.len() {
            return Err(MagspoError::ShapeMismatch(format!(
                "group {gi}: {} rollouts, {} rewards, {} advantages",
                g.rollouts.len(),
                g.rewards.len(),
                g.advantages.len()
            )));
        }
        for (ri, r) in g.rollouts.iter().enumerate() {
            if r.slots.len() != inp.plan.k() {
                return Err(MagspoError::ShapeMismatch(format!(
                    "group {gi} rollout {ri} has {} slots, plan has {}",
                    r.slots.len(),
                    inp.plan.k()
                )));
            }
            for (k, (s, def)) in r.slots.iter().zip(inp.plan.slots()).enumerate() {
                if s.agent_id != def.agent_id || s.output.is_empty() {
                    return Err(MagspoError::ShapeMismatch(format!(
                        "group {gi} rollout {ri} slot {k} does not match the plan"
                    )));
                }
            }
        }
    }
    Ok(())
}

struct GroupPart {
    objective: f64,
    terms: Vec<TermRecord>,
    grads: BTreeMap<AgentId, Vec<f64>>,
}

fn group_part(
    gi: usize,
    group: &RolloutGroup,
    inp: &SurrogateInputs<'_>,
    n_groups: usize,
    want_grad: bool,
) -> Result<GroupPart, MagspoError> {
    let k = inp.plan.k() as f64;
    let g = group.size() as f64;
    let weight = 1.0 / (k * g * n_groups as f64);
    let mut grads: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    if want_grad {
        for (id, p) in inp.params {
            grads.insert(id.clone(), vec![0.0; p.len()]);
        }
    }
    let mut terms = Vec::with_capacity(group.size() * inp.plan.k());
    let mut values = Vec::with_capacity(terms.capacity());
    for (ri, rollout) in group.rollouts.iter().enumerate() {
        let adv = group.advantages[ri];
        for (slot, rec) in rollout.slots.iter().enumerate() {
            let params = &inp.params[&rec.agent_id];
            let new_lp = inp
                .model
                .sequence_logprob(params, &rec.context, &rec.output, inp.temperature)?;
            let len = rec.output.len();
            let s = sequence_importance_ratio(new_lp, rec.logprob_sum, len);
            let (value, branch) = clipped_term(s, adv, inp.clip);
            if want_grad && branch == Branch::Unclipped && adv != 0.0 {
                // d(s A)/dW = A s (1/|x|) grad log pi
                let coef = weight * adv * s / len as f64;
                let buf = grads.get_mut(&rec.agent_id).expect("allocated above");
                inp.model
                    .accumulate_grad_logprob(params, &rec.context, &rec.output, inp.temperature, coef, buf)?;
            }
            values.push(value);
            terms.push(TermRecord {
                group: gi,
                rollout: ri,
                slot,
                agent_id: rec.agent_id.clone(),
                ratio: s,
                branch,
                value,
            });
        }
    }
    Ok(GroupPart {
        objective: pairwise_sum(&values) / (k * g),
        terms,
        grads,
    })
}

/// Surrogate value, per-term branches and (optionally) per-agent gradients.
///
/// Groups are evaluated in parallel and reduced pairwise in group order, so
/// the result does not depend on thread scheduling.
pub fn surrogate(groups: &[RolloutGroup], inp: &SurrogateInputs<'_>, want_grad: bool) -> Result<SurrogateReport, MagspoError> {
    check_shapes(groups, inp)?;
    let n = groups.len();
    let parts: Vec<GroupPart> = groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| group_part(gi, g, inp, n, want_grad))
        .collect::<Result<_, _>>()?;
    let objective = if n == 0 {
        0.0
    } else {
        pairwise_sum(&parts.iter().map(|p| p.objective).collect::<Vec<_>>()) / n as f64
    };
    let mut gradients = BTreeMap::new();
    if want_grad {
        for (id, p) in inp.params {
            let per_group: Vec<Vec<f64>> = parts.iter().map(|part| part.grads[id].clone()).collect();
            gradients.insert(id.clone(), pairwise_reduce(per_group, p.len()));
        }
    }
    let terms = parts.into_iter().flat_map(|p| p.terms).collect();
    Ok(SurrogateReport {
        objective,
        terms,
        gradients,
    })
}

/// Objective with per-term records and gradients.
pub fn magspo_objective(groups: &[RolloutGroup], inp: &SurrogateInputs<'_>) -> Result<SurrogateReport, MagspoError> {
    surrogate(groups, inp, true)
}

/// Gradient of the surrogate for each agent; slots sharing an agent accumulate
/// into one vector, and strictly clipped terms contribute nothing.
pub fn magspo_gradient(
    groups: &[RolloutGroup],
    inp: &SurrogateInputs<'_>,
) -> Result<BTreeMap<AgentId, Vec<f64>>, MagspoError> {
    Ok(surrogate(groups, inp, true)?.gradients)
}

/// Objective value only.
pub fn magspo_value(groups: &[RolloutGroup], inp: &SurrogateInputs<'_>) -> Result<f64, MagspoError> {
    Ok(surrogate(groups, inp, false)?.objective)
}
