//! The agent system: activation order, context construction, parameter
//! sharing, and joint rollouts through every slot of a plan.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{quantize_query, Decoding, PolicyError, PolicyModel, PolicyParameters, PolicySnapshot};
use crate::textcore::{split_report, Report, TokenId, TokenSequence, Vocab, FINDINGS_WORD, HEADER_MARK, IMPRESSION_WORD};

pub const ROLLOUT_SCHEMA: &str = "rollout-v1";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("plan has no slots")]
    EmptyPlan,
    #[error("slot {slot} recipe references slot {referenced}, which is not strictly earlier")]
    NonCausalRecipe { slot: usize, referenced: usize },
    #[error("slot {slot} has a duplicate role {role}")]
    DuplicateRole { slot: usize, role: Role },
    #[error("slot {slot} needs the output of slot {missing}, which is absent")]
    MissingPredecessor { slot: usize, missing: usize },
    #[error("no slot {0} in plan")]
    NoSuchSlot(usize),
    #[error("no parameters for agent {0}")]
    MissingAgent(AgentId),
    #[error("slot {slot}: {source}")]
    Policy {
        slot: usize,
        #[source]
        source: PolicyError,
    },
    #[error("rollout log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Left,
    Central,
    Right,
    Global,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Left, Role::Central, Role::Right, Role::Global];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Role::Left => "left",
            Role::Central => "central",
            Role::Right => "right",
            Role::Global => "global",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.label() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Identifier of an underlying agent. Slots with equal ids share parameters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-agent parameters. Lookup by [`AgentId`] is the sharing map: every slot
/// with the same id resolves to the same entry.
pub type AgentParams = BTreeMap<AgentId, PolicyParameters>;
pub type AgentSnapshots = BTreeMap<AgentId, PolicySnapshot>;

pub fn snapshot_all(params: &AgentParams) -> AgentSnapshots {
    params
        .iter()
        .map(|(id, p)| (id.clone(), PolicySnapshot::of(p)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSource {
    Query,
    /// Output of an earlier slot (0-based index).
    OutputOf(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSlot {
    pub agent_id: AgentId,
    pub role: Role,
    pub recipe: Vec<ContextSource>,
}

/// Ordered agent slots. Slot `k` (0-based) may only read the query and the
/// outputs of slots `< k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowPlan {
    name: String,
    slots: Vec<AgentSlot>,
}

impl WorkflowPlan {
    pub fn new(name: impl Into<String>, slots: Vec<AgentSlot>) -> Result<Self, WorkflowError> {
        if slots.is_empty() {
            return Err(WorkflowError::EmptyPlan);
        }
        for (k, slot) in slots.iter().enumerate() {
            for src in &slot.recipe {
                if let ContextSource::OutputOf(j) = *src {
                    if j >= k {
                        return Err(WorkflowError::NonCausalRecipe {
                            slot: k,
                            referenced: j,
                        });
                    }
                }
            }
        }
        Ok(Self {
            name: name.into(),
            slots,
        })
    }

    /// Three region agents feeding one global integrating agent.
    pub fn reference() -> Self {
        let region = |role: Role| AgentSlot {
            agent_id: AgentId::new(role.label()),
            role,
            recipe: vec![ContextSource::Query],
        };
        let slots = vec![
            region(Role::Left),
            region(Role::Central),
            region(Role::Right),
            AgentSlot {
                agent_id: AgentId::new("global"),
                role: Role::Global,
                recipe: vec![
                    ContextSource::Query,
                    ContextSource::OutputOf(0),
                    ContextSource::OutputOf(1),
                    ContextSource::OutputOf(2),
                ],
            },
        ];
        Self::new("reference", slots).expect("reference plan is causal")
    }

    /// One agent writing the report straight from the query.
    pub fn single() -> Self {
        let slots = vec![AgentSlot {
            agent_id: AgentId::new("global"),
            role: Role::Global,
            recipe: vec![ContextSource::Query],
        }];
        Self::new("single", slots).expect("single plan is causal")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "reference" => Some(Self::reference()),
            "single" => Some(Self::single()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of slots `K`.
    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[AgentSlot] {
        &self.slots
    }

    pub fn slot(&self, k: usize) -> Result<&AgentSlot, WorkflowError> {
        self.slots.get(k).ok_or(WorkflowError::NoSuchSlot(k))
    }

    /// Distinct agent ids, sorted.
    pub fn agent_ids(&self) -> Vec<AgentId> {
        let mut ids: Vec<AgentId> = self.slots.iter().map(|s| s.agent_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn init_params(&self, model: &PolicyModel) -> AgentParams {
        self.agent_ids()
            .into_iter()
            .map(|id| (id, model.init_params()))
            .collect()
    }

    /// Require unique roles, as in the reference plan.
    pub fn check_unique_roles(&self) -> Result<(), WorkflowError> {
        for (k, slot) in self.slots.iter().enumerate() {
            if self.slots[..k].iter().any(|s| s.role == slot.role) {
                return Err(WorkflowError::DuplicateRole {
                    slot: k,
                    role: slot.role,
                });
            }
        }
        Ok(())
    }
}

/// Tokens of the flattened prompt an agent conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptToken {
    /// Role header.
    Role(Role),
    /// Quantized query feature.
    Query(u8),
    /// Marks the start of a predecessor's report.
    Tag(Role),
    Word(TokenId),
}

/// Everything agent `k` observes when generating.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentContext {
    pub role: Role,
    pub query_features: Vec<f64>,
    pub predecessor_outputs: Vec<(Role, Report)>,
    pub prompt_tokens: Vec<PromptToken>,
}

impl AgentContext {
    /// Role header, quantized query, then each predecessor's tagged report.
    pub fn from_prompt(role: Role, query_features: Vec<f64>, predecessor_outputs: Vec<(Role, Report)>) -> Self {
        let mut prompt_tokens = vec![PromptToken::Role(role)];
        prompt_tokens.extend(query_features.iter().map(|&x| PromptToken::Query(quantize_query(x))));
        for (r, report) in &predecessor_outputs {
            prompt_tokens.push(PromptToken::Tag(*r));
            prompt_tokens.extend(report.findings.iter().map(|&w| PromptToken::Word(w)));
            prompt_tokens.extend(report.impression.iter().map(|&w| PromptToken::Word(w)));
        }
        Self {
            role,
            query_features,
            predecessor_outputs,
            prompt_tokens,
        }
    }
}

/// The query side of a case: its id and feature vector.
#[derive(Debug, Clone, Copy)]
pub struct CaseQuery<'a> {
    pub case_id: u64,
    pub features: &'a [f64],
}

/// Context for `slot`, reading predecessor reports from `prior_outputs`
/// (slot index, report) in any storage order. Recipe order is canonical.
pub fn build_context(
    plan: &WorkflowPlan,
    slot: usize,
    query: CaseQuery<'_>,
    prior_outputs: &[(usize, Report)],
) -> Result<AgentContext, WorkflowError> {
    let def = plan.slot(slot)?;
    let mut preds = Vec::new();
    for src in &def.recipe {
        if let ContextSource::OutputOf(j) = *src {
            let report = prior_outputs
                .iter()
                .find(|(s, _)| *s == j)
                .map(|(_, r)| r.clone())
                .ok_or(WorkflowError::MissingPredecessor { slot, missing: j })?;
            preds.push((plan.slots[j].role, report));
        }
    }
    Ok(AgentContext::from_prompt(def.role, query.features.to_vec(), preds))
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a list of integers into one seed; order-sensitive.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x005E_ED0F_CA5E_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Seed of a slot within a rollout.
pub fn slot_seed(rollout_seed: u64, slot: usize) -> u64 {
    mix_seed(&[rollout_seed, slot as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub agent_id: AgentId,
    pub role: Role,
    pub context: AgentContext,
    pub output: TokenSequence,
    /// Per-token log-probabilities under the sampling snapshot.
    pub logprobs: Vec<f64>,
    pub logprob_sum: f64,
}

/// One trajectory through every slot of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRollout {
    pub case_id: u64,
    pub seed: u64,
    pub slots: Vec<SlotRecord>,
}

impl JointRollout {
    /// `log pi_agent(x | q) = sum_k log pi_k(x^(k) | c^(k))`.
    pub fn joint_logprob(&self) -> f64 {
        self.slots.iter().map(|s| s.logprob_sum).sum()
    }
}

/// Report from an agent's raw output.
///
/// Output lacking either header is kept rather than rejected: it is flagged
/// malformed and every non-header word is placed in the findings section.
pub fn parse_output(seq: &TokenSequence, vocab: &Vocab) -> Report {
    let text = vocab.decode_words(seq.ids());
    match split_report(&text, vocab) {
        Ok(r) => r,
        Err(_) => {
            let header_ids: Vec<TokenId> = [HEADER_MARK, FINDINGS_WORD, IMPRESSION_WORD]
                .iter()
                .filter_map(|w| vocab.id(w))
                .collect();
            let findings = seq
                .content(vocab)
                .iter()
                .copied()
                .filter(|id| !header_ids.contains(id))
                .collect();
            Report {
                findings,
                impression: Vec::new(),
                malformed: true,
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn execute<'p>(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    params: &dyn Fn(&AgentId) -> Option<&'p PolicyParameters>,
    vocab: &Vocab,
    query: CaseQuery<'_>,
    temperature: f64,
    seed: u64,
    greedy: bool,
) -> Result<JointRollout, WorkflowError> {
    let mut slots = Vec::with_capacity(plan.k());
    let mut outputs: Vec<(usize, Report)> = Vec::with_capacity(plan.k());
    for (k, def) in plan.slots().iter().enumerate() {
        let p = params(&def.agent_id).ok_or_else(|| WorkflowError::MissingAgent(def.agent_id.clone()))?;
        let context = build_context(plan, k, query, &outputs)?;
        let decoding = if greedy {
            Decoding::Greedy
        } else {
            Decoding::Sample {
                seed: slot_seed(seed, k),
            }
        };
        let sampled = model
            .generate(p, &context, temperature, decoding)
            .map_err(|source| WorkflowError::Policy { slot: k, source })?;
        outputs.push((k, parse_output(&sampled.seq, vocab)));
        let logprob_sum = sampled.logprob_sum();
        slots.push(SlotRecord {
            agent_id: def.agent_id.clone(),
            role: def.role,
            context,
            output: sampled.seq,
            logprobs: sampled.logprobs,
            logprob_sum,
        });
    }
    Ok(JointRollout {
        case_id: query.case_id,
        seed,
        slots,
    })
}

/// Sample every slot in order under the agents' snapshots.
pub fn run_joint_rollout(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    snapshots: &AgentSnapshots,
    vocab: &Vocab,
    query: CaseQuery<'_>,
    temperature: f64,
    seed: u64,
) -> Result<JointRollout, WorkflowError> {
    execute(
        plan,
        model,
        &|id| snapshots.get(id).map(PolicySnapshot::params),
        vocab,
        query,
        temperature,
        seed,
        false,
    )
}

/// Greedy (argmax) decoding through every slot; used for evaluation.
pub fn run_greedy_rollout(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    params: &AgentParams,
    vocab: &Vocab,
    query: CaseQuery<'_>,
    temperature: f64,
) -> Result<JointRollout, WorkflowError> {
    execute(plan, model, &|id| params.get(id), vocab, query, temperature, 0, true)
}

/// The parsed output of the last slot.
pub fn final_report(rollout: &JointRollout, vocab: &Vocab) -> Report {
    rollout
        .slots
        .last()
        .map(|s| parse_output(&s.output, vocab))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotLogEntry {
    pub role: Role,
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

/// One line of the rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub schema: String,
    pub case_id: u64,
    pub seed: u64,
    pub slots: Vec<SlotLogEntry>,
    pub reward: Option<f64>,
}

impl RolloutRecord {
    pub fn from_rollout(r: &JointRollout, reward: Option<f64>) -> Self {
        Self {
            schema: ROLLOUT_SCHEMA.to_owned(),
            case_id: r.case_id,
            seed: r.seed,
            slots: r
                .slots
                .iter()
                .map(|s| SlotLogEntry {
                    role: s.role,
                    tokens: s.output.ids().to_vec(),
                    logprobs: s.logprobs.clone(),
                })
                .collect(),
            reward,
        }
    }
}

pub fn write_rollout_log<W: Write>(mut out: W, records: &[RolloutRecord]) -> Result<(), WorkflowError> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| WorkflowError::Log(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| WorkflowError::Log(e.to_string()))?;
    }
    Ok(())
}

pub fn read_rollout_log<R: BufRead>(input: R) -> Result<Vec<RolloutRecord>, WorkflowError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| WorkflowError::Log(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(&line).map_err(|e| WorkflowError::Log(e.to_string()))?;
        if rec.schema != ROLLOUT_SCHEMA {
            return Err(WorkflowError::Log(format!("unsupported schema {:?}", rec.schema)));
        }
        out.push(rec);
    }
    Ok(out)
}
