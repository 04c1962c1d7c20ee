//! Independent reference implementations and random instance builders shared
//! by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use marlrad::magspo::RolloutGroup;
use marlrad::policy::{FeatureMap, PolicyModel, PolicyParameters};
use marlrad::rewards::{Category, Entity, Relation, RelationLabel, ReportGraph};
use marlrad::rewards::Scorer;
use marlrad::synthenv::{
    build_dataset, render_truth, Case, CentralFinding, LatentState, SideFinding, SplitSizes, SynthConfig, QUERY_DIM,
};
use marlrad::textcore::{Report, TokenId, Vocab};
use marlrad::workflow::{
    run_joint_rollout, snapshot_all, AgentContext, AgentId, AgentParams, AgentSlot, CaseQuery, ContextSource,
    JointRollout, Role, WorkflowPlan,
};

/// Dense log-probability of `ids` and, optionally, its gradient, computed
/// step by step from the feature map with a textbook log-softmax.
pub fn dense_logprob(
    fmap: &FeatureMap,
    weights: &[f64],
    ctx: &AgentContext,
    ids: &[TokenId],
    temperature: f64,
    grad: Option<&mut Vec<f64>>,
) -> f64 {
    let v = fmap.vocab_size();
    let summary = fmap.summarize(ctx);
    let mut active = Vec::new();
    let mut total = 0.0;
    let mut grad = grad;
    for t in 0..ids.len() {
        fmap.active(&summary, &ids[..t], &mut active);
        let mut logits = vec![0.0; v];
        for &(f, x) in &active {
            for (tok, l) in logits.iter_mut().enumerate() {
                *l += x * weights[f * v + tok];
            }
        }
        for l in &mut logits {
            *l /= temperature;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + z.ln();
        let chosen = ids[t] as usize;
        total += logits[chosen] - log_z;
        if let Some(g) = grad.as_deref_mut() {
            for &(f, x) in &active {
                for tok in 0..v {
                    let p = (logits[tok] - log_z).exp();
                    let ind = if tok == chosen { 1.0 } else { 0.0 };
                    g[f * v + tok] += x / temperature * (ind - p);
                }
            }
        }
    }
    total
}

/// One slot term as the oracle sees it.
#[derive(Clone)]
pub struct OracleSlot {
    pub agent: AgentId,
    pub ctx: AgentContext,
    pub ids: Vec<TokenId>,
    pub old_logprob: f64,
}

pub struct OracleGroup {
    pub rewards: Vec<f64>,
    /// `rollouts[i][k]`
    pub rollouts: Vec<Vec<OracleSlot>>,
}

pub fn oracle_groups(groups: &[RolloutGroup]) -> Vec<OracleGroup> {
    groups
        .iter()
        .map(|g| OracleGroup {
            rewards: g.rewards.clone(),
            rollouts: g
                .rollouts
                .iter()
                .map(|r| {
                    r.slots
                        .iter()
                        .map(|s| OracleSlot {
                            agent: s.agent_id.clone(),
                            ctx: s.context.clone(),
                            ids: s.output.ids().to_vec(),
                            old_logprob: s.logprob_sum,
                        })
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// Two-pass mean and population standard deviation.
pub fn naive_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

pub struct OracleOut {
    pub objective: f64,
    pub gradients: BTreeMap<AgentId, Vec<f64>>,
    pub clipped: usize,
    pub terms: usize,
}

/// Sequence-level clipped surrogate written directly from its definition.
/// With one slot per rollout this is single-agent GSPO.
pub fn oracle_surrogate(
    groups: &[OracleGroup],
    params: &AgentParams,
    fmap: &FeatureMap,
    eps_low: f64,
    eps_high: f64,
    temperature: f64,
    std_floor: f64,
) -> OracleOut {
    let mut gradients: BTreeMap<AgentId, Vec<f64>> =
        params.iter().map(|(id, p)| (id.clone(), vec![0.0; p.len()])).collect();
    let mut objective = 0.0;
    let mut clipped = 0;
    let mut terms = 0;
    let b = groups.len() as f64;
    for group in groups {
        let adv = naive_advantages(&group.rewards, std_floor);
        let g = group.rollouts.len() as f64;
        let mut group_sum = 0.0;
        for (i, rollout) in group.rollouts.iter().enumerate() {
            let k = rollout.len() as f64;
            for slot in rollout {
                let w = params[&slot.agent].weights();
                let mut score = vec![0.0; w.len()];
                let lp = dense_logprob(fmap, w, &slot.ctx, &slot.ids, temperature, Some(&mut score));
                let s = ((lp - slot.old_logprob) / slot.ids.len() as f64).exp();
                let raw = s * adv[i];
                let clip = s.clamp(1.0 - eps_low, 1.0 + eps_high) * adv[i];
                terms += 1;
                if clip < raw {
                    clipped += 1;
                    group_sum += clip / k;
                } else {
                    group_sum += raw / k;
                    let coef = adv[i] * s / slot.ids.len() as f64 / (k * g * b);
                    let acc = gradients.get_mut(&slot.agent).unwrap();
                    for (a, sc) in acc.iter_mut().zip(&score) {
                        *a += coef * sc;
                    }
                }
            }
        }
        objective += group_sum / g;
    }
    OracleOut {
        objective: objective / b,
        gradients,
        clipped,
        terms,
    }
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn rel_inf_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / max_abs(b).max(1e-300)
}

/// Vocabulary and model whose outputs are at most `max_len` tokens.
pub fn short_model(max_len: usize) -> (Vocab, PolicyModel) {
    let vocab = Vocab::synthetic().with_max_len(max_len).unwrap();
    let model = PolicyModel::new(&vocab, QUERY_DIM);
    (vocab, model)
}

pub fn random_params(model: &PolicyModel, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParameters {
    let mut p = model.init_params();
    let n = Normal::new(0.0, scale).unwrap();
    for w in p.weights_mut() {
        *w = n.sample(rng);
    }
    p
}

pub fn perturb(p: &PolicyParameters, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParameters {
    let mut q = p.clone();
    let n = Normal::new(0.0, scale).unwrap();
    for w in q.weights_mut() {
        *w += n.sample(rng);
    }
    q
}

pub fn random_query(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..QUERY_DIM).map(|_| rng.random_range(-0.2..1.2)).collect()
}

/// Plan where the two region slots share one agent.
pub fn shared_plan() -> WorkflowPlan {
    let slot = |id: &str, role, recipe| AgentSlot {
        agent_id: AgentId::new(id),
        role,
        recipe,
    };
    WorkflowPlan::new(
        "shared",
        vec![
            slot("region", Role::Left, vec![ContextSource::Query]),
            slot("region", Role::Right, vec![ContextSource::Query]),
            slot(
                "global",
                Role::Global,
                vec![ContextSource::Query, ContextSource::OutputOf(0), ContextSource::OutputOf(1)],
            ),
        ],
    )
    .unwrap()
}

/// A random batch: groups of real joint rollouts sampled from `old` with
/// random rewards (sometimes tied, sometimes constant).
pub struct Instance {
    pub plan: WorkflowPlan,
    pub old: AgentParams,
    pub new: AgentParams,
    pub groups: Vec<RolloutGroup>,
}

#[allow(clippy::too_many_arguments)]
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    plan: &WorkflowPlan,
    vocab: &Vocab,
    model: &PolicyModel,
    groups: usize,
    group_size: usize,
    drift: f64,
    std_floor: f64,
) -> Instance {
    let old: AgentParams = plan
        .agent_ids()
        .into_iter()
        .map(|id| (id, random_params(model, rng, 0.05)))
        .collect();
    let new: AgentParams = old.iter().map(|(id, p)| (id.clone(), perturb(p, rng, drift))).collect();
    let snaps = snapshot_all(&old);
    let mut out = Vec::with_capacity(groups);
    for gi in 0..groups {
        let q = random_query(rng);
        let query = CaseQuery {
            case_id: gi as u64,
            features: &q,
        };
        let rollouts: Vec<JointRollout> = (0..group_size)
            .map(|_| run_joint_rollout(plan, model, &snaps, vocab, query, 1.0, rng.random()).unwrap())
            .collect();
        let rewards: Vec<f64> = match rng.random_range(0..6) {
            0 => vec![1.5; group_size],
            1 => (0..group_size).map(|_| rng.random_range(0..3) as f64).collect(),
            _ => (0..group_size).map(|_| rng.random_range(0.0..3.0)).collect(),
        };
        let mut group = RolloutGroup::new(gi as u64, rollouts, rewards).unwrap();
        group.fill_advantages(std_floor).unwrap();
        out.push(group);
    }
    Instance {
        plan: plan.clone(),
        old,
        new,
        groups: out,
    }
}

/// Longest common subsequence by enumerating every subsequence of the
/// shorter input.
pub fn brute_lcs(a: &[TokenId], b: &[TokenId]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[TokenId]| {
        let mut it = long.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<TokenId> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| short[i]).collect();
        if is_subseq(&sub) {
            best = n;
        }
    }
    best
}

pub fn brute_rouge(cand: &[TokenId], reference: &[TokenId]) -> f64 {
    if cand.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = brute_lcs(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (r + p)
}

const GRAPH_WORDS: [(&str, Category); 9] = [
    ("left", Category::Anatomy),
    ("right", Category::Anatomy),
    ("left lung", Category::Anatomy),
    ("right lung", Category::Anatomy),
    ("heart", Category::Anatomy),
    ("effusion", Category::Observation),
    ("consolidation", Category::Observation),
    ("clear", Category::Observation),
    ("enlarged", Category::Observation),
];

pub fn random_graph(rng: &mut ChaCha8Rng, max_entities: usize) -> ReportGraph {
    let n = rng.random_range(0..=max_entities);
    let entities: Vec<Entity> = (0..n)
        .map(|i| {
            let (text, category) = GRAPH_WORDS[rng.random_range(0..GRAPH_WORDS.len())];
            Entity {
                id: i as u32 * 3 + 1,
                text: text.into(),
                category,
            }
        })
        .collect();
    let labels = [RelationLabel::LocatedAt, RelationLabel::Modify, RelationLabel::SuggestiveOf];
    let mut relations = Vec::new();
    if n >= 2 {
        for _ in 0..rng.random_range(0..=n) {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                relations.push(Relation {
                    src: entities[a].id,
                    dst: entities[b].id,
                    label: labels[rng.random_range(0..3)],
                });
            }
        }
    }
    ReportGraph::new(entities, relations).unwrap()
}

/// Same graph with ids remapped by `id -> id * 7 + 100` and both lists reversed.
pub fn relabel(g: &ReportGraph) -> ReportGraph {
    let map = |id: u32| id * 7 + 100;
    let mut entities: Vec<Entity> = g
        .entities
        .iter()
        .map(|e| Entity {
            id: map(e.id),
            ..e.clone()
        })
        .collect();
    let mut relations: Vec<Relation> = g
        .relations
        .iter()
        .map(|r| Relation {
            src: map(r.src),
            dst: map(r.dst),
            label: r.label,
        })
        .collect();
    entities.reverse();
    relations.reverse();
    ReportGraph::new(entities, relations).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cases with different findings on each side, and predictions that are the
/// truth reports with "left" and "right" exchanged.
pub fn swapped_side_fixture(scorer: &Scorer) -> (Vec<Case>, Vec<Report>) {
    let ds = build_dataset(7, SplitSizes { train: 1, val: 1, test: 1 }, &SynthConfig::default(), scorer).unwrap();
    let template = ds.cases[0].1.clone();
    let pairs = [
        (SideFinding::Effusion, SideFinding::Pneumothorax),
        (SideFinding::Pneumothorax, SideFinding::Effusion),
        (SideFinding::Effusion, SideFinding::Clear),
    ];
    let mut cases = Vec::new();
    let mut swapped = Vec::new();
    for (i, (l, r)) in pairs.into_iter().enumerate() {
        let latent = LatentState {
            left: l,
            right: r,
            central: CentralFinding::Normal,
        };
        let truth = render_truth(&latent, scorer.vocab()).unwrap();
        let mut case = template.clone();
        case.case_id = i as u64;
        case.latent = latent;
        case.truth_labels = scorer.labels(&truth);
        case.truth_graph = scorer.graph(&truth);
        case.truth_report = truth.clone();
        let v = scorer.vocab();
        let (lid, rid) = (v.id("left").unwrap(), v.id("right").unwrap());
        let swap = |ids: &[u32]| -> Vec<u32> {
            ids.iter()
                .map(|&t| if t == lid { rid } else if t == rid { lid } else { t })
                .collect()
        };
        swapped.push(Report::new(swap(&truth.findings), swap(&truth.impression)));
        cases.push(case);
    }
    (cases, swapped)
}
