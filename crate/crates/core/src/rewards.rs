//! Verifiable report rewards: ROUGE-L, rule-based label accuracy, rule-based
//! entity/relation graph F1, their unweighted sum, and the laterality-restricted
//! graph F1.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textcore::{Report, TokenId, Vocab};

pub const RULES_HEADER: &str = "toyrules v1";
/// The published rule fixture used by the synthetic corpus.
pub const BUILTIN_RULES: &str = include_str!("../fixtures/toy_rules.txt");
/// Entity texts that seed the laterality subgraph.
pub const LATERALITY_SEEDS: [&str; 4] = ["left", "right", "left lung", "right lung"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("rules line {line}: {msg}")]
    Rules { line: usize, msg: String },
    #[error("label schema mismatch")]
    SchemaMismatch,
    #[error("relation endpoint {0} is not an entity id")]
    DanglingRelation(u32),
    #[error("duplicate entity id {0}")]
    DuplicateEntity(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRule {
    pub label: String,
    /// Qualifier words followed by the anchor word.
    pub phrase: Vec<String>,
    pub window: usize,
}

/// Parsed rule fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rules {
    pub labels: Vec<LabelRule>,
    pub negations: Vec<String>,
    pub neg_window: usize,
    pub anatomy: Vec<Vec<String>>,
    pub observations: Vec<Vec<String>>,
    pub rel_window: usize,
}

impl Rules {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_RULES).expect("built-in rules parse")
    }

    pub fn parse(text: &str) -> Result<Self, RewardError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, RULES_HEADER)) => {}
            Some((line, other)) => {
                return Err(RewardError::Rules {
                    line,
                    msg: format!("expected header {RULES_HEADER:?}, found {other:?}"),
                })
            }
            None => {
                return Err(RewardError::Rules {
                    line: 0,
                    msg: "empty rules file".into(),
                })
            }
        }
        let mut rules = Rules {
            labels: Vec::new(),
            negations: Vec::new(),
            neg_window: 4,
            anatomy: Vec::new(),
            observations: Vec::new(),
            rel_window: 5,
        };
        for (line, l) in lines {
            let err = |msg: &str| RewardError::Rules {
                line,
                msg: msg.to_owned(),
            };
            let words: Vec<&str> = l.split_whitespace().collect();
            let num = |w: Option<&&str>| -> Result<usize, RewardError> {
                w.and_then(|s| s.parse().ok()).ok_or_else(|| err("expected a number"))
            };
            let phrase = |ws: &[&str]| -> Vec<String> { ws.iter().map(|w| (*w).to_owned()).collect() };
            match words[0] {
                "NEGATION" if words.len() == 2 => rules.negations.push(words[1].to_owned()),
                "NEGWINDOW" if words.len() == 2 => rules.neg_window = num(words.get(1))?,
                "RELWINDOW" if words.len() == 2 => rules.rel_window = num(words.get(1))?,
                "ANATOMY" if words.len() >= 2 => rules.anatomy.push(phrase(&words[1..])),
                "OBSERVATION" if words.len() >= 2 => rules.observations.push(phrase(&words[1..])),
                "RULE" => {
                    let trig = words.iter().position(|w| *w == "TRIGGER");
                    let win = words.iter().position(|w| *w == "WINDOW");
                    match (trig, win) {
                        (Some(2), Some(w)) if w > 3 && w + 2 == words.len() => {
                            let label = words[1].to_owned();
                            if rules.labels.iter().any(|r| r.label == label) {
                                return Err(err("duplicate label"));
                            }
                            rules.labels.push(LabelRule {
                                label,
                                phrase: phrase(&words[3..w]),
                                window: num(words.get(w + 1))?,
                            });
                        }
                        _ => return Err(err("expected RULE <label> TRIGGER <phrase> WINDOW <n>")),
                    }
                }
                _ => return Err(err("unrecognised directive")),
            }
        }
        Ok(rules)
    }

    pub fn schema(&self) -> Vec<String> {
        self.labels.iter().map(|r| r.label.clone()).collect()
    }
}

/// Binary findings over the canonical label schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub schema: Vec<String>,
    pub values: Vec<bool>,
}

impl LabelVector {
    pub fn all_negative(schema: Vec<String>) -> Self {
        let values = vec![false; schema.len()];
        Self { schema, values }
    }

    pub fn get(&self, label: &str) -> Option<bool> {
        self.schema.iter().position(|l| l == label).map(|i| self.values[i])
    }

    pub fn positives(&self) -> Vec<&str> {
        self.schema
            .iter()
            .zip(&self.values)
            .filter_map(|(l, &v)| v.then_some(l.as_str()))
            .collect()
    }
}

/// Fraction of labels on which `pred` and `truth` agree.
pub fn label_accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<f64, RewardError> {
    if pred.schema != truth.schema || pred.values.len() != truth.values.len() {
        return Err(RewardError::SchemaMismatch);
    }
    if truth.values.is_empty() {
        return Ok(1.0);
    }
    let agree = pred.values.iter().zip(&truth.values).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / truth.values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Anatomy,
    Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLabel {
    LocatedAt,
    Modify,
    SuggestiveOf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub text: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub src: u32,
    pub dst: u32,
    pub label: RelationLabel,
}

/// Entities and typed relations extracted from a report.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

type NodeKey = (String, Category);
type EntityKey = (String, Category, Vec<(RelationLabel, bool, String, Category)>);
type RelationKey = (String, Category, String, Category, RelationLabel);

impl ReportGraph {
    pub fn new(entities: Vec<Entity>, relations: Vec<Relation>) -> Result<Self, RewardError> {
        let g = Self { entities, relations };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let mut ids = BTreeSet::new();
        for e in &self.entities {
            if !ids.insert(e.id) {
                return Err(RewardError::DuplicateEntity(e.id));
            }
        }
        for r in &self.relations {
            for id in [r.src, r.dst] {
                if !ids.contains(&id) {
                    return Err(RewardError::DanglingRelation(id));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    fn nodes(&self) -> HashMap<u32, NodeKey> {
        self.entities
            .iter()
            .map(|e| (e.id, (e.text.clone(), e.category)))
            .collect()
    }

    /// Entity match keys: text, category, and the entity's incident relations
    /// described by label, direction and the other endpoint's text/category.
    fn entity_keys(&self) -> Vec<EntityKey> {
        let nodes = self.nodes();
        let mut incident: HashMap<u32, Vec<(RelationLabel, bool, String, Category)>> = HashMap::new();
        for r in &self.relations {
            if let (Some(s), Some(d)) = (nodes.get(&r.src), nodes.get(&r.dst)) {
                incident.entry(r.src).or_default().push((r.label, true, d.0.clone(), d.1));
                incident.entry(r.dst).or_default().push((r.label, false, s.0.clone(), s.1));
            }
        }
        self.entities
            .iter()
            .map(|e| {
                let mut rels = incident.remove(&e.id).unwrap_or_default();
                rels.sort();
                (e.text.clone(), e.category, rels)
            })
            .collect()
    }

    fn relation_keys(&self) -> Vec<RelationKey> {
        let nodes = self.nodes();
        self.relations
            .iter()
            .filter_map(|r| {
                let s = nodes.get(&r.src)?;
                let d = nodes.get(&r.dst)?;
                Some((s.0.clone(), s.1, d.0.clone(), d.1, r.label))
            })
            .collect()
    }
}

/// Size of the multiset intersection.
fn multiset_matches<K: Ord + Clone>(a: &[K], b: &[K]) -> usize {
    let mut counts: BTreeMap<&K, usize> = BTreeMap::new();
    for k in a {
        *counts.entry(k).or_default() += 1;
    }
    let mut matched = 0;
    for k in b {
        if let Some(c) = counts.get_mut(k) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    matched
}

/// F1 as an exact fraction `(num, den)` with the empty conventions: both
/// empty is 1, exactly one empty is 0. Kept rational so the graph score is a
/// single correctly rounded division.
fn set_f1(matched: usize, n_pred: usize, n_truth: usize) -> (u64, u64) {
    match (n_pred, n_truth) {
        (0, 0) => (1, 1),
        (0, _) | (_, 0) => (0, 1),
        _ => (2 * matched as u64, (n_pred + n_truth) as u64),
    }
}

/// Mean of entity F1 and relation F1.
///
/// Entities match on text, category and their incident relations (each
/// described by the other endpoint's text and category), so an observation
/// attached to the wrong anatomy does not count. Relations match on both
/// endpoints' text and category plus the label. Both are multiset matches.
/// Two empty graphs score 1; an empty graph against a non-empty one scores 0.
pub fn graph_f1(pred: &ReportGraph, truth: &ReportGraph) -> f64 {
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (pe, te) = (pred.entity_keys(), truth.entity_keys());
    let (pr, tr) = (pred.relation_keys(), truth.relation_keys());
    let (en, ed) = set_f1(multiset_matches(&pe, &te), pe.len(), te.len());
    let (rn, rd) = set_f1(multiset_matches(&pr, &tr), pr.len(), tr.len());
    (en * rd + rn * ed) as f64 / (2 * ed * rd) as f64
}

/// Neighbourhood used to grow the laterality subgraph from its seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HopMode {
    /// Seeds plus entities one relation away.
    #[default]
    OneHop,
    /// Everything reachable from a seed, ignoring direction.
    Transitive,
}

/// Subgraph grown from entities whose text is exactly one of `seeds`.
///
/// One-hop keeps seeds, their direct neighbours and every relation with a seed
/// endpoint. Transitive keeps the connected components of the seeds.
pub fn seeded_subgraph(graph: &ReportGraph, seeds: &[&str], mode: HopMode) -> ReportGraph {
    let seed_ids: BTreeSet<u32> = graph
        .entities
        .iter()
        .filter(|e| seeds.contains(&e.text.as_str()))
        .map(|e| e.id)
        .collect();
    let (keep_ids, relations): (BTreeSet<u32>, Vec<Relation>) = match mode {
        HopMode::OneHop => {
            let rels: Vec<Relation> = graph
                .relations
                .iter()
                .filter(|r| seed_ids.contains(&r.src) || seed_ids.contains(&r.dst))
                .cloned()
                .collect();
            let mut ids = seed_ids.clone();
            for r in &rels {
                ids.insert(r.src);
                ids.insert(r.dst);
            }
            (ids, rels)
        }
        HopMode::Transitive => {
            let mut ids = seed_ids.clone();
            loop {
                let before = ids.len();
                for r in &graph.relations {
                    if ids.contains(&r.src) || ids.contains(&r.dst) {
                        ids.insert(r.src);
                        ids.insert(r.dst);
                    }
                }
                if ids.len() == before {
                    break;
                }
            }
            let rels = graph
                .relations
                .iter()
                .filter(|r| ids.contains(&r.src) && ids.contains(&r.dst))
                .cloned()
                .collect();
            (ids, rels)
        }
    };
    ReportGraph {
        entities: graph
            .entities
            .iter()
            .filter(|e| keep_ids.contains(&e.id))
            .cloned()
            .collect(),
        relations,
    }
}

pub fn laterality_subgraph(graph: &ReportGraph, mode: HopMode) -> ReportGraph {
    seeded_subgraph(graph, &LATERALITY_SEEDS, mode)
}

pub fn laterality_f1(pred: &ReportGraph, truth: &ReportGraph, mode: HopMode) -> f64 {
    graph_f1(&laterality_subgraph(pred, mode), &laterality_subgraph(truth, mode))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F-measure over token LCS. `beta = 1` weighs precision and recall
/// equally; both sequences empty scores 1.
pub fn rouge_l_beta(candidate: &[TokenId], reference: &[TokenId], beta: f64) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    rouge_l_beta(candidate, reference, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub rouge_l: f64,
    pub label_acc: f64,
    pub graph_f1: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(rouge_l: f64, label_acc: f64, graph_f1: f64) -> Self {
        Self {
            rouge_l,
            label_acc,
            graph_f1,
            total: rouge_l + label_acc + graph_f1,
        }
    }
}

/// Rule-based scorer bound to a vocabulary.
#[derive(Debug, Clone)]
pub struct Scorer {
    vocab: Vocab,
    rules: Rules,
    pub rouge_beta: f64,
    pub hop_mode: HopMode,
}

impl Scorer {
    pub fn new(vocab: Vocab, rules: Rules) -> Self {
        Self {
            vocab,
            rules,
            rouge_beta: 1.0,
            hop_mode: HopMode::OneHop,
        }
    }

    pub fn synthetic() -> Self {
        Self::new(Vocab::synthetic(), Rules::builtin())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn rules(&self) -> &Rules {
        &self.rules
    }

    fn words<'a>(&'a self, ids: &[TokenId]) -> Vec<&'a str> {
        ids.iter()
            .filter(|&&id| id != self.vocab.eos_id())
            .filter_map(|&id| self.vocab.word(id))
            .collect()
    }

    fn rule_fires(&self, rule: &LabelRule, words: &[&str]) -> bool {
        let Some((anchor, quals)) = rule.phrase.split_last() else {
            return false;
        };
        (0..words.len()).filter(|&p| words[p] == anchor).any(|p| {
            let lo = p.saturating_sub(rule.window);
            let mut q = quals.iter();
            let mut want = q.next();
            for w in &words[lo..p] {
                if want.is_some_and(|x| x == w) {
                    want = q.next();
                }
            }
            let neg_lo = p.saturating_sub(self.rules.neg_window);
            let negated = words[neg_lo..p]
                .iter()
                .any(|w| self.rules.negations.iter().any(|n| n == w));
            want.is_none() && !negated
        })
    }

    /// Rule-based finding labels; each section is scanned on its own.
    pub fn labels(&self, report: &Report) -> LabelVector {
        let mut out = LabelVector::all_negative(self.rules.schema());
        for section in report.sections() {
            let words = self.words(section);
            for (i, rule) in self.rules.labels.iter().enumerate() {
                if !out.values[i] && self.rule_fires(rule, &words) {
                    out.values[i] = true;
                }
            }
        }
        out
    }

    fn longest_match(lexicon: &[Vec<String>], words: &[&str], at: usize) -> Option<usize> {
        lexicon
            .iter()
            .filter(|p| p.len() <= words.len() - at && p.iter().zip(&words[at..]).all(|(a, b)| a == b))
            .map(Vec::len)
            .max()
    }

    /// Rule-based entity/relation graph.
    pub fn graph(&self, report: &Report) -> ReportGraph {
        let mut graph = ReportGraph::default();
        for section in report.sections() {
            let words = self.words(section);
            // (id, start, end inclusive, category)
            let mut spans: Vec<(u32, usize, usize, Category)> = Vec::new();
            let mut i = 0;
            while i < words.len() {
                let a = Self::longest_match(&self.rules.anatomy, &words, i);
                let o = Self::longest_match(&self.rules.observations, &words, i);
                let hit = match (a, o) {
                    (Some(a), Some(o)) if o > a => Some((o, Category::Observation)),
                    (Some(a), _) => Some((a, Category::Anatomy)),
                    (None, Some(o)) => Some((o, Category::Observation)),
                    (None, None) => None,
                };
                match hit {
                    Some((len, category)) => {
                        let id = graph.entities.len() as u32;
                        graph.entities.push(Entity {
                            id,
                            text: words[i..i + len].join(" "),
                            category,
                        });
                        spans.push((id, i, i + len - 1, category));
                        i += len;
                    }
                    None => i += 1,
                }
            }
            for &(oid, start, _, cat) in &spans {
                if cat != Category::Observation {
                    continue;
                }
                let anchor = spans
                    .iter()
                    .filter(|s| s.3 == Category::Anatomy && s.2 < start && start - s.2 <= self.rules.rel_window)
                    .max_by_key(|s| s.2);
                if let Some(&(aid, ..)) = anchor {
                    graph.relations.push(Relation {
                        src: oid,
                        dst: aid,
                        label: RelationLabel::LocatedAt,
                    });
                }
            }
        }
        graph
    }

    pub fn rouge(&self, candidate: &[TokenId], reference: &[TokenId]) -> f64 {
        rouge_l_beta(candidate, reference, self.rouge_beta)
    }

    /// Unweighted sum of ROUGE-L, label accuracy and graph F1.
    pub fn combined_reward(
        &self,
        final_report: &Report,
        truth_report: &Report,
        truth_labels: &LabelVector,
        truth_graph: &ReportGraph,
    ) -> Result<RewardBreakdown, RewardError> {
        let rouge = self.rouge(&final_report.concatenated(), &truth_report.concatenated());
        let acc = label_accuracy(&self.labels(final_report), truth_labels)?;
        let gf1 = graph_f1(&self.graph(final_report), truth_graph);
        Ok(RewardBreakdown::new(rouge, acc, gf1))
    }

    pub fn laterality_f1(&self, pred: &ReportGraph, truth: &ReportGraph) -> f64 {
        laterality_f1(pred, truth, self.hop_mode)
    }
}
