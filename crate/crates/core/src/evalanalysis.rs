//! Held-out evaluation with greedy decoding, the per-token laterality table
//! and the four-variant ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyModel;
use crate::rewards::{graph_f1, seeded_subgraph, RewardBreakdown, RewardError, Scorer, LATERALITY_SEEDS};
use crate::synthenv::{Case, CaseDataset, Split};
use crate::textcore::Report;
use crate::trainer::{train_loop, TrainConfig, TrainError};
use crate::workflow::{final_report, run_greedy_rollout, AgentParams, WorkflowError, WorkflowPlan};

pub const EVAL_SCHEMA: &str = "eval-v1";
pub const ABLATION_HEADER_TAG: &str = "# ablation-v1";
pub const LATERALITY_HEADER_TAG: &str = "# laterality-v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("{preds} predictions for {truths} cases")]
    Misaligned { preds: usize, truths: usize },
    #[error("case {case_id}: {source}")]
    Workflow {
        case_id: u64,
        #[source]
        source: WorkflowError,
    },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("eval file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Untrained single agent.
    Vanilla,
    /// Single agent trained with the full budget.
    SingleAgentRl,
    /// The four-agent workflow, untrained.
    MultiAgentNoRl,
    /// The four-agent workflow, trained.
    Marl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::SingleAgentRl, Variant::MultiAgentNoRl, Variant::Marl];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::SingleAgentRl => "single_agent_rl",
            Variant::MultiAgentNoRl => "multi_agent_no_rl",
            Variant::Marl => "marl",
        }
    }

    pub fn plan(self) -> WorkflowPlan {
        match self {
            Variant::Vanilla | Variant::SingleAgentRl => WorkflowPlan::single(),
            Variant::MultiAgentNoRl | Variant::Marl => WorkflowPlan::reference(),
        }
    }

    pub fn trained(self) -> bool {
        matches!(self, Variant::SingleAgentRl | Variant::Marl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseEval {
    pub case_id: u64,
    pub reward: RewardBreakdown,
    pub laterality_f1: f64,
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub total: MeanStd,
    pub rouge_l: MeanStd,
    pub label_acc: MeanStd,
    pub graph_f1: MeanStd,
    pub laterality_f1: MeanStd,
}

impl Aggregates {
    pub fn from_rows(rows: &[CaseEval]) -> Self {
        Self {
            total: MeanStd::of(rows.iter().map(|r| r.reward.total)),
            rouge_l: MeanStd::of(rows.iter().map(|r| r.reward.rouge_l)),
            label_acc: MeanStd::of(rows.iter().map(|r| r.reward.label_acc)),
            graph_f1: MeanStd::of(rows.iter().map(|r| r.reward.graph_f1)),
            laterality_f1: MeanStd::of(rows.iter().map(|r| r.laterality_f1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Option<Variant>,
    pub config_hash: String,
    pub case_count: usize,
    pub aggregates: Aggregates,
    pub cases: Vec<CaseEval>,
}

#[derive(Serialize, Deserialize)]
struct EvalHeader {
    schema: String,
    variant: Option<Variant>,
    config_hash: String,
    case_count: usize,
    aggregates: Aggregates,
}

impl EvalReport {
    pub fn from_rows(cases: Vec<CaseEval>, config_hash: impl Into<String>, variant: Option<Variant>) -> Self {
        Self {
            variant,
            config_hash: config_hash.into(),
            case_count: cases.len(),
            aggregates: Aggregates::from_rows(&cases),
            cases,
        }
    }

    pub fn mean_total(&self) -> f64 {
        self.aggregates.total.mean
    }

    pub fn mean_laterality(&self) -> f64 {
        self.aggregates.laterality_f1.mean
    }

    /// Same rows and aggregates under another variant label.
    pub fn relabel(mut self, variant: Variant) -> Self {
        self.variant = Some(variant);
        self
    }

    /// Header line with aggregates, then one line per case.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        let header = EvalHeader {
            schema: EVAL_SCHEMA.into(),
            variant: self.variant,
            config_hash: self.config_hash.clone(),
            case_count: self.case_count,
            aggregates: self.aggregates,
        };
        let enc = |e: serde_json::Error| EvalError::Format(e.to_string());
        writeln!(out, "{}", serde_json::to_string(&header).map_err(enc)?)?;
        for c in &self.cases {
            writeln!(out, "{}", serde_json::to_string(c).map_err(enc)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, EvalError> {
        let dec = |e: serde_json::Error| EvalError::Format(e.to_string());
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| EvalError::Format("empty file".into()))??;
        let header: EvalHeader = serde_json::from_str(&first).map_err(dec)?;
        if header.schema != EVAL_SCHEMA {
            return Err(EvalError::Format(format!("unsupported schema {:?}", header.schema)));
        }
        let mut cases = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                cases.push(serde_json::from_str(&line).map_err(dec)?);
            }
        }
        if cases.len() != header.case_count {
            return Err(EvalError::Format("case count does not match header".into()));
        }
        Ok(Self {
            variant: header.variant,
            config_hash: header.config_hash,
            case_count: header.case_count,
            aggregates: header.aggregates,
            cases,
        })
    }
}

/// Score already-decoded reports against their cases.
pub fn score_reports(reports: &[Report], cases: &[&Case], scorer: &Scorer) -> Result<Vec<CaseEval>, EvalError> {
    if reports.len() != cases.len() {
        return Err(EvalError::Misaligned {
            preds: reports.len(),
            truths: cases.len(),
        });
    }
    reports
        .par_iter()
        .zip(cases.par_iter())
        .map(|(rep, case)| {
            let reward = scorer.combined_reward(rep, &case.truth_report, &case.truth_labels, &case.truth_graph)?;
            Ok(CaseEval {
                case_id: case.case_id,
                reward,
                laterality_f1: scorer.laterality_f1(&scorer.graph(rep), &case.truth_graph),
            })
        })
        .collect()
}

/// Greedy final reports for each case, in input order.
pub fn greedy_reports(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    params: &AgentParams,
    scorer: &Scorer,
    cases: &[&Case],
) -> Result<Vec<Report>, EvalError> {
    cases
        .par_iter()
        .map(|case| {
            let rollout = run_greedy_rollout(plan, model, params, scorer.vocab(), case.query(), 1.0).map_err(|source| {
                EvalError::Workflow {
                    case_id: case.case_id,
                    source,
                }
            })?;
            Ok(final_report(&rollout, scorer.vocab()))
        })
        .collect()
}

/// Greedy-decode every case of `split` and score it.
pub fn evaluate(
    plan: &WorkflowPlan,
    model: &PolicyModel,
    params: &AgentParams,
    scorer: &Scorer,
    dataset: &CaseDataset,
    split: Split,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    let cases = dataset.split(split);
    if cases.is_empty() {
        return Err(EvalError::EmptySplit(split.label()));
    }
    let reports = greedy_reports(plan, model, params, scorer, &cases)?;
    let rows = score_reports(&reports, &cases, scorer)?;
    Ok(EvalReport::from_rows(rows, config_hash, None))
}

/// One column of the laterality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralityColumn {
    pub seed: String,
    /// Mean over cases of the F1 between single-seed subgraphs.
    pub f1: f64,
    /// Entities with exactly this text in the truth graphs.
    pub truth_occurrences: usize,
    pub pred_occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralityTable {
    pub columns: Vec<LateralityColumn>,
    /// Mean over cases of the all-seed laterality F1.
    pub combined: f64,
    pub case_count: usize,
}

impl LateralityTable {
    pub fn column(&self, seed: &str) -> Option<&LateralityColumn> {
        self.columns.iter().find(|c| c.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LATERALITY_HEADER_TAG}\ncolumn,f1,truth_occurrences,pred_occurrences\n");
        for c in &self.columns {
            let _ = writeln!(s, "{},{:?},{},{}", c.seed, c.f1, c.truth_occurrences, c.pred_occurrences);
        }
        let _ = writeln!(s, "combined,{:?},,", self.combined);
        s
    }
}

/// Per-seed-token breakdown of laterality F1 over aligned predictions and cases.
pub fn laterality_table(preds: &[Report], cases: &[&Case], scorer: &Scorer) -> Result<LateralityTable, EvalError> {
    if preds.len() != cases.len() {
        return Err(EvalError::Misaligned {
            preds: preds.len(),
            truths: cases.len(),
        });
    }
    let pred_graphs: Vec<_> = preds.par_iter().map(|r| scorer.graph(r)).collect();
    let n = cases.len();
    let mean = |xs: Vec<f64>| if n == 0 { 1.0 } else { xs.iter().sum::<f64>() / n as f64 };
    let count = |graphs: &mut dyn Iterator<Item = &crate::rewards::ReportGraph>, seed: &str| {
        graphs
            .map(|g| g.entities.iter().filter(|e| e.text == seed).count())
            .sum::<usize>()
    };
    let columns = LATERALITY_SEEDS
        .iter()
        .map(|&seed| {
            let f1s = pred_graphs
                .iter()
                .zip(cases)
                .map(|(p, c)| {
                    graph_f1(
                        &seeded_subgraph(p, &[seed], scorer.hop_mode),
                        &seeded_subgraph(&c.truth_graph, &[seed], scorer.hop_mode),
                    )
                })
                .collect();
            LateralityColumn {
                seed: seed.to_owned(),
                f1: mean(f1s),
                truth_occurrences: count(&mut cases.iter().map(|c| &c.truth_graph), seed),
                pred_occurrences: count(&mut pred_graphs.iter(), seed),
            }
        })
        .collect();
    let combined = mean(
        pred_graphs
            .iter()
            .zip(cases)
            .map(|(p, c)| scorer.laterality_f1(p, &c.truth_graph))
            .collect(),
    );
    Ok(LateralityTable {
        columns,
        combined,
        case_count: n,
    })
}

/// The four evaluation reports of an ablation, in `Variant::ALL` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub reports: Vec<EvalReport>,
}

impl Ablation {
    pub fn get(&self, v: Variant) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.variant == Some(v))
            .expect("every variant is present")
    }

    pub fn csv_header() -> &'static str {
        "variant,cases,mean_total,std_total,mean_rouge_l,mean_label_acc,mean_graph_f1,mean_laterality_f1"
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER_TAG}\n{}\n", Self::csv_header());
        for r in &self.reports {
            let a = &r.aggregates;
            let _ = writeln!(
                s,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.variant.map_or("unlabelled", Variant::label),
                r.case_count,
                a.total.mean,
                a.total.std,
                a.rouge_l.mean,
                a.label_acc.mean,
                a.graph_f1.mean,
                a.laterality_f1.mean
            );
        }
        s
    }
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// Train and evaluate the four variants on the test split, writing each
/// training run under `out/<variant>` and the comparison to `out/ablation.csv`.
pub fn ablation_run(
    dataset: &CaseDataset,
    base_config: &TrainConfig,
    model: &PolicyModel,
    scorer: &Scorer,
    out: &Path,
) -> Result<Ablation, EvalError> {
    fs::create_dir_all(out)?;
    let hash = base_config.hash();
    let mut reports = Vec::with_capacity(4);
    for v in Variant::ALL {
        let plan = v.plan();
        let params = if v.trained() {
            train_loop(&plan, model, scorer, dataset, base_config, &out.join(v.label()))?.state.params
        } else {
            plan.init_params(model)
        };
        let rep = evaluate(&plan, model, &params, scorer, dataset, Split::Test, &hash)?;
        let mut f = fs::File::create(out.join(format!("{}.eval.jsonl", v.label())))?;
        let rep = rep.relabel(v);
        rep.write_jsonl(&mut f)?;
        reports.push(rep);
    }
    let ab = Ablation { reports };
    fs::write(out.join(ABLATION_FILE), ab.to_csv())?;
    Ok(ab)
}
