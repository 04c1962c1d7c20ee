//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary is always shown.
//! Set `ACCEPTANCE_ONLY=1,3,5` to run a subset.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use common::*;
use marlrad::evalanalysis::{ablation_run, evaluate, laterality_table, Aggregates, EvalReport, Variant, ABLATION_FILE};
use marlrad::magspo::{
    compute_advantages, magspo_objective, magspo_value, Branch, ClipConfig, SurrogateInputs,
    DEFAULT_STD_FLOOR,
};
use marlrad::policy::PolicyModel;
use marlrad::rewards::{
    graph_f1, laterality_f1, laterality_subgraph, rouge_l, Category, Entity, HopMode, Relation, RelationLabel,
    ReportGraph, Scorer,
};
use marlrad::synthenv::{build_dataset, CaseDataset, Split, SplitSizes, SynthConfig, QUERY_DIM};
use marlrad::textcore::Report;
use marlrad::trainer::{load_checkpoint, train_loop, train_loop_with, LoopControl, TrainConfig};
use marlrad::workflow::{AgentParams, WorkflowPlan};

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "K=1 reduction to single-agent GSPO", c1_k1_reduction),
        (2, "gradient matches finite differences", c2_gradient_fd),
        (3, "advantage invariants", c3_advantages),
        (4, "clipping with the reported thresholds", c4_clipping),
        (5, "metric oracles and fixtures", c5_metric_oracles),
        (6, "determinism and resume", c6_determinism),
        (7, "end-to-end learning", c7_learning),
        (8, "ablation harness", c8_ablation),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {id} [{name}]: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} [{name}]: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn random_clip(rng: &mut rand_chacha::ChaCha8Rng) -> ClipConfig {
    if rng.random_bool(0.5) {
        ClipConfig::default()
    } else {
        ClipConfig::new(rng.random_range(0.01..0.3), rng.random_range(0.01..0.3)).unwrap()
    }
}

fn c1_k1_reduction() -> Check {
    let t0 = Instant::now();
    let (vocab, model) = short_model(12);
    let plan = WorkflowPlan::single();
    let mut rng = rng(101);
    let (mut worst_obj, mut worst_grad, mut clipped_total) = (0.0f64, 0.0f64, 0usize);
    for inst in 0..100 {
        let g = rng.random_range(2..=16);
        let b = rng.random_range(1..=3);
        let drift = [0.0, 1e-4, 1e-3, 1e-2][rng.random_range(0..4)];
        let x = random_instance(&mut rng, &plan, &vocab, &model, b, g, drift, DEFAULT_STD_FLOOR);
        let clip = random_clip(&mut rng);
        let inp = SurrogateInputs {
            plan: &plan,
            model: &model,
            params: &x.new,
            clip,
            temperature: 1.0,
        };
        let got = magspo_objective(&x.groups, &inp).map_err(|e| e.to_string())?;
        let want = oracle_surrogate(
            &oracle_groups(&x.groups),
            &x.new,
            model.feature_map(),
            clip.eps_low,
            clip.eps_high,
            1.0,
            DEFAULT_STD_FLOOR,
        );
        let d_obj = (got.objective - want.objective).abs();
        ensure!(d_obj <= 1e-12, "instance {inst}: objective differs by {d_obj:e}");
        ensure!(got.clipped_count() == want.clipped, "instance {inst}: clipped count differs");
        clipped_total += want.clipped;
        for (id, gw) in &want.gradients {
            let gg = &got.gradients[id];
            let err = if max_abs(gw) == 0.0 { max_abs(gg) } else { rel_inf_err(gg, gw) };
            ensure!(err <= 1e-10, "instance {inst}: gradient relative error {err:e}");
            worst_grad = worst_grad.max(err);
        }
        worst_obj = worst_obj.max(d_obj);
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s (limit 30s)");
    Ok(format!(
        "100 instances, max |dJ| {worst_obj:.1e}, max grad rel err {worst_grad:.1e}, {clipped_total} clipped terms exercised"
    ))
}

fn c2_gradient_fd() -> Check {
    let t0 = Instant::now();
    let (vocab, model) = short_model(12);
    let plans = [WorkflowPlan::reference(), shared_plan(), WorkflowPlan::single()];
    let mut rng = rng(202);
    let h = 1e-5;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let mut accepted = 0;
    while accepted < 50 {
        let plan = &plans[accepted % plans.len()];
        let g = rng.random_range(2..=6);
        let b = rng.random_range(1..=2);
        let x = random_instance(&mut rng, plan, &vocab, &model, b, g, 1e-2, DEFAULT_STD_FLOOR);
        let clip = ClipConfig::new(rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)).unwrap();
        let inp = SurrogateInputs {
            plan,
            model: &model,
            params: &x.new,
            clip,
            temperature: 1.0,
        };
        let rep = magspo_objective(&x.groups, &inp).map_err(|e| e.to_string())?;
        let near_boundary = rep
            .terms
            .iter()
            .any(|t| (t.ratio - clip.lower()).abs() < 1e-4 || (t.ratio - clip.upper()).abs() < 1e-4);
        if near_boundary {
            continue;
        }
        accepted += 1;
        for (id, grad) in &rep.gradients {
            let mut order: Vec<usize> = (0..grad.len()).collect();
            order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
            let mut coords: Vec<usize> = order.iter().take(4).copied().collect();
            let nonzero: Vec<usize> = order.iter().copied().filter(|&i| grad[i].abs() >= 1e-5).collect();
            for _ in 0..4 {
                if !nonzero.is_empty() {
                    coords.push(nonzero[rng.random_range(0..nonzero.len())]);
                }
            }
            coords.push(rng.random_range(0..grad.len()));
            for j in coords {
                let eval = |delta: f64| {
                    let mut p: AgentParams = x.new.clone();
                    p.get_mut(id).unwrap().weights_mut()[j] += delta;
                    let inp = SurrogateInputs { params: &p, ..inp };
                    magspo_value(&x.groups, &inp).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grad[j];
                if an.abs() >= 1e-5 {
                    let rel = (fd - an).abs() / an.abs();
                    ensure!(rel <= 1e-4, "agent {id} coord {j}: analytic {an:e} vs fd {fd:e} (rel {rel:e})");
                    worst = worst.max(rel);
                } else {
                    ensure!((fd - an).abs() <= 1e-9, "agent {id} coord {j}: analytic {an:e} vs fd {fd:e}");
                }
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s (limit 60s)");
    Ok(format!("50 instances, {checked} coordinates, max rel err {worst:.1e}"))
}

fn c3_advantages() -> Check {
    let mut rng = rng(303);
    let mut degenerate = 0;
    for i in 0..1000 {
        let g = rng.random_range(2..=32);
        let offset = rng.random_range(-100.0..100.0);
        let spread = [1e-3, 1.0, 50.0][i % 3];
        let rewards: Vec<f64> = if i % 10 == 0 {
            vec![offset; g]
        } else {
            (0..g).map(|_| offset + spread * rng.random_range(-1.0..1.0)).collect()
        };
        let adv = compute_advantages(&rewards, DEFAULT_STD_FLOOR).map_err(|e| e.to_string())?;
        let n = g as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < DEFAULT_STD_FLOOR {
            degenerate += 1;
            ensure!(adv.iter().all(|&a| a == 0.0), "group {i}: all-equal rewards gave non-zero advantages");
            continue;
        }
        let a_mean = adv.iter().sum::<f64>() / n;
        ensure!(a_mean.abs() < 1e-12, "group {i}: mean advantage {a_mean:e}");
        let a_std = (adv.iter().map(|a| (a - a_mean).powi(2)).sum::<f64>() / n).sqrt();
        ensure!((a_std - 1.0).abs() <= 1e-9, "group {i}: advantage std {a_std}");
        let (scale, shift) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv2 = compute_advantages(&moved, DEFAULT_STD_FLOOR).map_err(|e| e.to_string())?;
        let d = adv.iter().zip(&adv2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        ensure!(d <= 1e-9, "group {i}: affine transform moved advantages by {d:e}");
    }
    Ok(format!("1000 groups ({degenerate} all-equal)"))
}

fn c4_clipping() -> Check {
    let (vocab, model) = short_model(12);
    let clip = ClipConfig::new(0.0003, 0.0004).unwrap();
    let mut rng = rng(404);
    let plans = [WorkflowPlan::reference(), WorkflowPlan::single(), shared_plan()];

    // on-policy: current parameters equal the sampling snapshot
    let mut on_terms = 0;
    for plan in &plans {
        let x = random_instance(&mut rng, plan, &vocab, &model, 3, 8, 0.0, DEFAULT_STD_FLOOR);
        let inp = SurrogateInputs {
            plan,
            model: &model,
            params: &x.old,
            clip,
            temperature: 1.0,
        };
        let rep = magspo_objective(&x.groups, &inp).map_err(|e| e.to_string())?;
        ensure!(rep.clipped_count() == 0, "on-policy batch has {} clipped terms", rep.clipped_count());
        ensure!(rep.terms.iter().all(|t| t.ratio == 1.0), "on-policy ratio differs from 1");
        on_terms += rep.terms.len();
    }

    // every term pushed strictly outside the band in its advantage's direction
    let mut off_terms = 0;
    for plan in &plans {
        let mut x = random_instance(&mut rng, plan, &vocab, &model, 2, 6, 0.0, DEFAULT_STD_FLOOR);
        for g in &mut x.groups {
            g.rewards = (0..g.rewards.len()).map(|i| i as f64 * 0.37).collect();
            g.fill_advantages(DEFAULT_STD_FLOOR).unwrap();
            for (r, adv) in g.rollouts.iter_mut().zip(&g.advantages) {
                for s in &mut r.slots {
                    let new_lp = model.sequence_logprob(&x.new[&s.agent_id], &s.context, &s.output, 1.0).unwrap();
                    let shift = s.output.len() as f64 * 1.01f64.ln() * adv.signum();
                    s.logprob_sum = new_lp - shift;
                }
            }
        }
        let inp = SurrogateInputs {
            plan,
            model: &model,
            params: &x.new,
            clip,
            temperature: 1.0,
        };
        let rep = magspo_objective(&x.groups, &inp).map_err(|e| e.to_string())?;
        ensure!(rep.clipped_count() == rep.terms.len(), "not every constructed term was clipped");
        for (id, g) in &rep.gradients {
            ensure!(g.iter().all(|&v| v == 0.0), "agent {id}: gradient not exactly zero");
        }
        off_terms += rep.terms.len();
    }

    // clip fraction against a brute-force branch count under drift
    let mut drift_terms = 0;
    let mut drift_clipped = 0;
    for i in 0..12 {
        let plan = &plans[i % plans.len()];
        let drift = [1e-4, 1e-3, 3e-3][i % 3];
        let x = random_instance(&mut rng, plan, &vocab, &model, 2, 8, drift, DEFAULT_STD_FLOOR);
        let inp = SurrogateInputs {
            plan,
            model: &model,
            params: &x.new,
            clip,
            temperature: 1.0,
        };
        let rep = magspo_objective(&x.groups, &inp).map_err(|e| e.to_string())?;
        let mut count = 0;
        let mut total = 0;
        for g in &x.groups {
            for (r, &adv) in g.rollouts.iter().zip(&g.advantages) {
                for s in &r.slots {
                    let lp = model.sequence_logprob(&x.new[&s.agent_id], &s.context, &s.output, 1.0).unwrap();
                    let ratio = ((lp - s.logprob_sum) / s.output.len() as f64).exp();
                    let raw = ratio * adv;
                    let bounded = ratio.clamp(0.9997, 1.0004) * adv;
                    if bounded < raw {
                        count += 1;
                    }
                    total += 1;
                }
            }
        }
        ensure!(rep.clipped_count() == count, "clip count {} vs brute force {count}", rep.clipped_count());
        ensure!(
            rep.clip_fraction() == count as f64 / total as f64,
            "clip fraction {} vs brute force {}",
            rep.clip_fraction(),
            count as f64 / total as f64
        );
        ensure!(
            rep.terms.iter().filter(|t| t.branch == Branch::Clipped).count() == count,
            "term branches disagree"
        );
        drift_terms += total;
        drift_clipped += count;
    }
    Ok(format!(
        "{on_terms} on-policy terms unclipped, {off_terms} constructed terms all clipped with zero gradient, \
         clip count exact on {drift_terms} drifted terms ({drift_clipped} clipped)"
    ))
}

fn ent(id: u32, text: &str, category: Category) -> Entity {
    Entity {
        id,
        text: text.into(),
        category,
    }
}

fn located(src: u32, dst: u32) -> Relation {
    Relation {
        src,
        dst,
        label: RelationLabel::LocatedAt,
    }
}

fn c5_metric_oracles() -> Check {
    let mut rng = rng(505);
    for i in 0..1000 {
        let la = rng.random_range(0..=10);
        let lb = rng.random_range(0..=10);
        let alphabet = rng.random_range(2..8);
        let a: Vec<u32> = (0..la).map(|_| rng.random_range(0..alphabet)).collect();
        let b: Vec<u32> = (0..lb).map(|_| rng.random_range(0..alphabet)).collect();
        let got = rouge_l(&a, &b);
        let want = brute_rouge(&a, &b);
        ensure!(got == want, "pair {i}: rouge_l {got} vs brute force {want} for {a:?} / {b:?}");
    }

    // hand-computed fixtures
    ensure!(rouge_l(&[1, 3, 4, 5], &[1, 2, 3, 4]) == 0.75, "rouge fixture");
    let truth = ReportGraph::new(
        vec![
            ent(0, "heart", Category::Anatomy),
            ent(1, "effusion", Category::Observation),
            ent(2, "left", Category::Anatomy),
        ],
        vec![],
    )
    .unwrap();
    let pred = ReportGraph::new(
        vec![
            ent(5, "heart", Category::Anatomy),
            ent(6, "left", Category::Anatomy),
            ent(7, "edema", Category::Observation),
        ],
        vec![],
    )
    .unwrap();
    ensure!(graph_f1(&truth, &truth) == 1.0, "identical graphs");
    ensure!(graph_f1(&ReportGraph::default(), &truth) == 0.0, "empty prediction");
    ensure!(graph_f1(&pred, &truth) == 5.0 / 6.0, "two of three entities: {}", graph_f1(&pred, &truth));

    let scorer = Scorer::synthetic();
    let words = |s: &str| Report::new(scorer.vocab().encode_words(s).unwrap(), vec![]);
    let g = scorer.graph(&words("left lung effusion"));
    ensure!(
        g == ReportGraph::new(
            vec![ent(0, "left lung", Category::Anatomy), ent(1, "effusion", Category::Observation)],
            vec![located(1, 0)]
        )
        .unwrap(),
        "extraction fixture: {g:?}"
    );
    let three = ReportGraph::new(
        vec![
            ent(0, "left lung", Category::Anatomy),
            ent(1, "effusion", Category::Observation),
            ent(2, "heart", Category::Anatomy),
        ],
        vec![located(1, 0)],
    )
    .unwrap();
    let sub = laterality_subgraph(&three, HopMode::OneHop);
    ensure!(
        sub == ReportGraph::new(
            vec![ent(0, "left lung", Category::Anatomy), ent(1, "effusion", Category::Observation)],
            vec![located(1, 0)]
        )
        .unwrap(),
        "one-hop fixture"
    );
    ensure!(laterality_subgraph(&truth_without_seeds(), HopMode::OneHop).is_empty(), "no seeds");
    let lone = ReportGraph::new(vec![ent(4, "right", Category::Anatomy)], vec![]).unwrap();
    ensure!(laterality_subgraph(&lone, HopMode::OneHop) == lone, "isolated seed");
    ensure!(laterality_f1(&three, &three, HopMode::OneHop) == 1.0, "identical laterality");
    let right = scorer.graph(&words("right lung effusion"));
    let left = scorer.graph(&words("left lung effusion"));
    ensure!(laterality_f1(&right, &left, HopMode::OneHop) == 0.0, "swapped side");
    ensure!(
        laterality_f1(&truth_without_seeds(), &ReportGraph::default(), HopMode::OneHop) == 1.0,
        "both laterality subgraphs empty"
    );

    // swapped sides through the laterality table
    let (cases, swapped) = swapped_side_fixture(&scorer);
    let refs: Vec<_> = cases.iter().collect();
    let table = laterality_table(&swapped, &refs, &scorer).map_err(|e| e.to_string())?;
    let (l, r) = (table.column("left").unwrap(), table.column("right").unwrap());
    ensure!(l.f1 == 0.0 && r.f1 == 0.0, "swapped table: left {} right {}", l.f1, r.f1);

    for i in 0..1000 {
        let g = random_graph(&mut rng, 8);
        for mode in [HopMode::OneHop, HopMode::Transitive] {
            let once = laterality_subgraph(&g, mode);
            ensure!(laterality_subgraph(&once, mode) == once, "graph {i}: not idempotent under {mode:?}");
        }
    }
    Ok("1000 ROUGE-L pairs exact, all fixtures exact, 1000 graphs idempotent".into())
}

fn truth_without_seeds() -> ReportGraph {
    ReportGraph::new(
        vec![ent(0, "heart", Category::Anatomy), ent(1, "enlarged", Category::Observation)],
        vec![located(1, 0)],
    )
    .unwrap()
}

const PINNED_SEED: u64 = 1;

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        master_seed: seed,
        total_steps: 300,
        checkpoint_every: 50,
        ..TrainConfig::default()
    }
}

fn dataset(seed: u64, scorer: &Scorer) -> CaseDataset {
    build_dataset(seed, SplitSizes::default(), &SynthConfig::default(), scorer).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("marlrad-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

struct Run {
    dir: PathBuf,
    params: AgentParams,
}

/// The pinned-seed reference run, shared by the determinism and learning checks.
fn pinned_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let scorer = Scorer::synthetic();
        let model = PolicyModel::new(scorer.vocab(), QUERY_DIM);
        let ds = dataset(PINNED_SEED, &scorer);
        let dir = scratch("pinned");
        let out = train_loop(&WorkflowPlan::reference(), &model, &scorer, &ds, &desk_config(PINNED_SEED), &dir).unwrap();
        Run {
            dir,
            params: out.state.params,
        }
    })
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn compare_trees(a: &Path, b: &Path) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    ensure!(
        ta.keys().collect::<Vec<_>>() == tb.keys().collect::<Vec<_>>(),
        "file sets differ: {:?} vs {:?}",
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>()
    );
    for (k, v) in &ta {
        ensure!(tb[k] == *v, "{} differs", k.display());
    }
    Ok(ta.len())
}

fn c6_determinism() -> Check {
    let scorer = Scorer::synthetic();
    let model = PolicyModel::new(scorer.vocab(), QUERY_DIM);
    let ds = dataset(PINNED_SEED, &scorer);
    let plan = WorkflowPlan::reference();
    let cfg = desk_config(PINNED_SEED);
    let first = pinned_run();

    let again = scratch("again");
    train_loop(&plan, &model, &scorer, &ds, &cfg, &again).map_err(|e| e.to_string())?;
    let files = compare_trees(&first.dir, &again)?;

    let resumed = scratch("resumed");
    let halt = LoopControl {
        resume: false,
        halt_after: Some(130),
    };
    train_loop_with(&plan, &model, &scorer, &ds, &cfg, &resumed, halt).map_err(|e| e.to_string())?;
    let cont = LoopControl {
        resume: true,
        halt_after: None,
    };
    let out = train_loop_with(&plan, &model, &scorer, &ds, &cfg, &resumed, cont).map_err(|e| e.to_string())?;
    ensure!(out.metrics.first().map(|m| m.step) == Some(101), "resume did not restart after step 100");
    compare_trees(&first.dir, &resumed)?;
    let _ = fs::remove_dir_all(&again);
    let _ = fs::remove_dir_all(&resumed);
    Ok(format!(
        "two 300-step runs bit-identical over {files} files; halted at 130, resumed from 100, identical"
    ))
}

fn c7_learning() -> Check {
    let scorer = Scorer::synthetic();
    let model = PolicyModel::new(scorer.vocab(), QUERY_DIM);
    let plan = WorkflowPlan::reference();
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut lat_improved = 0;
    let mut all_total = true;
    for seed in [1u64, 2, 3] {
        let ds = dataset(seed, &scorer);
        let hash = desk_config(seed).hash();
        let before = evaluate(&plan, &model, &plan.init_params(&model), &scorer, &ds, Split::Test, &hash)
            .map_err(|e| e.to_string())?;
        let params = if seed == PINNED_SEED {
            pinned_run().params.clone()
        } else {
            let dir = scratch(&format!("seed{seed}"));
            let out = train_loop(&plan, &model, &scorer, &ds, &desk_config(seed), &dir).map_err(|e| e.to_string())?;
            let _ = fs::remove_dir_all(&dir);
            out.state.params
        };
        let after = evaluate(&plan, &model, &params, &scorer, &ds, Split::Test, &hash).map_err(|e| e.to_string())?;
        let gain = after.mean_total() / before.mean_total() - 1.0;
        all_total &= gain >= 0.30;
        if after.mean_laterality() > before.mean_laterality() {
            lat_improved += 1;
        }
        lines.push(format!(
            "seed {seed}: total {:.3}->{:.3} ({:+.0}%), laterality {:.3}->{:.3}",
            before.mean_total(),
            after.mean_total(),
            gain * 100.0,
            before.mean_laterality(),
            after.mean_laterality()
        ));
    }
    let detail = format!("{}; {:.0}s of training+eval", lines.join("; "), t0.elapsed().as_secs_f64());
    ensure!(all_total, "total reward gain below 30% on some seed: {detail}");
    ensure!(lat_improved >= 2, "laterality improved on only {lat_improved} of 3 seeds: {detail}");
    Ok(detail)
}

fn aggregates_consistent(r: &EvalReport) -> bool {
    let fresh = Aggregates::from_rows(&r.cases);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let a = &r.aggregates;
    [
        (a.total, fresh.total),
        (a.rouge_l, fresh.rouge_l),
        (a.label_acc, fresh.label_acc),
        (a.graph_f1, fresh.graph_f1),
        (a.laterality_f1, fresh.laterality_f1),
    ]
    .iter()
    .all(|(x, y)| close(x.mean, y.mean) && close(x.std, y.std))
        && r.case_count == r.cases.len()
}

fn c8_ablation() -> Check {
    let scorer = Scorer::synthetic();
    let model = PolicyModel::new(scorer.vocab(), QUERY_DIM);
    let ds = dataset(PINNED_SEED, &scorer);
    let cfg = desk_config(PINNED_SEED);
    let (da, db) = (scratch("ablate-a"), scratch("ablate-b"));
    let ab = ablation_run(&ds, &cfg, &model, &scorer, &da).map_err(|e| e.to_string())?;
    ablation_run(&ds, &cfg, &model, &scorer, &db).map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(da.join(ABLATION_FILE)).map_err(|e| e.to_string())?;
    ensure!(
        csv == fs::read_to_string(db.join(ABLATION_FILE)).map_err(|e| e.to_string())?,
        "ablation CSV differs between identical runs"
    );
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    ensure!(rows.len() == 4, "expected 4 rows, got {}", rows.len());
    for (row, v) in rows.iter().zip(Variant::ALL) {
        ensure!(row.starts_with(&format!("{},", v.label())), "row order: {row}");
    }
    for r in &ab.reports {
        ensure!(aggregates_consistent(r), "{:?}: aggregates not recomputable", r.variant);
    }
    // untrained variants equal the step-0 checkpoints of their trained twins
    for (untrained, trained) in [(Variant::Vanilla, Variant::SingleAgentRl), (Variant::MultiAgentNoRl, Variant::Marl)] {
        let ck = load_checkpoint(&da.join(trained.label()).join("ckpt-000000")).map_err(|e| e.to_string())?;
        let step0 = evaluate(&ck.plan, &model, &ck.state.params, &scorer, &ds, Split::Test, &cfg.hash())
            .map_err(|e| e.to_string())?
            .relabel(untrained);
        ensure!(&step0 == ab.get(untrained), "{} differs from step-0 {}", untrained.label(), trained.label());
    }
    let (marl, no_rl) = (ab.get(Variant::Marl).mean_total(), ab.get(Variant::MultiAgentNoRl).mean_total());
    ensure!(marl > no_rl, "marl {marl} does not exceed multi_agent_no_rl {no_rl}");
    let _ = fs::remove_dir_all(&da);
    let _ = fs::remove_dir_all(&db);
    let summary: Vec<String> = ab
        .reports
        .iter()
        .map(|r| {
            format!(
                "{} {:.3}/{:.3}",
                r.variant.unwrap().label(),
                r.mean_total(),
                r.mean_laterality()
            )
        })
        .collect();
    Ok(format!("deterministic 4-row CSV; total/laterality: {}", summary.join(", ")))
}
