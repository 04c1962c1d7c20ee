//! Command-line front end: data generation, training, evaluation, the
//! laterality table, the ablation harness and learning-curve plots.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use marlrad::evalanalysis::{ablation_run, evaluate, greedy_reports, laterality_table};
use marlrad::policy::PolicyModel;
use marlrad::rewards::Scorer;
use marlrad::synthenv::{build_dataset, CaseDataset, Split, SplitSizes, SynthConfig, QUERY_DIM};
use marlrad::trainer::{load_checkpoint, train_loop_with, LoopControl, TrainConfig, METRICS_HEADER_TAG};
use marlrad::workflow::WorkflowPlan;

const DATASET_FILE: &str = "cases.jsonl";

#[derive(Parser)]
#[command(name = "marlrad", version, about = "Multi-agent RL for structured report generation on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and verify that it regenerates exactly.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1600)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a plan, writing metrics.csv and checkpoints under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "reference")]
        plan: String,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint; writes an eval JSON-lines file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token laterality F1 table for a checkpoint on the test split.
    Laterality {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a metrics CSV as an SVG learning curve.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "message": error_message(&e),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

/// Joins the cause chain, skipping causes already spelled out by their parent.
fn error_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !prev.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
        prev = text;
    }
    msg
}

fn load_dataset(dir: &Path, scorer: &Scorer) -> Result<CaseDataset> {
    let path = dir.join(DATASET_FILE);
    let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(CaseDataset::read_jsonl(BufReader::new(f), scorer)?)
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::parse(&text)?)
}

fn run(cmd: Command) -> Result<()> {
    let scorer = Scorer::synthetic();
    let model = PolicyModel::new(scorer.vocab(), QUERY_DIM);
    match cmd {
        Command::GenData {
            seed,
            train,
            val,
            test,
            out,
        } => {
            let sizes = SplitSizes { train, val, test };
            let ds = build_dataset(seed, sizes, &SynthConfig::default(), &scorer)?;
            fs::create_dir_all(&out)?;
            let path = out.join(DATASET_FILE);
            ds.write_jsonl(BufWriter::new(fs::File::create(&path)?), &scorer)?;
            let back = load_dataset(&out, &scorer)?;
            back.verify_regeneration(&scorer).context("dataset does not regenerate from its header")?;
            println!("wrote {} cases to {}", back.cases.len(), path.display());
        }
        Command::Train {
            config,
            data,
            out,
            plan,
            resume,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, &scorer)?;
            let Some(plan) = WorkflowPlan::by_name(&plan) else {
                bail!("unknown plan {plan:?} (expected reference or single)");
            };
            let control = LoopControl {
                resume,
                halt_after: None,
            };
            let outcome = train_loop_with(&plan, &model, &scorer, &ds, &cfg, &out, control)?;
            if let Some(m) = outcome.metrics.last() {
                println!("step {} mean_reward {:.4}", m.step, m.mean_reward);
            }
            println!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let ds = load_dataset(&data, &scorer)?;
            let Some(split) = Split::parse(&split) else {
                bail!("unknown split {split:?}");
            };
            let rep = evaluate(&ck.plan, &model, &ck.state.params, &scorer, &ds, split, &ck.config_hash)?;
            rep.write_jsonl(BufWriter::new(fs::File::create(&out)?))?;
            println!(
                "{} cases mean_total {:.4} mean_laterality_f1 {:.4}",
                rep.case_count,
                rep.mean_total(),
                rep.mean_laterality()
            );
        }
        Command::Laterality { checkpoint, data, out } => {
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let ds = load_dataset(&data, &scorer)?;
            let cases = ds.split(Split::Test);
            let preds = greedy_reports(&ck.plan, &model, &ck.state.params, &scorer, &cases)?;
            let table = laterality_table(&preds, &cases, &scorer)?;
            fs::write(&out, table.to_csv())?;
            print!("{}", table.to_csv());
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, &scorer)?;
            let ab = ablation_run(&ds, &cfg, &model, &scorer, &out)?;
            print!("{}", ab.to_csv());
        }
        Command::Plot { metrics, out } => {
            let text = fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            fs::write(&out, plot_svg(&text)?)?;
        }
    }
    Ok(())
}

/// Line chart of every reward column against step.
fn plot_svg(csv: &str) -> Result<String> {
    let mut lines = csv.lines();
    if lines.next() != Some(METRICS_HEADER_TAG) {
        bail!("not a metrics file (missing {METRICS_HEADER_TAG:?})");
    }
    let header: Vec<&str> = lines.next().context("missing column header")?.split(',').collect();
    let wanted = ["mean_reward", "mean_rouge_l", "mean_label_acc", "mean_graph_f1"];
    let cols: Vec<usize> = wanted
        .iter()
        .map(|w| header.iter().position(|h| h == w).with_context(|| format!("missing column {w}")))
        .collect::<Result<_>>()?;
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let step: f64 = f[0].parse().context("bad step")?;
        let vals = cols
            .iter()
            .map(|&c| f.get(c).and_then(|v| v.parse().ok()).context("bad value"))
            .collect::<Result<_>>()?;
        rows.push((step, vals));
    }
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let max_step = rows.last().map_or(1.0, |r| r.0.max(1.0));
    let y_max = 3.0;
    let x = |s: f64| pad + (w - 2.0 * pad) * s / max_step;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v / y_max).clamp(0.0, 1.0);
    let colors = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{r}\" y=\"{tb}\" text-anchor=\"end\">step {max_step}</text>\n\
         <text x=\"4\" y=\"{pad}\">{y_max}</text>\n",
        b = h - pad,
        r = w - pad,
        tb = h - pad + 16.0,
    );
    for (i, name) in wanted.iter().enumerate() {
        let pts: Vec<String> = rows.iter().map(|(s, v)| format!("{:.2},{:.2}", x(*s), y(v[i]))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            colors[i],
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{name}</text>\n",
            pad + 8.0,
            pad + 14.0 * i as f64,
            colors[i]
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
