//! Deterministic synthetic chest-report cases.
//!
//! A latent state fixes one finding per lung and one central finding. The
//! query is the one-hot encoding of that state plus Gaussian noise, and the
//! ground-truth report is rendered from fixed templates. Truth labels and
//! graphs come from the same rule extractors the reward uses.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rewards::{LabelVector, ReportGraph, Scorer};
use crate::textcore::{split_report, Report, TextError, Vocab};
use crate::workflow::{mix_seed, CaseQuery};

pub const DATASET_SCHEMA: &str = "dataset-v1";
/// Length of the query feature vector: 4 + 4 + 3 one-hot slots.
pub const QUERY_DIM: usize = 11;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("dataset i/o")]
    Io(#[from] std::io::Error),
    #[error("stored dataset differs from regeneration at {0}")]
    RegenMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideFinding {
    Clear,
    Effusion,
    Consolidation,
    Pneumothorax,
}

impl SideFinding {
    pub const ALL: [Self; 4] = [Self::Clear, Self::Effusion, Self::Consolidation, Self::Pneumothorax];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralFinding {
    Normal,
    Cardiomegaly,
    WidenedMediastinum,
}

impl CentralFinding {
    pub const ALL: [Self; 3] = [Self::Normal, Self::Cardiomegaly, Self::WidenedMediastinum];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentState {
    pub left: SideFinding,
    pub right: SideFinding,
    pub central: CentralFinding,
}

impl LatentState {
    /// All 48 states.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(48);
        for left in SideFinding::ALL {
            for central in CentralFinding::ALL {
                for right in SideFinding::ALL {
                    out.push(Self { left, right, central });
                }
            }
        }
        out
    }

    pub fn is_benign(&self) -> bool {
        self.left == SideFinding::Clear && self.right == SideFinding::Clear && self.central == CentralFinding::Normal
    }

    /// Noise-free query code: one-hot left, one-hot right, one-hot central.
    pub fn encode(&self) -> [f64; QUERY_DIM] {
        let mut x = [0.0; QUERY_DIM];
        x[self.left as usize] = 1.0;
        x[4 + self.right as usize] = 1.0;
        x[8 + self.central as usize] = 1.0;
        x
    }

    /// Positive labels in schema order.
    pub fn positive_labels(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for finding in [SideFinding::Effusion, SideFinding::Consolidation, SideFinding::Pneumothorax] {
            for (side, f) in [("left", self.left), ("right", self.right)] {
                if f == finding {
                    out.push(side_label(side, finding));
                }
            }
        }
        match self.central {
            CentralFinding::Normal => {}
            CentralFinding::Cardiomegaly => out.push("cardiomegaly"),
            CentralFinding::WidenedMediastinum => out.push("widened_mediastinum"),
        }
        out
    }
}

fn side_label(side: &str, f: SideFinding) -> &'static str {
    match (side, f) {
        ("left", SideFinding::Effusion) => "left_effusion",
        ("right", SideFinding::Effusion) => "right_effusion",
        ("left", SideFinding::Consolidation) => "left_consolidation",
        ("right", SideFinding::Consolidation) => "right_consolidation",
        ("left", SideFinding::Pneumothorax) => "left_pneumothorax",
        ("right", SideFinding::Pneumothorax) => "right_pneumothorax",
        _ => unreachable!("no label for {side} {f:?}"),
    }
}

fn side_sentence(side: &str, f: SideFinding) -> String {
    match f {
        SideFinding::Clear => format!("the {side} lung is clear"),
        SideFinding::Effusion => format!("there is a {side} pleural effusion"),
        SideFinding::Consolidation => format!("the {side} lung shows consolidation"),
        SideFinding::Pneumothorax => format!("there is a {side} pneumothorax"),
    }
}

fn central_sentence(f: CentralFinding) -> &'static str {
    match f {
        CentralFinding::Normal => "the heart size is normal",
        CentralFinding::Cardiomegaly => "the heart is enlarged with cardiomegaly",
        CentralFinding::WidenedMediastinum => "the mediastinum is markedly widened",
    }
}

fn impression_phrase(label: &str) -> &'static str {
    match label {
        "left_effusion" => "left pleural effusion",
        "right_effusion" => "right pleural effusion",
        "left_consolidation" => "left lung consolidation",
        "right_consolidation" => "right lung consolidation",
        "left_pneumothorax" => "left pneumothorax",
        "right_pneumothorax" => "right pneumothorax",
        "cardiomegaly" => "cardiomegaly",
        "widened_mediastinum" => "widened mediastinum",
        other => unreachable!("unknown label {other}"),
    }
}

pub const NO_ACUTE_IMPRESSION: &str = "no acute findings";

/// Findings text (left, central, right sentences) and impression text.
pub fn truth_text(latent: &LatentState) -> (String, String) {
    let findings = [
        side_sentence("left", latent.left),
        central_sentence(latent.central).to_owned(),
        side_sentence("right", latent.right),
    ]
    .join(" ");
    let impression = if latent.is_benign() {
        NO_ACUTE_IMPRESSION.to_owned()
    } else {
        latent
            .positive_labels()
            .into_iter()
            .map(impression_phrase)
            .collect::<Vec<_>>()
            .join(" and ")
    };
    (findings, impression)
}

pub fn render_truth(latent: &LatentState, vocab: &Vocab) -> Result<Report, TextError> {
    let (f, i) = truth_text(latent);
    Ok(Report::new(vocab.encode_words(&f)?, vocab.encode_words(&i)?))
}

/// Generator settings. Each region is benign with `benign_prob`; the other
/// findings share the remaining mass evenly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub noise_sigma: f64,
    pub benign_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            benign_prob: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::Config("noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.benign_prob) {
            return Err(SynthError::Config("benign_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        short_hash(json.as_bytes())
    }

    fn draw_index(&self, rng: &mut ChaCha8Rng, n: usize) -> usize {
        let u: f64 = rng.random();
        if u < self.benign_prob {
            0
        } else {
            let rest = (u - self.benign_prob) / (1.0 - self.benign_prob);
            1 + ((rest * (n - 1) as f64) as usize).min(n - 2)
        }
    }

    pub fn sample_latent(&self, rng: &mut ChaCha8Rng) -> LatentState {
        let left = SideFinding::ALL[self.draw_index(rng, 4)];
        let central = CentralFinding::ALL[self.draw_index(rng, 3)];
        let right = SideFinding::ALL[self.draw_index(rng, 4)];
        LatentState { left, right, central }
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: u64,
    pub latent: LatentState,
    pub query_features: Vec<f64>,
    pub truth_report: Report,
    pub truth_labels: LabelVector,
    pub truth_graph: ReportGraph,
}

impl Case {
    pub fn query(&self) -> CaseQuery<'_> {
        CaseQuery {
            case_id: self.case_id,
            features: &self.query_features,
        }
    }

    fn from_parts(case_id: u64, latent: LatentState, query_features: Vec<f64>, truth_report: Report, scorer: &Scorer) -> Self {
        Self {
            case_id,
            latent,
            query_features,
            truth_labels: scorer.labels(&truth_report),
            truth_graph: scorer.graph(&truth_report),
            truth_report,
        }
    }
}

/// Case `index` of the stream seeded by `seed`.
pub fn generate_case(seed: u64, index: u64, config: &SynthConfig, scorer: &Scorer) -> Result<Case, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, index]));
    let latent = config.sample_latent(&mut rng);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| SynthError::Config(e.to_string()))?;
    let query_features = latent.encode().iter().map(|x| x + noise.sample(&mut rng)).collect();
    let truth = render_truth(&latent, scorer.vocab())?;
    Ok(Case::from_parts(index, latent, query_features, truth, scorer))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 1600,
            val: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseDataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub sizes: SplitSizes,
    pub cases: Vec<(Split, Case)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    seed: u64,
    config_hash: String,
    config: SynthConfig,
    sizes: SplitSizes,
    label_schema: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseLine {
    case_id: u64,
    split: Split,
    latent: LatentState,
    features: Vec<f64>,
    truth_text: String,
    labels: Vec<bool>,
    graph: ReportGraph,
}

impl CaseDataset {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn split(&self, split: Split) -> Vec<&Case> {
        self.cases.iter().filter(|(s, _)| *s == split).map(|(_, c)| c).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W, scorer: &Scorer) -> Result<(), SynthError> {
        let header = DatasetHeader {
            schema: DATASET_SCHEMA.into(),
            seed: self.seed,
            config_hash: self.config_hash(),
            config: self.config,
            sizes: self.sizes,
            label_schema: scorer.rules().schema(),
        };
        let enc = |e: serde_json::Error| SynthError::Format(e.to_string());
        writeln!(out, "{}", serde_json::to_string(&header).map_err(enc)?)?;
        for (split, c) in &self.cases {
            let line = CaseLine {
                case_id: c.case_id,
                split: *split,
                latent: c.latent,
                features: c.query_features.clone(),
                truth_text: c.truth_report.render(scorer.vocab()),
                labels: c.truth_labels.values.clone(),
                graph: c.truth_graph.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&line).map_err(enc)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, scorer: &Scorer) -> Result<Self, SynthError> {
        let mut lines = input.lines();
        let dec = |e: serde_json::Error| SynthError::Format(e.to_string());
        let header: DatasetHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(dec)?,
            None => return Err(SynthError::Format("empty dataset file".into())),
        };
        if header.schema != DATASET_SCHEMA {
            return Err(SynthError::Format(format!("unsupported schema {:?}", header.schema)));
        }
        if header.config.hash() != header.config_hash {
            return Err(SynthError::Format("config hash does not match config".into()));
        }
        let label_schema = scorer.rules().schema();
        if header.label_schema != label_schema {
            return Err(SynthError::Format("label schema differs from the rules".into()));
        }
        let mut cases = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: CaseLine = serde_json::from_str(&line).map_err(dec)?;
            let truth_report = split_report(&c.truth_text, scorer.vocab())?;
            c.graph.validate().map_err(|e| SynthError::Format(e.to_string()))?;
            cases.push((
                c.split,
                Case {
                    case_id: c.case_id,
                    latent: c.latent,
                    query_features: c.features,
                    truth_report,
                    truth_labels: LabelVector {
                        schema: label_schema.clone(),
                        values: c.labels,
                    },
                    truth_graph: c.graph,
                },
            ));
        }
        let ds = Self {
            seed: header.seed,
            config: header.config,
            sizes: header.sizes,
            cases,
        };
        ds.check_splits()?;
        Ok(ds)
    }

    fn check_splits(&self) -> Result<(), SynthError> {
        let mut ids = BTreeSet::new();
        for (_, c) in &self.cases {
            if !ids.insert(c.case_id) {
                return Err(SynthError::Format(format!("case id {} appears twice", c.case_id)));
            }
        }
        Ok(())
    }

    /// Compare against a fresh regeneration from the recorded seed and config.
    pub fn verify_regeneration(&self, scorer: &Scorer) -> Result<(), SynthError> {
        let fresh = build_dataset(self.seed, self.sizes, &self.config, scorer)?;
        if fresh.cases.len() != self.cases.len() {
            return Err(SynthError::RegenMismatch("case count".into()));
        }
        for ((sa, a), (sb, b)) in self.cases.iter().zip(&fresh.cases) {
            if sa != sb || a != b {
                return Err(SynthError::RegenMismatch(format!("case {}", a.case_id)));
            }
        }
        Ok(())
    }
}

/// Cases `0..train` are train, then val, then test.
pub fn build_dataset(seed: u64, sizes: SplitSizes, config: &SynthConfig, scorer: &Scorer) -> Result<CaseDataset, SynthError> {
    config.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(SynthError::Config("every split needs at least one case".into()));
    }
    let mut cases = Vec::with_capacity(sizes.train + sizes.val + sizes.test);
    let plan = [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)];
    let mut index = 0u64;
    for (split, n) in plan {
        for _ in 0..n {
            cases.push((split, generate_case(seed, index, config, scorer)?));
            index += 1;
        }
    }
    Ok(CaseDataset {
        seed,
        config: *config,
        sizes,
        cases,
    })
}
