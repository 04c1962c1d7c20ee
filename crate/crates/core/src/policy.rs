//! Log-linear autoregressive token policy.
//!
//! Each agent scores the next token with `softmax(phi(context, prefix) . W / T)`
//! where `phi` is a sparse, hand-built feature vector and `W` is an `F x V`
//! weight matrix stored row-major by feature. Because the family is
//! log-linear, the score function `grad log pi` is available in closed form.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::textcore::{TokenId, TokenSequence, Vocab};
use crate::workflow::{AgentContext, PromptToken, Role};

pub const CONTEXT_WINDOW: usize = 4;
pub const POSITION_BUCKETS: usize = 8;
pub const QUERY_BUCKETS: u8 = 16;
const CHECKPOINT_MAGIC: &str = "magspo-policy v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite logit at step {step} (weights diverged)")]
    NonFiniteLogit { step: usize },
    #[error("parameter dimension {got} does not match feature map {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite weight at index {0}")]
    NonFiniteWeight(usize),
    #[error("prefix is already terminated")]
    PrefixTerminated,
    #[error("sequence is not terminated")]
    NotTerminated,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o")]
    Io(#[from] std::io::Error),
}

/// Quantize a raw query feature onto one of [`QUERY_BUCKETS`] prompt tokens.
/// The bucket grid spans `[-0.5, 1.5]`, covering one-hot codes plus noise.
pub fn quantize_query(x: f64) -> u8 {
    let scaled = (x + 0.5) / 2.0 * f64::from(QUERY_BUCKETS);
    if scaled.is_nan() {
        return QUERY_BUCKETS / 2;
    }
    scaled.floor().clamp(0.0, f64::from(QUERY_BUCKETS - 1)) as u8
}

/// Feature value of a query bucket, centred into `[-1, 1]`.
pub fn bucket_value(bucket: u8) -> f64 {
    (f64::from(bucket) + 0.5) / (f64::from(QUERY_BUCKETS) / 2.0) - 1.0
}

fn position_bucket(t: usize) -> usize {
    match t {
        0..=3 => t,
        4..=7 => 4,
        8..=15 => 5,
        16..=31 => 6,
        _ => 7,
    }
}

/// Layout of the sparse feature vector.
///
/// Blocks, in order: bias; position bucket; token at each of the last
/// [`CONTEXT_WINDOW`] prefix positions (with a start-of-output slot);
/// query values; query values crossed with the previous token; bag of words
/// seen in predecessor outputs; agent role crossed with the previous token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    vocab_size: usize,
    query_dim: usize,
}

impl FeatureMap {
    pub fn new(vocab_size: usize, query_dim: usize) -> Self {
        Self {
            vocab_size,
            query_dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    /// Previous-token slots: every vocab id plus "start of output".
    fn slots(&self) -> usize {
        self.vocab_size + 1
    }

    fn pos_offset(&self) -> usize {
        1
    }
    fn window_offset(&self) -> usize {
        self.pos_offset() + POSITION_BUCKETS
    }
    fn query_offset(&self) -> usize {
        self.window_offset() + CONTEXT_WINDOW * self.slots()
    }
    fn query_cross_offset(&self) -> usize {
        self.query_offset() + self.query_dim
    }
    fn bag_offset(&self) -> usize {
        self.query_cross_offset() + self.query_dim * self.slots()
    }
    fn role_cross_offset(&self) -> usize {
        self.bag_offset() + self.vocab_size
    }

    /// Feature dimension `F`.
    pub fn dim(&self) -> usize {
        self.role_cross_offset() + Role::ALL.len() * self.slots()
    }

    /// Number of weights `F * V`.
    pub fn weight_len(&self) -> usize {
        self.dim() * self.vocab_size
    }

    /// The prefix-independent part of the features, read off the prompt.
    pub fn summarize(&self, ctx: &AgentContext) -> PromptSummary {
        let mut role = None;
        let mut query = Vec::with_capacity(self.query_dim);
        let mut seen = vec![false; self.vocab_size];
        for tok in &ctx.prompt_tokens {
            match *tok {
                PromptToken::Role(r) => role = role.or(Some(r.index())),
                PromptToken::Query(b) => {
                    if query.len() < self.query_dim {
                        query.push(bucket_value(b));
                    }
                }
                PromptToken::Tag(_) => {}
                PromptToken::Word(w) => {
                    if let Some(s) = seen.get_mut(w as usize) {
                        *s = true;
                    }
                }
            }
        }
        query.resize(self.query_dim, 0.0);
        let bag = seen
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect();
        PromptSummary { role, query, bag }
    }

    /// Active `(feature index, value)` pairs for the token at position `t`
    /// given the already generated `prefix[..t]`.
    pub fn active(&self, summary: &PromptSummary, prefix: &[TokenId], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let t = prefix.len();
        let slots = self.slots();
        let start = self.vocab_size;
        let prev = |j: usize| -> usize {
            if t >= j {
                prefix[t - j] as usize
            } else {
                start
            }
        };
        out.push((0, 1.0));
        out.push((self.pos_offset() + position_bucket(t), 1.0));
        for j in 1..=CONTEXT_WINDOW {
            out.push((self.window_offset() + (j - 1) * slots + prev(j), 1.0));
        }
        let last = prev(1);
        for (d, &q) in summary.query.iter().enumerate() {
            out.push((self.query_offset() + d, q));
            out.push((self.query_cross_offset() + d * slots + last, q));
        }
        for &w in &summary.bag {
            out.push((self.bag_offset() + w, 1.0));
        }
        if let Some(r) = summary.role {
            out.push((self.role_cross_offset() + r * slots + last, 1.0));
        }
    }
}

/// Prompt-derived features shared by every step of one agent's generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSummary {
    pub role: Option<usize>,
    pub query: Vec<f64>,
    pub bag: Vec<usize>,
}

/// Weights of one agent's policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    weights: Vec<f64>,
    features: usize,
    vocab_size: usize,
}

impl PolicyParameters {
    /// All-zero weights: the uniform policy.
    pub fn zeros(fmap: &FeatureMap) -> Self {
        Self {
            weights: vec![0.0; fmap.weight_len()],
            features: fmap.dim(),
            vocab_size: fmap.vocab_size(),
        }
    }

    pub fn from_weights(features: usize, vocab_size: usize, weights: Vec<f64>) -> Result<Self, PolicyError> {
        if weights.len() != features * vocab_size {
            return Err(PolicyError::DimensionMismatch {
                expected: features * vocab_size,
                got: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(PolicyError::NonFiniteWeight(i));
        }
        Ok(Self {
            weights,
            features,
            vocab_size,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Header line followed by little-endian `f64` weights.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), PolicyError> {
        writeln!(out, "{CHECKPOINT_MAGIC} F={} V={}", self.features, self.vocab_size)?;
        let mut buf = Vec::with_capacity(self.weights.len() * 8);
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, PolicyError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PolicyError::Checkpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| PolicyError::Checkpoint("header is not UTF-8".into()))?;
        let rest = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| PolicyError::Checkpoint(format!("bad magic in {header:?}")))?;
        let mut features = None;
        let mut vocab = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("F", v)) => features = v.parse::<usize>().ok(),
                Some(("V", v)) => vocab = v.parse::<usize>().ok(),
                _ => return Err(PolicyError::Checkpoint(format!("bad header field {field:?}"))),
            }
        }
        let (features, vocab) = features
            .zip(vocab)
            .ok_or_else(|| PolicyError::Checkpoint("header needs F= and V=".into()))?;
        let body = &bytes[nl + 1..];
        if body.len() != features * vocab * 8 {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} weight bytes, found {}",
                features * vocab * 8,
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_weights(features, vocab, weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

/// Frozen copy of an agent's parameters taken before a round of rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot(PolicyParameters);

impl PolicySnapshot {
    pub fn of(params: &PolicyParameters) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParameters {
        &self.0
    }
}

/// A generated sequence with the per-token log-probabilities it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub seq: TokenSequence,
    pub logprobs: Vec<f64>,
}

impl SampledSequence {
    pub fn logprob_sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// How the next token is chosen during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Sample { seed: u64 },
    /// Highest-probability token; ties go to the lowest id.
    Greedy,
}

/// A feature map together with the terminator and length cap it generates under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyModel {
    fmap: FeatureMap,
    eos: TokenId,
    max_len: usize,
}

impl PolicyModel {
    pub fn new(vocab: &Vocab, query_dim: usize) -> Self {
        Self {
            fmap: FeatureMap::new(vocab.len(), query_dim),
            eos: vocab.eos_id(),
            max_len: vocab.max_len(),
        }
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.fmap
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn init_params(&self) -> PolicyParameters {
        PolicyParameters::zeros(&self.fmap)
    }

    fn check(&self, params: &PolicyParameters) -> Result<(), PolicyError> {
        if params.len() != self.fmap.weight_len() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.fmap.weight_len(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Log-probabilities of every token into `logp`, using the active features
    /// already in `active`.
    fn log_distribution(
        &self,
        weights: &[f64],
        active: &[(usize, f64)],
        temperature: f64,
        step: usize,
        logp: &mut [f64],
    ) -> Result<(), PolicyError> {
        let v = self.fmap.vocab_size();
        logp.fill(0.0);
        for &(f, x) in active {
            let row = &weights[f * v..(f + 1) * v];
            for (l, w) in logp.iter_mut().zip(row) {
                *l += x * w;
            }
        }
        let inv_t = 1.0 / temperature;
        let mut max = f64::NEG_INFINITY;
        for l in logp.iter_mut() {
            *l *= inv_t;
            if !l.is_finite() {
                return Err(PolicyError::NonFiniteLogit { step });
            }
            max = max.max(*l);
        }
        let sum: f64 = logp.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        for l in logp.iter_mut() {
            *l -= lse;
        }
        Ok(())
    }

    /// Next-token distribution `pi(. | context, prefix)`.
    pub fn token_distribution(
        &self,
        params: &PolicyParameters,
        ctx: &AgentContext,
        prefix: &TokenSequence,
        temperature: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        self.check(params)?;
        if prefix.is_terminated() {
            return Err(PolicyError::PrefixTerminated);
        }
        let summary = self.fmap.summarize(ctx);
        let mut active = Vec::new();
        self.fmap.active(&summary, prefix.ids(), &mut active);
        let mut logp = vec![0.0; self.fmap.vocab_size()];
        self.log_distribution(params.weights(), &active, temperature, prefix.len(), &mut logp)?;
        Ok(logp.into_iter().map(f64::exp).collect())
    }

    /// Draw (or greedily decode) one sequence under `params`.
    pub fn generate(
        &self,
        params: &PolicyParameters,
        ctx: &AgentContext,
        temperature: f64,
        decoding: Decoding,
    ) -> Result<SampledSequence, PolicyError> {
        self.check(params)?;
        let summary = self.fmap.summarize(ctx);
        let mut rng = match decoding {
            Decoding::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut active = Vec::new();
        let mut logp = vec![0.0; self.fmap.vocab_size()];
        let mut ids = Vec::with_capacity(self.max_len);
        let mut logprobs = Vec::with_capacity(self.max_len);
        while ids.len() < self.max_len {
            self.fmap.active(&summary, &ids, &mut active);
            self.log_distribution(params.weights(), &active, temperature, ids.len(), &mut logp)?;
            let tok = match rng.as_mut() {
                Some(rng) => draw(&logp, rng.random::<f64>()),
                None => argmax(&logp),
            };
            ids.push(tok as TokenId);
            logprobs.push(logp[tok]);
            if tok as TokenId == self.eos {
                break;
            }
        }
        Ok(SampledSequence {
            seq: TokenSequence::from_parts(ids, true),
            logprobs,
        })
    }

    /// Sample from a frozen snapshot; deterministic in `seed`.
    pub fn sample_sequence(
        &self,
        snapshot: &PolicySnapshot,
        ctx: &AgentContext,
        temperature: f64,
        seed: u64,
    ) -> Result<SampledSequence, PolicyError> {
        self.generate(snapshot.params(), ctx, temperature, Decoding::Sample { seed })
    }

    /// `log pi(seq | context)`: the sum of per-step log-probabilities.
    pub fn sequence_logprob(
        &self,
        params: &PolicyParameters,
        ctx: &AgentContext,
        seq: &TokenSequence,
        temperature: f64,
    ) -> Result<f64, PolicyError> {
        self.walk(params, ctx, seq, temperature, None)
    }

    /// Exact score function `grad_W log pi(seq | context)`.
    pub fn grad_sequence_logprob(
        &self,
        params: &PolicyParameters,
        ctx: &AgentContext,
        seq: &TokenSequence,
        temperature: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; params.len()];
        self.walk(params, ctx, seq, temperature, Some((1.0, &mut grad)))?;
        Ok(grad)
    }

    /// Add `coef * grad log pi(seq | context)` into `grad`; returns the log-probability.
    pub fn accumulate_grad_logprob(
        &self,
        params: &PolicyParameters,
        ctx: &AgentContext,
        seq: &TokenSequence,
        temperature: f64,
        coef: f64,
        grad: &mut [f64],
    ) -> Result<f64, PolicyError> {
        if grad.len() != params.len() {
            return Err(PolicyError::DimensionMismatch {
                expected: params.len(),
                got: grad.len(),
            });
        }
        self.walk(params, ctx, seq, temperature, Some((coef, grad)))
    }

    fn walk(
        &self,
        params: &PolicyParameters,
        ctx: &AgentContext,
        seq: &TokenSequence,
        temperature: f64,
        mut grad: Option<(f64, &mut [f64])>,
    ) -> Result<f64, PolicyError> {
        self.check(params)?;
        if !seq.is_terminated() {
            return Err(PolicyError::NotTerminated);
        }
        let v = self.fmap.vocab_size();
        let summary = self.fmap.summarize(ctx);
        let mut active = Vec::new();
        let mut logp = vec![0.0; v];
        let mut probs = vec![0.0; v];
        let mut total = 0.0;
        let ids = seq.ids();
        for t in 0..ids.len() {
            self.fmap.active(&summary, &ids[..t], &mut active);
            self.log_distribution(params.weights(), &active, temperature, t, &mut logp)?;
            let tok = ids[t] as usize;
            total += logp[tok];
            if let Some((coef, g)) = grad.as_mut() {
                // d log pi(tok) / d W[f, u] = x_f * (1[u = tok] - pi(u)) / T
                let scale = *coef / temperature;
                for (p, lp) in probs.iter_mut().zip(&logp) {
                    *p = lp.exp();
                }
                for &(f, x) in &active {
                    let sx = scale * x;
                    let row = &mut g[f * v..(f + 1) * v];
                    for (gu, p) in row.iter_mut().zip(&probs) {
                        *gu -= sx * p;
                    }
                    row[tok] += sx;
                }
            }
        }
        Ok(total)
    }
}

/// Inverse-CDF draw from log-probabilities.
fn draw(logp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

fn argmax(logp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &lp) in logp.iter().enumerate() {
        if lp > logp[best] {
            best = i;
        }
    }
    best
}
