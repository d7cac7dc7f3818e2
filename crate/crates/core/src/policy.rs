//! First-order autoregressive categorical policy.
//!
//! The parameters are a `V x V` table of logits: row `c` is the softmax
//! logit vector of the next token given previous token `c`. The context of
//! the first generated token is the last token of the prompt (or the
//! begin-of-sequence marker for an empty prompt). Log-probabilities and
//! their gradients are exact, which is what the SFT and GRPO checks rely on.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MAX_VOCAB: usize = 4096;
pub const CHECKPOINT_VERSION: u32 = 1;

pub type TokenId = usize;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("parameter table has {got} entries, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, PolicyError> {
        if tokens.is_empty() || tokens.len() > MAX_VOCAB {
            return Err(PolicyError::InvalidVocab(format!(
                "size {} outside 1..={MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(PolicyError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let marker = |m: &str| {
            index
                .get(m)
                .copied()
                .ok_or_else(|| PolicyError::InvalidVocab(format!("missing marker {m}")))
        };
        let (bos, eos) = (marker(BOS)?, marker(EOS)?);
        Ok(Self {
            tokens,
            index,
            bos,
            eos,
        })
    }

    /// Vocabulary of `<s>`, `</s>` followed by `symbols`.
    pub fn with_markers<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self, PolicyError> {
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend(symbols.into_iter().map(Into::into));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, PolicyError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| PolicyError::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    /// Concatenates token strings, skipping the sequence markers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i != self.bos && i != self.eos)
            .filter_map(|&i| self.token(i))
            .collect()
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Arc<Vocab>,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(vocab: Arc<Vocab>) -> Self {
        let v = vocab.len();
        Self {
            vocab,
            logits: vec![0.0; v * v],
        }
    }

    pub fn from_logits(vocab: Arc<Vocab>, logits: Vec<f64>) -> Result<Self, PolicyError> {
        let expected = vocab.len() * vocab.len();
        if logits.len() != expected {
            return Err(PolicyError::ShapeMismatch {
                expected,
                got: logits.len(),
            });
        }
        Ok(Self { vocab, logits })
    }

    /// Builds a policy from explicit conditional probability rows. Zero
    /// probabilities become `-inf` logits.
    pub fn from_probabilities(vocab: Arc<Vocab>, rows: &[Vec<f64>]) -> Result<Self, PolicyError> {
        let logits: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        Self::from_logits(vocab, logits)
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, ctx: TokenId) -> &[f64] {
        let v = self.vocab_size();
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    pub fn log_probs(&self, ctx: TokenId) -> Vec<f64> {
        log_softmax(self.row(ctx))
    }

    pub fn probs(&self, ctx: TokenId) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    fn check(&self, ids: &[TokenId]) -> Result<(), PolicyError> {
        match ids.iter().find(|&&t| t >= self.vocab_size()) {
            Some(t) => Err(PolicyError::UnknownToken(format!("id {t}"))),
            None => Ok(()),
        }
    }

    /// Context of the first target token.
    pub fn start_context(&self, x: &[TokenId]) -> TokenId {
        x.last().copied().unwrap_or(self.vocab.bos())
    }

    /// `(context, target)` for every step of `y` after prompt `x`.
    pub fn steps<'a>(&self, x: &[TokenId], y: &'a [TokenId]) -> impl Iterator<Item = (TokenId, TokenId)> + 'a {
        let start = self.start_context(x);
        y.iter()
            .scan(start, |ctx, &t| Some((std::mem::replace(ctx, t), t)))
    }

    /// `Σ_t log P(y_t | context)` in nats.
    pub fn log_prob(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64, PolicyError> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.steps(x, y).map(|(c, t)| self.log_probs(c)[t]).sum())
    }

    /// Adds `scale * ∇θ log π(y|x)` into `grad`.
    pub fn accumulate_grad_log_prob(&self, x: &[TokenId], y: &[TokenId], scale: f64, grad: &mut [f64]) {
        let v = self.vocab_size();
        for (c, t) in self.steps(x, y) {
            let p = self.probs(c);
            let row = &mut grad[c * v..(c + 1) * v];
            for (g, pk) in row.iter_mut().zip(&p) {
                *g -= scale * pk;
            }
            row[t] += scale;
        }
    }

    /// Ancestral sampling until the end marker (inclusive) or `max_len`
    /// tokens. Returns per-step log-probabilities alongside the tokens.
    pub fn sample(&self, x: &[TokenId], max_len: usize, rng: &mut impl Rng) -> Sample {
        let mut ctx = self.start_context(x);
        let mut tokens = Vec::with_capacity(max_len);
        let mut logps = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let lp = self.log_probs(ctx);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (k, l) in lp.iter().enumerate() {
                let p = l.exp();
                if p > 0.0 {
                    acc += p;
                    pick = Some(k);
                    if u < acc {
                        break;
                    }
                }
            }
            let t = pick.expect("row has positive mass");
            tokens.push(t);
            logps.push(lp[t]);
            if t == self.vocab.eos() {
                break;
            }
            ctx = t;
        }
        Sample { tokens, logps }
    }

    pub fn sample_seeded(&self, x: &[TokenId], max_len: usize, seed: u64) -> Sample {
        self.sample(x, max_len, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(&self, x: &[TokenId], max_len: usize) -> Vec<TokenId> {
        let mut ctx = self.start_context(x);
        let mut out = Vec::new();
        while out.len() < max_len {
            let row = self.row(ctx);
            let t = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            out.push(t);
            if t == self.vocab.eos() {
                break;
            }
            ctx = t;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        if self.logits.iter().any(|l| !l.is_finite()) {
            return Err(PolicyError::Checkpoint("non-finite logits cannot be stored".into()));
        }
        let v = self.vocab_size();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: self.vocab.tokens().to_vec(),
            logits: self.logits.chunks(v).map(<[f64]>::to_vec).collect(),
        };
        let json = serde_json::to_string(&ckpt).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let raw = fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&raw).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let vocab = Arc::new(Vocab::new(ckpt.vocab)?);
        Self::from_logits(vocab, ckpt.logits.into_iter().flatten().collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    vocab: Vec<String>,
    logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub logps: Vec<f64>,
}

impl Sample {
    pub fn total_logp(&self) -> f64 {
        self.logps.iter().sum()
    }
}

/// `(prompt, target)` token sequences.
pub type Pair = (Vec<TokenId>, Vec<TokenId>);

/// Cross-entropy `-Σ_(x,y) Σ_t log P(y_t | x, y_<t)` and its exact gradient.
pub fn sft_loss(policy: &ToyPolicy, data: &[Pair]) -> Result<(f64, Vec<f64>), PolicyError> {
    sft_loss_refs(policy, data.iter())
}

fn sft_loss_refs<'a>(
    policy: &ToyPolicy,
    data: impl IntoIterator<Item = &'a Pair>,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let mut grad = vec![0.0; policy.logits.len()];
    let mut loss = 0.0;
    let mut any = false;
    for (x, y) in data {
        any = true;
        loss -= policy.log_prob(x, y)?;
        policy.accumulate_grad_log_prob(x, y, -1.0, &mut grad);
    }
    if !any {
        return Err(PolicyError::EmptyDataset);
    }
    Ok((loss, grad))
}

/// Mean per-target-token cross-entropy in nats.
pub fn mean_token_loss(policy: &ToyPolicy, data: &[Pair]) -> Result<f64, PolicyError> {
    let tokens: usize = data.iter().map(|(_, y)| y.len()).sum();
    if tokens == 0 {
        return Err(PolicyError::EmptyDataset);
    }
    let (loss, _) = sft_loss(policy, data)?;
    Ok(loss / tokens as f64)
}

/// An `(input, output)` text example as stored in JSONL datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub input: String,
    pub output: String,
}

/// Markers plus every token of the given texts, in sorted order.
pub fn vocab_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab, PolicyError> {
    let symbols: BTreeSet<&str> = texts.into_iter().flat_map(tokenize).collect();
    Vocab::with_markers(symbols.into_iter().filter(|t| *t != BOS && *t != EOS))
}

/// Tokenizes and encodes pairs: the prompt keeps its last `max_input`
/// tokens, the target its first `max_output` tokens followed by `</s>`.
pub fn encode_text_pairs(
    vocab: &Vocab,
    pairs: &[TextPair],
    max_input: usize,
    max_output: usize,
) -> Result<Vec<Pair>, PolicyError> {
    pairs
        .iter()
        .map(|p| {
            let x = tokenize(&p.input);
            let x = &x[x.len().saturating_sub(max_input)..];
            let y = tokenize(&p.output);
            let y = &y[..y.len().min(max_output)];
            let mut y = vocab.encode(y)?;
            y.push(vocab.eos());
            Ok((vocab.encode(x)?, y))
        })
        .collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Per-step training curve: mean per-token loss (nats) and gradient norm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.grad_norm));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub lr: f64,
    pub grad_accum: usize,
    /// Pairs per micro-batch; 0 means the whole dataset.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.5,
            grad_accum: 4,
            batch_size: 2,
            seed: 0,
        }
    }
}

/// Gradient descent on the per-pair mean of the cross-entropy. Each step
/// averages the gradients of `grad_accum` micro-batches drawn from a seeded
/// reshuffled stream over the dataset. The logged loss is the mean
/// per-token loss of the data seen in that step, before the update.
pub fn train_sft(policy: &mut ToyPolicy, data: &[Pair], cfg: &SftConfig) -> Result<TrainLog, PolicyError> {
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    if cfg.steps == 0 || cfg.grad_accum == 0 {
        return Err(PolicyError::InvalidConfig("steps and grad_accum must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(PolicyError::InvalidConfig("lr must be finite and non-negative".into()));
    }
    let batch = if cfg.batch_size == 0 {
        data.len()
    } else {
        cfg.batch_size.min(data.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut grad = vec![0.0; policy.logits.len()];
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for _ in 0..cfg.grad_accum {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    if batch < data.len() {
                        order.shuffle(&mut rng);
                    }
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let (loss, g) = sft_loss_refs(policy, idx.iter().map(|&i| &data[i]))?;
            let scale = 1.0 / (batch * cfg.grad_accum) as f64;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += scale * b;
            }
            loss_sum += loss;
            tokens += idx.iter().map(|&i| data[i].1.len()).sum::<usize>();
        }
        let loss = if tokens == 0 { 0.0 } else { loss_sum / tokens as f64 };
        let grad_norm = l2_norm(&grad);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(PolicyError::DivergenceDetected { step });
        }
        for (p, g) in policy.logits.iter_mut().zip(&grad) {
            *p -= cfg.lr * g;
        }
        log.rows.push(LogRow {
            step,
            loss,
            grad_norm,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Arc<Vocab> {
        Arc::new(Vocab::with_markers((0..n - 2).map(|i| format!("t{i}"))).unwrap())
    }

    #[test]
    fn uniform_log_prob_closed_form() {
        let p = ToyPolicy::uniform(vocab(64));
        let lp = p.log_prob(&[0], &[3, 4, 5]).unwrap();
        assert!((lp - (-3.0 * 64f64.ln())).abs() < 1e-12);
        assert!((lp + 12.4766).abs() < 1e-4);
    }

    #[test]
    fn certain_policy_has_zero_log_prob() {
        let v = vocab(4);
        let mut rows = vec![vec![0.0; 4]; 4];
        rows[0][2] = 1.0;
        rows[2][3] = 1.0;
        rows[3][1] = 1.0;
        rows[1][1] = 1.0;
        let p = ToyPolicy::from_probabilities(v, &rows).unwrap();
        assert_eq!(p.log_prob(&[0], &[2, 3, 1]).unwrap(), 0.0);
    }

    #[test]
    fn unknown_token() {
        let v = vocab(4);
        let p = ToyPolicy::uniform(v.clone());
        assert!(matches!(p.log_prob(&[0], &[7]), Err(PolicyError::UnknownToken(_))));
        assert!(matches!(v.encode(&["t0", "zz"]), Err(PolicyError::UnknownToken(t)) if t == "zz"));
    }

    #[test]
    fn vocab_requires_markers_and_distinct() {
        assert!(Vocab::new(vec!["a".into(), EOS.into()]).is_err());
        assert!(Vocab::with_markers(["a", "a"]).is_err());
        assert!(Vocab::with_markers((0..MAX_VOCAB).map(|i| i.to_string())).is_err());
    }

    #[test]
    fn uniform_sft_loss_is_t_ln_v() {
        let p = ToyPolicy::uniform(vocab(16));
        let data = vec![(vec![0], vec![2, 3, 4, 5, 1])];
        let (loss, _) = sft_loss(&p, &data).unwrap();
        assert_eq!(loss, 5.0 * 16f64.ln());
    }

    #[test]
    fn memorized_pair_zero_loss_and_gradient() {
        let v = vocab(4);
        let mut rows = vec![vec![0.25; 4]; 4];
        rows[0] = vec![0.0, 0.0, 1.0, 0.0];
        rows[2] = vec![0.0, 1.0, 0.0, 0.0];
        let p = ToyPolicy::from_probabilities(v, &rows).unwrap();
        let (loss, grad) = sft_loss(&p, &[(vec![0], vec![2, 1])]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_dataset() {
        let p = ToyPolicy::uniform(vocab(4));
        assert!(matches!(sft_loss(&p, &[]), Err(PolicyError::EmptyDataset)));
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let mut p = ToyPolicy::uniform(vocab(8));
        let data = vec![(vec![0], vec![2, 3, 1]), (vec![0], vec![4, 1])];
        let cfg = SftConfig {
            steps: 5,
            lr: 0.0,
            grad_accum: 2,
            batch_size: 0,
            seed: 1,
        };
        let log = train_sft(&mut p, &data, &cfg).unwrap();
        let first = log.rows[0].loss;
        assert!(log.losses().all(|l| l == first));
    }

    #[test]
    fn sampling_matches_log_prob() {
        let mut p = ToyPolicy::uniform(vocab(8));
        for (i, l) in p.logits_mut().iter_mut().enumerate() {
            *l = ((i * 37) % 11) as f64 * 0.3;
        }
        for seed in 0..20 {
            let s = p.sample_seeded(&[0], 10, seed);
            let lp = p.log_prob(&[0], &s.tokens).unwrap();
            assert!((lp - s.total_logp()).abs() < 1e-12);
            assert_eq!(s, p.sample_seeded(&[0], 10, seed));
        }
    }

    #[test]
    fn one_hot_policy_samples_unique_sequence() {
        let v = vocab(5);
        let mut rows = vec![vec![0.0; 5]; 5];
        rows[0][3] = 1.0;
        rows[3][4] = 1.0;
        rows[4][2] = 1.0;
        rows[2][1] = 1.0;
        rows[1][1] = 1.0;
        let p = ToyPolicy::from_probabilities(v, &rows).unwrap();
        for seed in 0..10 {
            assert_eq!(p.sample_seeded(&[], 10, seed).tokens, vec![3, 4, 2, 1]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = ToyPolicy::uniform(vocab(6));
        p.logits_mut()[7] = 1.25;
        p.save(&path).unwrap();
        assert_eq!(ToyPolicy::load(&path).unwrap(), p);
        p.logits_mut()[0] = f64::NEG_INFINITY;
        assert!(matches!(p.save(&path), Err(PolicyError::Checkpoint(_))));
    }

    #[test]
    fn decode_skips_markers() {
        let v = Vocab::with_markers(["申请人：", "张三"]).unwrap();
        assert_eq!(v.decode(&[0, 2, 3, 1]), "申请人：张三");
    }
}
