//! The toy autoregressive policy: a k-gram log-linear categorical model.
//!
//! For a next token j given the last k tokens c_1..c_k (c_1 = the token
//! immediately before the prediction point), the logit is
//!
//! ```text
//! logit(j) = bias[j] + Σ_i ctx[i][c_i][j]
//! ```
//!
//! with exact softmax normalization. Positions that look back past the start
//! of the sequence see BOS. The model is small enough that every gradient is
//! hand-derivable and checkable against finite differences, which is what
//! the training stack's oracles rely on.
//!
//! Log-probabilities are always reported at temperature 1, no matter what
//! temperature sampling used: the PPO ratio and the KL reference both compare
//! training-distribution probabilities.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{Message, TokenId};

/// Reserved beginning-of-sequence token, also the left padding.
pub const BOS: TokenId = 0;
/// Reserved end-of-sequence token; sampling stops after emitting it.
pub const EOS: TokenId = 1;

const SNAPSHOT_MAGIC: &[u8; 8] = b"KGSNAP01";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("word '{0}' is not in the vocabulary")]
    UnknownWord(String),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("snapshot version skew: expected {expected}, got {got}")]
    VersionSkew { expected: u64, got: u64 },
    #[error("snapshot file is corrupt: {0}")]
    CorruptSnapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ───────────────────────── vocabulary ─────────────────────────

/// Fixed word-per-token vocabulary. Text round-trips as whitespace-joined
/// vocabulary words.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        assert!(words.len() >= 4, "vocabulary needs BOS, EOS and room to say something");
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect::<HashMap<_, _>>();
        assert_eq!(index.len(), words.len(), "vocabulary words must be unique");
        Vocabulary { words, index }
    }

    /// The default 64-word vocabulary, themed so that surface style is
    /// decidable: heavy "structured assistant" marker words, casual words,
    /// digits for the arithmetic tasks, and steering cue words that hints
    /// and directions are written in.
    pub fn default_64() -> Self {
        let words: Vec<String> = [
            // reserved
            "<bos>", "<eos>",
            // digits
            "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
            // task words
            "solve", "sum", "add", "answer", "equals", "total", "problem",
            "question", "result", "check",
            // structured-assistant markers
            "overview", "summary", "firstly", "furthermore", "moreover",
            "heading", "bullet", "formally",
            // casual words
            "hey", "yeah", "cool", "gotcha", "fine", "lol", "btw", "anyway",
            // steering cues that corrections are phrased in
            "casual", "short", "plain", "direct", "polite", "specific",
            "friendly", "simple",
            // politeness and feedback
            "thanks", "please", "good", "nice", "great", "ok",
            // connectives
            "the", "a", "is", "it", "so", "and", "now", "then", "here",
            "this", "that", "of",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Vocabulary::new(words)
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word_of(&self, id: TokenId) -> Result<&str, PolicyError> {
        self.words
            .get(id)
            .map(|s| s.as_str())
            .ok_or(PolicyError::TokenOutOfRange {
                id,
                vocab: self.size(),
            })
    }

    /// Strict encoding: every whitespace-separated word must be in the
    /// vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, PolicyError> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| PolicyError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Lossy projection of arbitrary text onto the vocabulary: words are
    /// lowercased and stripped of edge punctuation, unknown words are
    /// dropped. This is how free-form conversational context (persona
    /// replies, hints, environment reports) becomes policy context.
    pub fn encode_lossy(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .filter_map(|w| {
                let cleaned = w
                    .trim_matches(|c: char| !c.is_alphanumeric() && c != '<' && c != '>')
                    .to_lowercase();
                self.id_of(&cleaned)
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, PolicyError> {
        let words: Result<Vec<&str>, PolicyError> =
            tokens.iter().map(|&t| self.word_of(t)).collect();
        Ok(words?.join(" "))
    }
}

/// Flattens a message list into policy context tokens.
///
/// Message contents are lossily encoded in order and concatenated. Both the
/// serving path (building the prompt for generation) and the distillation
/// path (scoring a response under a hint-enhanced context) must go through
/// this one function so their token views of the same messages agree
/// exactly.
pub fn context_from_messages(vocab: &Vocabulary, messages: &[Message]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for message in messages {
        out.extend(vocab.encode_lossy(&message.content));
    }
    out
}

// ───────────────────────── parameters ─────────────────────────

/// Versioned parameter set of the k-gram policy.
///
/// `ctx` is stored flat with layout `[(slot * V + c) * V + j]`, where slot i
/// reads the token i+1 positions back. Snapshots are immutable once
/// published; the trainer clones, updates, bumps the version, and publishes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    v: usize,
    k: usize,
    pub bias: Vec<f64>,
    pub ctx: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(v: usize, k: usize) -> Self {
        assert!(v >= 4 && k >= 1);
        PolicyParams {
            v,
            k,
            bias: vec![0.0; v],
            ctx: vec![0.0; k * v * v],
            version: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn context_len(&self) -> usize {
        self.k
    }

    /// Total number of scalar parameters: V + k·V².
    pub fn param_count(&self) -> usize {
        self.v + self.k * self.v * self.v
    }

    /// Flat parameter view used by the optimizer and the finite-difference
    /// oracle: indices [0, V) are the bias, the rest is `ctx` in layout
    /// order.
    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.v {
            self.bias[i]
        } else {
            self.ctx[i - self.v]
        }
    }

    pub fn set_flat(&mut self, i: usize, value: f64) {
        if i < self.v {
            self.bias[i] = value;
        } else {
            self.ctx[i - self.v] = value;
        }
    }

    /// Mutable weight cell for context slot `slot`, context token `c`, next
    /// token `j`.
    pub fn ctx_mut(&mut self, slot: usize, c: TokenId, j: TokenId) -> &mut f64 {
        &mut self.ctx[(slot * self.v + c) * self.v + j]
    }

    pub fn ctx_at(&self, slot: usize, c: TokenId, j: TokenId) -> f64 {
        self.ctx[(slot * self.v + c) * self.v + j]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        for &t in tokens {
            if t >= self.v {
                return Err(PolicyError::TokenOutOfRange { id: t, vocab: self.v });
            }
        }
        Ok(())
    }

    /// Fills `out` with the logits for the next token after `window`
    /// (window[i] = token i+1 positions back, BOS-padded by the caller).
    fn logits_into(&self, window: &[TokenId], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (slot, &c) in window.iter().enumerate() {
            let row = (slot * self.v + c) * self.v;
            let weights = &self.ctx[row..row + self.v];
            for (o, w) in out.iter_mut().zip(weights) {
                *o += w;
            }
        }
    }

    /// Scores `response` autoregressively after `context`: the log-prob of
    /// each response token given everything before it, at temperature 1.
    pub fn log_probs_forced(
        &self,
        context: &[TokenId],
        response: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(context)?;
        self.check_tokens(response)?;
        if response.is_empty() {
            return Err(PolicyError::LengthMismatch { expected: 1, got: 0 });
        }
        let mut window = Window::from_context(context, self.k);
        let mut logits = Vec::with_capacity(self.v);
        let mut out = Vec::with_capacity(response.len());
        for &tok in response {
            self.logits_into(window.as_slice(), &mut logits);
            let lse = log_sum_exp(&logits);
            out.push(logits[tok] - lse);
            window.push(tok);
        }
        Ok(out)
    }

    /// Autoregressive sampling at `temperature`, deterministic for a fixed
    /// seed. Generation stops after emitting EOS or at `max_len` tokens.
    /// The returned log-probs are temperature-1 scores of the chosen tokens.
    pub fn sample(
        &self,
        context: &[TokenId],
        temperature: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<GenerationResult, PolicyError> {
        assert!(temperature > 0.0, "temperature must be positive");
        assert!(max_len >= 1, "max_len must be at least 1");
        self.check_tokens(context)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut window = Window::from_context(context, self.k);
        let mut logits = Vec::with_capacity(self.v);
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        let mut terminated_by = TerminatedBy::MaxLen;

        for _ in 0..max_len {
            self.logits_into(window.as_slice(), &mut logits);
            let u: f64 = rng.gen();
            let tok = sample_index(&logits, temperature, u);
            let lse = log_sum_exp(&logits);
            tokens.push(tok);
            log_probs.push(logits[tok] - lse);
            window.push(tok);
            if tok == EOS {
                terminated_by = TerminatedBy::Eos;
                break;
            }
        }
        Ok(GenerationResult {
            tokens,
            log_probs,
            terminated_by,
        })
    }

    /// Exact gradient of Σ_t weights[t] · log π(response[t] | ·) with respect
    /// to every parameter. Per position the contribution is
    /// `w_t · (one_hot(token) − softmax(logits))`, landing on the bias and on
    /// the k active context rows.
    pub fn grad_log_probs_forced(
        &self,
        context: &[TokenId],
        response: &[TokenId],
        weights: &[f64],
    ) -> Result<PolicyGrad, PolicyError> {
        self.check_tokens(context)?;
        self.check_tokens(response)?;
        if weights.len() != response.len() {
            return Err(PolicyError::LengthMismatch {
                expected: response.len(),
                got: weights.len(),
            });
        }
        let mut grad = PolicyGrad::zeros(self.v, self.k);
        let mut window = Window::from_context(context, self.k);
        let mut logits = Vec::with_capacity(self.v);
        let mut probs = Vec::with_capacity(self.v);
        for (&tok, &w) in response.iter().zip(weights) {
            if w != 0.0 {
                self.logits_into(window.as_slice(), &mut logits);
                softmax_into(&logits, &mut probs);
                for j in 0..self.v {
                    let one_hot = if j == tok { 1.0 } else { 0.0 };
                    let g = w * (one_hot - probs[j]);
                    grad.bias[j] += g;
                    for (slot, &c) in window.as_slice().iter().enumerate() {
                        grad.ctx[(slot * self.v + c) * self.v + j] += g;
                    }
                }
            }
            window.push(tok);
        }
        Ok(grad)
    }
}

/// The trailing-k window, BOS-padded; index 0 is the most recent token.
struct Window {
    slots: Vec<TokenId>,
}

impl Window {
    fn from_context(context: &[TokenId], k: usize) -> Self {
        let mut slots = vec![BOS; k];
        for (i, slot) in slots.iter_mut().enumerate() {
            if i < context.len() {
                *slot = context[context.len() - 1 - i];
            }
        }
        Window { slots }
    }

    fn push(&mut self, tok: TokenId) {
        self.slots.rotate_right(1);
        self.slots[0] = tok;
    }

    fn as_slice(&self) -> &[TokenId] {
        &self.slots
    }
}

/// Gradient in the shape of [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct PolicyGrad {
    v: usize,
    pub bias: Vec<f64>,
    pub ctx: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros(v: usize, k: usize) -> Self {
        PolicyGrad {
            v,
            bias: vec![0.0; v],
            ctx: vec![0.0; k * v * v],
        }
    }

    pub fn param_count(&self) -> usize {
        self.v + self.ctx.len()
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.v {
            self.bias[i]
        } else {
            self.ctx[i - self.v]
        }
    }

    /// Accumulates `other * scale` into `self`.
    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b * scale;
        }
        for (a, b) in self.ctx.iter_mut().zip(&other.ctx) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.bias.iter_mut().chain(self.ctx.iter_mut()) {
            *a *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.bias
            .iter()
            .chain(self.ctx.iter())
            .fold(0.0_f64, |m, &g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminatedBy {
    Eos,
    MaxLen,
}

/// One sampled generation with its temperature-1 log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
    pub terminated_by: TerminatedBy,
}

// ───────────────────────── numerics ─────────────────────────

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|&l| (l - max).exp()));
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
}

/// Inverse-CDF draw from softmax(logits / temperature) using the single
/// uniform `u`: running sum over unnormalized exponentials, first index whose
/// cumulative mass exceeds `u · total`.
fn sample_index(logits: &[f64], temperature: f64, u: f64) -> TokenId {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &l in logits {
        total += ((l - max) / temperature).exp();
    }
    let threshold = u * total;
    let mut acc = 0.0;
    for (j, &l) in logits.iter().enumerate() {
        acc += ((l - max) / temperature).exp();
        if acc > threshold {
            return j;
        }
    }
    logits.len() - 1
}

// ───────────────────────── snapshots ─────────────────────────

/// Writes a snapshot file: magic, V, k, version, then the flat parameters
/// (bias first, context weights after) as little-endian doubles.
pub fn write_snapshot(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let mut buf = Vec::with_capacity(24 + 8 * params.param_count());
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&(params.v as u32).to_le_bytes());
    buf.extend_from_slice(&(params.k as u32).to_le_bytes());
    buf.extend_from_slice(&params.version.to_le_bytes());
    for value in params.bias.iter().chain(params.ctx.iter()) {
        buf.extend_from_slice(&value.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<PolicyParams, PolicyError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(PolicyError::CorruptSnapshot("bad header".into()));
    }
    let v = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let version = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = 24 + 8 * (v + k * v * v);
    if bytes.len() != expected {
        return Err(PolicyError::CorruptSnapshot(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut params = PolicyParams::zeros(v, k);
    params.version = version;
    let mut offset = 24;
    for value in params.bias.iter_mut().chain(params.ctx.iter_mut()) {
        *value = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
        offset += 8;
    }
    Ok(params)
}

// ───────────────────────── snapshot hub ─────────────────────────

/// The atomically swapped serving handle plus a short version history.
///
/// Serving reads `current()` once per request and holds that Arc for the
/// whole generation, so an in-flight request is never affected by a publish.
/// The history retains recent versions so the distillation path can score
/// responses under the exact snapshot that generated them even after a few
/// more updates have landed.
pub struct SnapshotHub {
    current: RwLock<Arc<PolicyParams>>,
    history: Mutex<VecDeque<Arc<PolicyParams>>>,
    retain: usize,
}

impl SnapshotHub {
    pub fn new(initial: PolicyParams, retain: usize) -> Self {
        let initial = Arc::new(initial);
        let mut history = VecDeque::new();
        history.push_back(initial.clone());
        SnapshotHub {
            current: RwLock::new(initial),
            history: Mutex::new(history),
            retain: retain.max(1),
        }
    }

    pub fn current(&self) -> Arc<PolicyParams> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.current.read().version
    }

    /// Publishes the next snapshot. The version must be exactly current + 1.
    pub fn publish(&self, next: PolicyParams) -> Result<Arc<PolicyParams>, PolicyError> {
        let mut current = self.current.write();
        let expected = current.version + 1;
        if next.version != expected {
            return Err(PolicyError::VersionSkew {
                expected,
                got: next.version,
            });
        }
        let next = Arc::new(next);
        *current = next.clone();
        let mut history = self.history.lock();
        history.push_back(next.clone());
        while history.len() > self.retain {
            history.pop_front();
        }
        Ok(next)
    }

    /// A retained snapshot by exact version, if it is still in the history.
    pub fn get_version(&self, version: u64) -> Option<Arc<PolicyParams>> {
        self.history
            .lock()
            .iter()
            .find(|p| p.version == version)
            .cloned()
    }
}
