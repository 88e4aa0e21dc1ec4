//! Tiny trainable backends for desk-scale experiments.
//!
//! [`TinyEncoder`] is a bag-of-words encoder: hashed token embeddings,
//! mean pooling over the prefix, and one square mixing map. The mixer is
//! the model's linear map, so adapter fine-tuning has something to attach
//! to; full fine-tuning trains embeddings and mixer together.
//!
//! [`TinyLm`] is a closed-vocabulary bag-of-words language model (mean
//! prefix embedding, linear output layer) that supports greedy decoding
//! and next-token cross-entropy training on a target string.
//!
//! Both are deliberately small: their job is to make every training-path
//! property (gradients, determinism, checkpoint resume, learnability on
//! separable data) checkable on a CPU in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{
    hash_str, token_at_or_before, whitespace_tokens, Backend, BackendError, Capabilities,
    Counters, FinetuneConfig, FinetuneMode, ModelArch, ModelInfo, SpanPair, TrainableBackend,
};
use crate::prompting::EncodedInput;

const STATE_FORMAT: u32 = 1;

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Rank-decomposed additive adapter on the mixer map: the effective map is
/// `W + (alpha/rank) * B A`, with only `A` and `B` trainable.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Adapter {
    rank: usize,
    scale: f64,
    dropout: f64,
    /// Flat `[A (rank*dim) | B (dim*rank)]`.
    params: Vec<f64>,
    #[serde(skip)]
    grads: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Trace {
    Last {
        bucket_prefix: Vec<usize>,
        pooled: Vec<f64>,
        dropped: Option<Vec<f64>>,
    },
    Spans {
        buckets: Vec<usize>,
        old_prefix: Option<usize>,
        new_prefix: Option<usize>,
        old_pooled: Vec<f64>,
        new_pooled: Vec<f64>,
        old_dropped: Option<Vec<f64>>,
        new_dropped: Option<Vec<f64>>,
    },
}

/// Trainable mean-pool encoder with one mixing map.
#[derive(Debug, Clone)]
pub struct TinyEncoder {
    info: ModelInfo,
    seed: u64,
    dim: usize,
    vocab_buckets: usize,
    /// Flat `[embeddings (vocab*dim) | mixer (dim*dim, row major)]`.
    weights: Vec<f64>,
    base_grads: Vec<f64>,
    mode: Option<FinetuneMode>,
    adapter: Option<Adapter>,
    dropout_rng: ChaCha8Rng,
    traces: Vec<Trace>,
    max_tokens: usize,
    counters: Counters,
}

impl TinyEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_vocab_buckets(dim, seed, 2048)
    }

    pub fn with_vocab_buckets(dim: usize, seed: u64, vocab_buckets: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut weights = uniform_init(&mut rng, vocab_buckets * dim, scale);
        // Mixer starts near identity so the untrained encoder is already a
        // plain mean-pool model.
        let mixer_at = weights.len();
        weights.extend(uniform_init(&mut rng, dim * dim, 0.05 * scale));
        for i in 0..dim {
            weights[mixer_at + i * dim + i] += 1.0;
        }
        Self {
            info: ModelInfo {
                name: format!("tiny-encoder-{dim}d"),
                hidden_dim: dim,
                arch: ModelArch::DecoderOnly,
                instruction_tuned: false,
            },
            seed,
            dim,
            vocab_buckets,
            weights,
            base_grads: Vec::new(),
            mode: None,
            adapter: None,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xd09),
            traces: Vec::new(),
            max_tokens: 4096,
            counters: Counters::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, token: &str) -> usize {
        ((hash_str(token) ^ self.seed) % self.vocab_buckets as u64) as usize
    }

    fn buckets_checked(&self, input: &EncodedInput) -> Result<Vec<(usize, usize)>, BackendError> {
        let tokens = whitespace_tokens(&input.text);
        if tokens.len() > self.max_tokens {
            return Err(BackendError::ContextOverflow {
                tokens: tokens.len(),
                limit: self.max_tokens,
            });
        }
        Ok(tokens
            .iter()
            .map(|(t, start, _)| (self.bucket(t), *start))
            .collect())
    }

    fn emb(&self, bucket: usize) -> &[f64] {
        &self.weights[bucket * self.dim..(bucket + 1) * self.dim]
    }

    fn mixer(&self) -> &[f64] {
        &self.weights[self.vocab_buckets * self.dim..]
    }

    /// Mean embedding over the first `prefix` tokens (zeros when empty).
    fn pool(&self, buckets: &[usize], prefix: usize) -> Vec<f64> {
        let mut pooled = vec![0.0; self.dim];
        if prefix == 0 {
            return pooled;
        }
        for &b in &buckets[..prefix] {
            for (acc, v) in pooled.iter_mut().zip(self.emb(b)) {
                *acc += v;
            }
        }
        for v in &mut pooled {
            *v /= prefix as f64;
        }
        pooled
    }

    fn adapter_delta(&self, z: &[f64]) -> Vec<f64> {
        let Some(adapter) = &self.adapter else {
            return vec![0.0; self.dim];
        };
        let (r, d) = (adapter.rank, self.dim);
        let a = &adapter.params[..r * d];
        let b = &adapter.params[r * d..];
        let mut down = vec![0.0; r];
        for (i, di) in down.iter_mut().enumerate() {
            for j in 0..d {
                *di += a[i * d + j] * z[j];
            }
        }
        let mut delta = vec![0.0; d];
        for (i, out) in delta.iter_mut().enumerate() {
            for (j, dj) in down.iter().enumerate() {
                *out += b[i * r + j] * dj;
            }
        }
        for v in &mut delta {
            *v *= adapter.scale;
        }
        delta
    }

    /// `state = mixer * pooled + scale * B A * z` where `z` is the
    /// (possibly dropout-masked) pooled vector.
    fn state_from_pooled(&self, pooled: &[f64], dropped: Option<&[f64]>) -> Vec<f64> {
        let mixer = self.mixer();
        let mut state = vec![0.0; self.dim];
        for (i, out) in state.iter_mut().enumerate() {
            for (j, p) in pooled.iter().enumerate() {
                *out += mixer[i * self.dim + j] * p;
            }
        }
        let z = dropped.unwrap_or(pooled);
        for (out, dv) in state.iter_mut().zip(self.adapter_delta(z)) {
            *out += dv;
        }
        state
    }

    fn dropout_mask(&mut self, pooled: &[f64]) -> Option<Vec<f64>> {
        let dropout = self.adapter.as_ref().map(|a| a.dropout).unwrap_or(0.0);
        if dropout == 0.0 {
            return None;
        }
        let keep = 1.0 - dropout;
        Some(
            pooled
                .iter()
                .map(|v| {
                    if self.dropout_rng.gen::<f64>() < dropout {
                        0.0
                    } else {
                        v / keep
                    }
                })
                .collect(),
        )
    }

    /// Shared backward for one state: `dstate` flows into mixer/embeddings
    /// (full mode) or the adapter factors (adapter mode).
    fn backward_state(
        &mut self,
        bucket_prefix: &[usize],
        pooled: &[f64],
        dropped: Option<&[f64]>,
        dstate: &[f64],
    ) {
        let d = self.dim;
        match self.mode {
            Some(FinetuneMode::Full) => {
                let mixer_at = self.vocab_buckets * d;
                for i in 0..d {
                    for j in 0..d {
                        self.base_grads[mixer_at + i * d + j] += dstate[i] * pooled[j];
                    }
                }
                if !bucket_prefix.is_empty() {
                    let mixer = self.mixer();
                    let mut dpooled = vec![0.0; d];
                    for (j, dp) in dpooled.iter_mut().enumerate() {
                        for (i, ds) in dstate.iter().enumerate() {
                            *dp += mixer[i * d + j] * ds;
                        }
                    }
                    let inv = 1.0 / bucket_prefix.len() as f64;
                    for &b in bucket_prefix {
                        for (j, dp) in dpooled.iter().enumerate() {
                            self.base_grads[b * d + j] += dp * inv;
                        }
                    }
                }
            }
            Some(FinetuneMode::Adapter { .. }) => {
                let adapter = self.adapter.as_mut().expect("adapter mode has adapter");
                let r = adapter.rank;
                let z = dropped.unwrap_or(pooled);
                let a = &adapter.params[..r * d];
                let b = &adapter.params[r * d..];
                let mut down = vec![0.0; r];
                for (i, di) in down.iter_mut().enumerate() {
                    for j in 0..d {
                        *di += a[i * d + j] * z[j];
                    }
                }
                // dB[i][k] = scale * dstate[i] * down[k]
                for i in 0..d {
                    for k in 0..r {
                        adapter.grads[r * d + i * r + k] += adapter.scale * dstate[i] * down[k];
                    }
                }
                // dA[k][j] = scale * (B^T dstate)[k] * z[j]
                let mut up = vec![0.0; r];
                for (k, u) in up.iter_mut().enumerate() {
                    for i in 0..d {
                        *u += b[i * r + k] * dstate[i];
                    }
                }
                for k in 0..r {
                    for j in 0..d {
                        adapter.grads[k * d + j] += adapter.scale * up[k] * z[j];
                    }
                }
            }
            None => panic!("backward without apply_finetune"),
        }
    }
}

impl Backend for TinyEncoder {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            encode: true,
            generate: false,
            trainable: true,
        }
    }

    fn encode_last(&mut self, input: &EncodedInput) -> Result<Vec<f64>, BackendError> {
        let buckets = self.buckets_checked(input)?;
        self.counters.forward_passes += 1;
        self.counters.encode_calls += 1;
        let ids: Vec<usize> = buckets.iter().map(|(b, _)| *b).collect();
        let pooled = self.pool(&ids, ids.len());
        Ok(self.state_from_pooled(&pooled, None))
    }

    fn encode_spans(&mut self, input: &EncodedInput) -> Result<SpanPair, BackendError> {
        let old_end = input
            .old_segment_end
            .ok_or(BackendError::MissingSpan { side: "old" })?;
        let new_end = input
            .new_segment_end
            .ok_or(BackendError::MissingSpan { side: "new" })?;
        let tokens = whitespace_tokens(&input.text);
        if tokens.len() > self.max_tokens {
            return Err(BackendError::ContextOverflow {
                tokens: tokens.len(),
                limit: self.max_tokens,
            });
        }
        self.counters.forward_passes += 1;
        self.counters.encode_calls += 1;
        let ids: Vec<usize> = tokens.iter().map(|(t, _, _)| self.bucket(t)).collect();
        let old_prefix = token_at_or_before(&tokens, old_end).map(|t| t + 1).unwrap_or(0);
        let new_prefix = token_at_or_before(&tokens, new_end).map(|t| t + 1).unwrap_or(0);
        let old_pooled = self.pool(&ids, old_prefix);
        let new_pooled = self.pool(&ids, new_prefix);
        Ok(SpanPair {
            old: self.state_from_pooled(&old_pooled, None),
            new: self.state_from_pooled(&new_pooled, None),
        })
    }

    fn generate(&mut self, _: &EncodedInput, _: usize) -> Result<String, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "generation".into(),
        })
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn reset_counters(&mut self) {
        self.counters = Counters::default();
    }
}

impl TrainableBackend for TinyEncoder {
    fn apply_finetune(&mut self, config: &FinetuneConfig) -> Result<(), BackendError> {
        match config.mode {
            FinetuneMode::Full => {
                self.base_grads = vec![0.0; self.weights.len()];
                self.adapter = None;
            }
            FinetuneMode::Adapter {
                rank,
                alpha,
                dropout,
            } => {
                let d = self.dim;
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xada9);
                // A starts random, B at zero, so the adapter delta starts at
                // zero and the configured model matches the base model.
                let mut params = uniform_init(&mut rng, rank * d, 1.0 / (d as f64).sqrt());
                params.extend(vec![0.0; d * rank]);
                let n = params.len();
                self.adapter = Some(Adapter {
                    rank,
                    scale: alpha as f64 / rank as f64,
                    dropout,
                    params,
                    grads: vec![0.0; n],
                });
                self.base_grads = Vec::new();
            }
        }
        self.mode = Some(config.mode);
        self.dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd09);
        self.traces.clear();
        Ok(())
    }

    fn trainable_parameters(&self) -> usize {
        match self.mode {
            Some(FinetuneMode::Full) => self.weights.len(),
            Some(FinetuneMode::Adapter { .. }) => {
                self.adapter.as_ref().map(|a| a.params.len()).unwrap_or(0)
            }
            None => 0,
        }
    }

    fn params(&self) -> &[f64] {
        match self.mode {
            Some(FinetuneMode::Full) => &self.weights,
            Some(FinetuneMode::Adapter { .. }) => &self.adapter.as_ref().unwrap().params,
            None => &[],
        }
    }

    fn params_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        match self.mode {
            Some(FinetuneMode::Full) => (&mut self.weights, &self.base_grads),
            Some(FinetuneMode::Adapter { .. }) => {
                let adapter = self.adapter.as_mut().unwrap();
                (&mut adapter.params, &adapter.grads)
            }
            None => (&mut [], &[]),
        }
    }

    fn zero_grads(&mut self) {
        for g in &mut self.base_grads {
            *g = 0.0;
        }
        if let Some(adapter) = &mut self.adapter {
            for g in &mut adapter.grads {
                *g = 0.0;
            }
        }
    }

    fn encode_last_train(&mut self, input: &EncodedInput) -> Result<Vec<f64>, BackendError> {
        if self.mode.is_none() {
            return Err(BackendError::NotConfigured);
        }
        let buckets = self.buckets_checked(input)?;
        self.counters.forward_passes += 1;
        self.counters.encode_calls += 1;
        let ids: Vec<usize> = buckets.iter().map(|(b, _)| *b).collect();
        let pooled = self.pool(&ids, ids.len());
        let dropped = self.dropout_mask(&pooled);
        let state = self.state_from_pooled(&pooled, dropped.as_deref());
        self.traces.push(Trace::Last {
            bucket_prefix: ids,
            pooled,
            dropped,
        });
        Ok(state)
    }

    fn encode_spans_train(&mut self, input: &EncodedInput) -> Result<SpanPair, BackendError> {
        if self.mode.is_none() {
            return Err(BackendError::NotConfigured);
        }
        let old_end = input
            .old_segment_end
            .ok_or(BackendError::MissingSpan { side: "old" })?;
        let new_end = input
            .new_segment_end
            .ok_or(BackendError::MissingSpan { side: "new" })?;
        let tokens = whitespace_tokens(&input.text);
        if tokens.len() > self.max_tokens {
            return Err(BackendError::ContextOverflow {
                tokens: tokens.len(),
                limit: self.max_tokens,
            });
        }
        self.counters.forward_passes += 1;
        self.counters.encode_calls += 1;
        let ids: Vec<usize> = tokens.iter().map(|(t, _, _)| self.bucket(t)).collect();
        let old_prefix = token_at_or_before(&tokens, old_end).map(|t| t + 1).unwrap_or(0);
        let new_prefix = token_at_or_before(&tokens, new_end).map(|t| t + 1).unwrap_or(0);
        let old_pooled = self.pool(&ids, old_prefix);
        let new_pooled = self.pool(&ids, new_prefix);
        let old_dropped = self.dropout_mask(&old_pooled);
        let new_dropped = self.dropout_mask(&new_pooled);
        let pair = SpanPair {
            old: self.state_from_pooled(&old_pooled, old_dropped.as_deref()),
            new: self.state_from_pooled(&new_pooled, new_dropped.as_deref()),
        };
        self.traces.push(Trace::Spans {
            buckets: ids,
            old_prefix: (old_prefix > 0).then_some(old_prefix),
            new_prefix: (new_prefix > 0).then_some(new_prefix),
            old_pooled,
            new_pooled,
            old_dropped,
            new_dropped,
        });
        Ok(pair)
    }

    fn backprop_last(&mut self, dstate: &[f64]) {
        let trace = self.traces.pop().expect("backprop_last without a pending trace");
        match trace {
            Trace::Last {
                bucket_prefix,
                pooled,
                dropped,
            } => self.backward_state(&bucket_prefix, &pooled, dropped.as_deref(), dstate),
            Trace::Spans { .. } => panic!("pending trace is a span trace; use backprop_spans"),
        }
    }

    fn backprop_spans(&mut self, dold: &[f64], dnew: &[f64]) {
        let trace = self.traces.pop().expect("backprop_spans without a pending trace");
        match trace {
            Trace::Spans {
                buckets,
                old_prefix,
                new_prefix,
                old_pooled,
                new_pooled,
                old_dropped,
                new_dropped,
            } => {
                let old_ids = &buckets[..old_prefix.unwrap_or(0)];
                self.backward_state(old_ids, &old_pooled, old_dropped.as_deref(), dold);
                let new_ids = &buckets[..new_prefix.unwrap_or(0)];
                self.backward_state(new_ids, &new_pooled, new_dropped.as_deref(), dnew);
            }
            Trace::Last { .. } => panic!("pending trace is a last-token trace; use backprop_last"),
        }
    }

    fn export_state(&self) -> serde_json::Value {
        serde_json::json!({
            "format": STATE_FORMAT,
            "kind": "tiny-encoder",
            "dim": self.dim,
            "vocab_buckets": self.vocab_buckets,
            "seed": self.seed,
            "weights": self.weights,
            "mode": self.mode,
            "adapter": self.adapter,
            "dropout_rng": self.dropout_rng,
        })
    }

    fn import_state(&mut self, state: &serde_json::Value) -> Result<(), BackendError> {
        #[derive(Deserialize)]
        struct Stored {
            format: u32,
            kind: String,
            dim: usize,
            vocab_buckets: usize,
            seed: u64,
            weights: Vec<f64>,
            mode: Option<FinetuneMode>,
            adapter: Option<Adapter>,
            dropout_rng: ChaCha8Rng,
        }
        let stored: Stored = serde_json::from_value(state.clone())
            .map_err(|e| BackendError::BadState(e.to_string()))?;
        if stored.kind != "tiny-encoder" {
            return Err(BackendError::BadState(format!(
                "state is for {:?}, not tiny-encoder",
                stored.kind
            )));
        }
        if stored.format != STATE_FORMAT {
            return Err(BackendError::BadState(format!(
                "unsupported state format {}",
                stored.format
            )));
        }
        if stored.dim != self.dim || stored.vocab_buckets != self.vocab_buckets {
            return Err(BackendError::BadState(format!(
                "geometry mismatch: state is {}d/{} buckets, backend is {}d/{}",
                stored.dim, stored.vocab_buckets, self.dim, self.vocab_buckets
            )));
        }
        self.seed = stored.seed;
        self.weights = stored.weights;
        self.mode = stored.mode;
        self.adapter = stored.adapter.map(|mut a| {
            a.grads = vec![0.0; a.params.len()];
            a
        });
        if let Some(FinetuneMode::Full) = self.mode {
            self.base_grads = vec![0.0; self.weights.len()];
        }
        self.dropout_rng = stored.dropout_rng;
        self.traces.clear();
        Ok(())
    }
}

/// Closed-vocabulary bag-of-words language model.
#[derive(Debug, Clone)]
pub struct TinyLm {
    info: ModelInfo,
    dim: usize,
    vocab: Vec<String>,
    vocab_index: HashMap<String, usize>,
    /// Flat `[embeddings (V*dim) | output (V*dim)]`.
    weights: Vec<f64>,
    grads: Vec<f64>,
    configured: bool,
    max_tokens: usize,
    counters: Counters,
}

/// End-of-sequence marker appended to every training target.
pub const END_TOKEN: &str = "<end>";
/// Bucket for tokens outside the closed vocabulary.
pub const UNK_TOKEN: &str = "<unk>";

impl TinyLm {
    /// Builds the model with a vocabulary drawn from `texts` (whitespace
    /// tokens) plus the end and unknown markers.
    pub fn with_vocab_from_texts<'a>(
        dim: usize,
        seed: u64,
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut vocab = vec![END_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut seen: HashMap<String, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for text in texts {
            for (token, _, _) in whitespace_tokens(text) {
                if !seen.contains_key(&token) {
                    seen.insert(token.clone(), vocab.len());
                    vocab.push(token);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let weights = uniform_init(&mut rng, 2 * vocab.len() * dim, scale);
        Self {
            info: ModelInfo {
                name: format!("tiny-lm-{dim}d"),
                hidden_dim: dim,
                arch: ModelArch::DecoderOnly,
                instruction_tuned: false,
            },
            dim,
            vocab_index: seen,
            vocab,
            weights,
            grads: Vec::new(),
            configured: false,
            max_tokens: 4096,
            counters: Counters::default(),
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    fn token_id(&self, token: &str) -> usize {
        *self
            .vocab_index
            .get(token)
            .unwrap_or(&self.vocab_index[UNK_TOKEN])
    }

    fn ids(&self, text: &str) -> Vec<usize> {
        whitespace_tokens(text)
            .into_iter()
            .map(|(t, _, _)| self.token_id(&t))
            .collect()
    }

    fn state(&self, prefix: &[usize]) -> Vec<f64> {
        let mut state = vec![0.0; self.dim];
        if prefix.is_empty() {
            return state;
        }
        for &id in prefix {
            let emb = &self.weights[id * self.dim..(id + 1) * self.dim];
            for (acc, v) in state.iter_mut().zip(emb) {
                *acc += v;
            }
        }
        for v in &mut state {
            *v /= prefix.len() as f64;
        }
        state
    }

    fn logits(&self, state: &[f64]) -> Vec<f64> {
        let out_at = self.vocab.len() * self.dim;
        (0..self.vocab.len())
            .map(|v| {
                let row = &self.weights[out_at + v * self.dim..out_at + (v + 1) * self.dim];
                row.iter().zip(state).map(|(w, s)| w * s).sum()
            })
            .collect()
    }
}

impl Backend for TinyLm {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            encode: false,
            generate: true,
            trainable: true,
        }
    }

    fn encode_last(&mut self, _: &EncodedInput) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "encoding".into(),
        })
    }

    fn encode_spans(&mut self, _: &EncodedInput) -> Result<SpanPair, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "span encoding".into(),
        })
    }

    fn generate(
        &mut self,
        input: &EncodedInput,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        let mut seq = self.ids(&input.text);
        if seq.len() > self.max_tokens {
            return Err(BackendError::ContextOverflow {
                tokens: seq.len(),
                limit: self.max_tokens,
            });
        }
        self.counters.forward_passes += 1;
        let end_id = self.token_id(END_TOKEN);
        let mut output = Vec::new();
        for _ in 0..max_new_tokens {
            self.counters.decode_steps += 1;
            let state = self.state(&seq);
            let logits = self.logits(&state);
            // Greedy decode; ties break toward the lowest token id.
            let next = logits
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &l)| {
                    if l > best.1 {
                        (i, l)
                    } else {
                        best
                    }
                })
                .0;
            if next == end_id {
                break;
            }
            output.push(self.vocab[next].clone());
            seq.push(next);
        }
        Ok(output.join(" "))
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn reset_counters(&mut self) {
        self.counters = Counters::default();
    }
}

impl TrainableBackend for TinyLm {
    fn apply_finetune(&mut self, config: &FinetuneConfig) -> Result<(), BackendError> {
        match config.mode {
            FinetuneMode::Full => {
                self.grads = vec![0.0; self.weights.len()];
                self.configured = true;
                Ok(())
            }
            // The embedding and output tables are lookup tables, not linear
            // maps in the adapter sense.
            FinetuneMode::Adapter { .. } => Err(BackendError::AdapterUnsupported {
                model: self.info.name.clone(),
            }),
        }
    }

    fn trainable_parameters(&self) -> usize {
        if self.configured {
            self.weights.len()
        } else {
            0
        }
    }

    fn params(&self) -> &[f64] {
        if self.configured {
            &self.weights
        } else {
            &[]
        }
    }

    fn params_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        if self.configured {
            (&mut self.weights, &self.grads)
        } else {
            (&mut [], &[])
        }
    }

    fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = 0.0;
        }
    }

    fn encode_last_train(&mut self, _: &EncodedInput) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "encoding".into(),
        })
    }

    fn encode_spans_train(&mut self, _: &EncodedInput) -> Result<SpanPair, BackendError> {
        Err(BackendError::Unsupported {
            model: self.info.name.clone(),
            operation: "span encoding".into(),
        })
    }

    fn backprop_last(&mut self, _: &[f64]) {
        panic!("tiny-lm has no encoder traces");
    }

    fn backprop_spans(&mut self, _: &[f64], _: &[f64]) {
        panic!("tiny-lm has no encoder traces");
    }

    fn generation_loss_train(
        &mut self,
        input: &EncodedInput,
        target: &str,
    ) -> Result<f64, BackendError> {
        if !self.configured {
            return Err(BackendError::NotConfigured);
        }
        let prompt = self.ids(&input.text);
        if prompt.len() > self.max_tokens {
            return Err(BackendError::ContextOverflow {
                tokens: prompt.len(),
                limit: self.max_tokens,
            });
        }
        self.counters.forward_passes += 1;
        let mut targets = self.ids(target);
        targets.push(self.token_id(END_TOKEN));
        let out_at = self.vocab.len() * self.dim;
        let mut seq = prompt;
        let mut total = 0.0;
        let inv_targets = 1.0 / targets.len() as f64;
        for &gold in &targets {
            let state = self.state(&seq);
            let logits = self.logits(&state);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += -(logits[gold] - max - z.ln());
            // dlogits = softmax - onehot, scaled by the mean over targets.
            let mut dstate = vec![0.0; self.dim];
            for v in 0..self.vocab.len() {
                let dl = (exps[v] / z - if v == gold { 1.0 } else { 0.0 }) * inv_targets;
                let row = out_at + v * self.dim;
                for j in 0..self.dim {
                    self.grads[row + j] += dl * state[j];
                    dstate[j] += self.weights[row + j] * dl;
                }
            }
            if !seq.is_empty() {
                let inv = 1.0 / seq.len() as f64;
                for &id in &seq {
                    for j in 0..self.dim {
                        self.grads[id * self.dim + j] += dstate[j] * inv;
                    }
                }
            }
            seq.push(gold);
        }
        Ok(total * inv_targets)
    }

    fn export_state(&self) -> serde_json::Value {
        serde_json::json!({
            "format": STATE_FORMAT,
            "kind": "tiny-lm",
            "dim": self.dim,
            "vocab": self.vocab,
            "weights": self.weights,
            "configured": self.configured,
        })
    }

    fn import_state(&mut self, state: &serde_json::Value) -> Result<(), BackendError> {
        #[derive(Deserialize)]
        struct Stored {
            format: u32,
            kind: String,
            dim: usize,
            vocab: Vec<String>,
            weights: Vec<f64>,
            configured: bool,
        }
        let stored: Stored = serde_json::from_value(state.clone())
            .map_err(|e| BackendError::BadState(e.to_string()))?;
        if stored.kind != "tiny-lm" || stored.format != STATE_FORMAT {
            return Err(BackendError::BadState(format!(
                "state is {} format {}, want tiny-lm format {STATE_FORMAT}",
                stored.kind, stored.format
            )));
        }
        if stored.dim != self.dim {
            return Err(BackendError::BadState("dimension mismatch".into()));
        }
        self.vocab_index = stored
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.vocab = stored.vocab;
        self.weights = stored.weights;
        self.configured = stored.configured;
        if self.configured {
            self.grads = vec![0.0; self.weights.len()];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(text: &str) -> EncodedInput {
        EncodedInput::plain(text)
    }

    fn spanned(text: &str, old_end: usize, new_end: usize) -> EncodedInput {
        EncodedInput {
            text: text.into(),
            old_segment_end: Some(old_end),
            new_segment_end: Some(new_end),
        }
    }

    #[test]
    fn untrained_adapter_matches_base_model() {
        let input = plain("alpha beta gamma");
        let mut base = TinyEncoder::new(8, 5);
        let reference = base.encode_last(&input).unwrap();

        let mut adapted = TinyEncoder::new(8, 5);
        adapted
            .apply_finetune(&FinetuneConfig::adapter(4, 4, 0.0, 1, 9))
            .unwrap();
        assert_eq!(adapted.encode_last(&input).unwrap(), reference);
    }

    #[test]
    fn trainable_parameter_counts_match_the_adapter_formula() {
        let mut enc = TinyEncoder::new(32, 1);
        assert_eq!(enc.trainable_parameters(), 0);
        enc.apply_finetune(&FinetuneConfig::adapter(8, 8, 0.1, 1, 2))
            .unwrap();
        assert_eq!(enc.trainable_parameters(), 2 * 8 * 32);
        assert_eq!(
            enc.trainable_parameters(),
            super::super::adapter_parameters(8, 32, 32)
        );
        enc.apply_finetune(&FinetuneConfig::full(1, 2)).unwrap();
        assert_eq!(enc.trainable_parameters(), 2048 * 32 + 32 * 32);
    }

    fn numeric_grad(
        enc: &mut TinyEncoder,
        input: &EncodedInput,
        loss_dir: &[f64],
        idx: usize,
        h: f64,
    ) -> f64 {
        let probe = |enc: &mut TinyEncoder, delta: f64, idx: usize| {
            {
                let (params, _) = enc.params_and_grads();
                params[idx] += delta;
            }
            let state = enc.encode_last_train(input).unwrap();
            enc.traces.clear();
            let loss: f64 = state.iter().zip(loss_dir).map(|(s, c)| s * c).sum();
            {
                let (params, _) = enc.params_and_grads();
                params[idx] -= delta;
            }
            loss
        };
        (probe(enc, h, idx) - probe(enc, -h, idx)) / (2.0 * h)
    }

    fn check_encoder_gradients(mode: FinetuneConfig) {
        let input = plain("alpha beta alpha delta");
        let mut enc = TinyEncoder::with_vocab_buckets(4, 11, 64);
        enc.apply_finetune(&mode).unwrap();
        let loss_dir = [0.7, -1.3, 0.4, 0.9];

        let state = enc.encode_last_train(&input).unwrap();
        assert_eq!(state.len(), 4);
        enc.backprop_last(&loss_dir);

        let n = enc.trainable_parameters();
        let grads: Vec<f64> = {
            let (_, grads) = enc.params_and_grads();
            grads.to_vec()
        };
        // Probe a spread of parameters rather than all of them.
        for idx in (0..n).step_by((n / 23).max(1)) {
            let numeric = numeric_grad(&mut enc, &input, &loss_dir, idx, 1e-5);
            let analytic = grads[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "param {idx}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn full_mode_gradients_match_finite_differences() {
        check_encoder_gradients(FinetuneConfig::full(1, 3));
    }

    #[test]
    fn adapter_mode_gradients_match_finite_differences() {
        // Dropout off so the finite-difference probes see the same function.
        check_encoder_gradients(FinetuneConfig::adapter(3, 6, 0.0, 1, 3));
    }

    #[test]
    fn span_backprop_accumulates_both_sides() {
        let mut enc = TinyEncoder::with_vocab_buckets(4, 2, 64);
        enc.apply_finetune(&FinetuneConfig::full(1, 3)).unwrap();
        let input = spanned("a b c d e", 2, 8);
        let pair = enc.encode_spans_train(&input).unwrap();
        assert_ne!(pair.old, pair.new);
        enc.backprop_spans(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]);
        let (_, grads) = enc.params_and_grads();
        assert!(grads.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn export_import_round_trips_bitwise() {
        let mut enc = TinyEncoder::new(8, 5);
        enc.apply_finetune(&FinetuneConfig::adapter(2, 4, 0.5, 1, 7))
            .unwrap();
        // Burn some dropout draws so the RNG state is mid-stream.
        let input = spanned("a b c d", 0, 6);
        let _ = enc.encode_last_train(&input).unwrap();
        enc.traces.clear();

        let state = enc.export_state();
        let mut restored = TinyEncoder::new(8, 5);
        restored.import_state(&state).unwrap();

        // Identical forward results and identical subsequent dropout draws.
        let a = enc.encode_last_train(&input).unwrap();
        let b = restored.encode_last_train(&input).unwrap();
        assert_eq!(a, b);

        let mut wrong_dim = TinyEncoder::new(16, 5);
        assert!(wrong_dim.import_state(&state).is_err());
    }

    #[test]
    fn tiny_lm_learns_a_canned_answer() {
        let corpus = ["the cat sat", "label Clarity", "label Grammar"];
        let mut lm = TinyLm::with_vocab_from_texts(16, 9, corpus.iter().copied());
        lm.apply_finetune(&FinetuneConfig::full(1, 9)).unwrap();

        let prompt = plain("the cat sat");
        let first_loss = {
            lm.zero_grads();
            lm.generation_loss_train(&prompt, "Clarity").unwrap()
        };
        // Plain gradient descent is enough for this smoke test.
        for _ in 0..200 {
            lm.zero_grads();
            let _ = lm.generation_loss_train(&prompt, "Clarity").unwrap();
            let (params, grads) = lm.params_and_grads();
            let grads = grads.to_vec();
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= 0.5 * g;
            }
        }
        lm.zero_grads();
        let final_loss = lm.generation_loss_train(&prompt, "Clarity").unwrap();
        assert!(final_loss < first_loss * 0.1, "{first_loss} -> {final_loss}");
        assert_eq!(lm.generate(&prompt, 10).unwrap(), "Clarity");
    }

    #[test]
    fn tiny_lm_rejects_adapters_and_encoding() {
        let mut lm = TinyLm::with_vocab_from_texts(8, 1, ["a b"].iter().copied());
        assert!(matches!(
            lm.apply_finetune(&FinetuneConfig::adapter(4, 4, 0.0, 1, 1)),
            Err(BackendError::AdapterUnsupported { .. })
        ));
        assert!(matches!(
            lm.encode_last(&plain("a")),
            Err(BackendError::Unsupported { .. })
        ));
    }

    #[test]
    fn tiny_lm_generation_loss_gradcheck() {
        let mut lm = TinyLm::with_vocab_from_texts(6, 4, ["u v w x"].iter().copied());
        lm.apply_finetune(&FinetuneConfig::full(1, 4)).unwrap();
        let prompt = plain("u v");
        lm.zero_grads();
        lm.generation_loss_train(&prompt, "w x").unwrap();
        let grads = {
            let (_, g) = lm.params_and_grads();
            g.to_vec()
        };
        let n = grads.len();
        for idx in (0..n).step_by((n / 17).max(1)) {
            let h = 1e-5;
            let probe = |lm: &mut TinyLm, delta: f64| {
                {
                    let (p, _) = lm.params_and_grads();
                    p[idx] += delta;
                }
                lm.zero_grads();
                let loss = lm.generation_loss_train(&prompt, "w x").unwrap();
                {
                    let (p, _) = lm.params_and_grads();
                    p[idx] -= delta;
                }
                loss
            };
            let numeric = (probe(&mut lm, h) - probe(&mut lm, -h)) / (2.0 * h);
            lm.zero_grads();
            lm.generation_loss_train(&prompt, "w x").unwrap();
            let analytic = {
                let (_, g) = lm.params_and_grads();
                g[idx]
            };
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "param {idx}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
