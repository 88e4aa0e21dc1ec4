//! Model backends: the capability-typed interface classifiers run against,
//! deterministic desk-scale stubs, and a remote generation client.
//!
//! Everything downstream (approaches, training, evaluation, annotation)
//! talks to [`Backend`] and never to a concrete model, so the whole
//! pipeline runs CPU-only against the stubs in [`stub`] and [`tiny`] while
//! production deployments swap in real models behind the same trait.
//!
//! Call discipline: one logical inference stream per handle. Methods take
//! `&mut self`; callers that want parallelism open one handle per worker.
//! Batching is a backend-internal concern and must not change per-sample
//! results.

pub mod stub;
pub mod tiny;

#[cfg(feature = "remote")]
pub mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::EncodedInput;

/// Transformer layout of a model; decides which token position represents
/// a sequence (last token for decoders, first for encoder-only models).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArch {
    EncoderOnly,
    DecoderOnly,
    EncoderDecoder,
}

/// Identity and geometry of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    /// Hidden representation width; classifier heads size themselves off it.
    pub hidden_dim: usize,
    pub arch: ModelArch,
    /// Whether the base model was tuned to follow instructions.
    pub instruction_tuned: bool,
}

/// What a backend can do. Prediction paths check these before running.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub encode: bool,
    pub generate: bool,
    pub trainable: bool,
}

/// Cumulative model-invocation counts, for cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Full forward passes over an input (any kind).
    pub forward_passes: u64,
    /// Encoding calls (`encode_last` or `encode_spans`).
    pub encode_calls: u64,
    /// Autoregressive decoding steps taken by `generate`.
    pub decode_steps: u64,
}

/// Representations of the old and new segments from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPair {
    pub old: Vec<f64>,
    pub new: Vec<f64>,
}

/// Errors raised by backends.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("model {model} does not support {operation}")]
    Unsupported { model: String, operation: String },
    #[error("input of {tokens} tokens exceeds the {limit}-token context window")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("input has no {side} segment offset; span encoding needs both")]
    MissingSpan { side: &'static str },
    #[error("adapter fine-tuning needs a backend with linear maps; {model} has none")]
    AdapterUnsupported { model: String },
    #[error("no fine-tune configuration applied; call apply_finetune first")]
    NotConfigured,
    #[error("checkpoint state does not fit this backend: {0}")]
    BadState(String),
    #[error("remote generation failed after {attempts} attempts: {message}")]
    Remote { attempts: usize, message: String },
}

/// The inference interface every model handle implements.
pub trait Backend {
    fn info(&self) -> &ModelInfo;

    fn capabilities(&self) -> Capabilities;

    /// Hidden representation summarizing the whole input: the last token's
    /// state for decoder and encoder-decoder models, the first token's for
    /// encoder-only models.
    fn encode_last(&mut self, input: &EncodedInput) -> Result<Vec<f64>, BackendError>;

    /// Representations at the old- and new-segment end offsets, from a
    /// single forward pass over the full input.
    fn encode_spans(&mut self, input: &EncodedInput) -> Result<SpanPair, BackendError>;

    /// Greedy (temperature-zero) completion of at most `max_new_tokens`
    /// tokens. `max_new_tokens == 0` yields an empty string.
    fn generate(
        &mut self,
        input: &EncodedInput,
        max_new_tokens: usize,
    ) -> Result<String, BackendError>;

    /// Invocation counts since construction or the last reset.
    fn counters(&self) -> Counters;

    fn reset_counters(&mut self);
}

/// How much of a model fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FinetuneMode {
    /// All base weights train.
    Full,
    /// Base weights freeze; rank-`rank` adapters attach to every linear
    /// map, scaled by `alpha / rank`, with `dropout` on the adapter input
    /// during training.
    Adapter { rank: usize, alpha: usize, dropout: f64 },
}

/// Fine-tuning plan: mode, epoch budget, and the seed that fixes adapter
/// initialization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn full(epochs: usize, seed: u64) -> Self {
        Self {
            mode: FinetuneMode::Full,
            epochs,
            seed,
        }
    }

    pub fn adapter(rank: usize, alpha: usize, dropout: f64, epochs: usize, seed: u64) -> Self {
        Self {
            mode: FinetuneMode::Adapter {
                rank,
                alpha,
                dropout,
            },
            epochs,
            seed,
        }
    }
}

/// Number of adapter parameters for one `fan_out x fan_in` linear map at
/// rank `r`: a down-projection `r x fan_in` plus an up-projection
/// `fan_out x r` (so `2 * r * fan` for square maps).
pub fn adapter_parameters(rank: usize, fan_in: usize, fan_out: usize) -> usize {
    rank * fan_in + fan_out * rank
}

/// A backend whose weights the training loop can update.
///
/// Forward calls for training push an internal trace; `backprop_*` pops the
/// most recent one (last in, first out), accumulating into the gradient
/// buffer. `params`/`grads` expose the trainable parameters as flat slices
/// in a stable order, so the optimizer and checkpoints agree on layout.
pub trait TrainableBackend: Backend {
    /// Selects what trains. Must be called before any training forward.
    fn apply_finetune(&mut self, config: &FinetuneConfig) -> Result<(), BackendError>;

    fn trainable_parameters(&self) -> usize;

    fn params(&self) -> &[f64];

    /// Mutable parameters and read-only gradients, for optimizer steps.
    fn params_and_grads(&mut self) -> (&mut [f64], &[f64]);

    fn zero_grads(&mut self);

    /// `encode_last` with a gradient trace (dropout active in adapter mode).
    fn encode_last_train(&mut self, input: &EncodedInput) -> Result<Vec<f64>, BackendError>;

    /// `encode_spans` with a gradient trace.
    fn encode_spans_train(&mut self, input: &EncodedInput) -> Result<SpanPair, BackendError>;

    /// Backpropagates a gradient w.r.t. the representation returned by the
    /// most recent un-consumed `encode_last_train`.
    fn backprop_last(&mut self, dstate: &[f64]);

    /// Backpropagates gradients w.r.t. the span pair from the most recent
    /// un-consumed `encode_spans_train`.
    fn backprop_spans(&mut self, dold: &[f64], dnew: &[f64]);

    /// Next-token cross-entropy of `target` (plus end marker) given the
    /// prompt, with prompt positions masked out of the loss. Accumulates
    /// gradients and returns the mean loss over target tokens. Only
    /// generation-capable trainable backends support this.
    fn generation_loss_train(
        &mut self,
        input: &EncodedInput,
        target: &str,
    ) -> Result<f64, BackendError> {
        let _ = (input, target);
        Err(BackendError::Unsupported {
            model: self.info().name.clone(),
            operation: "generation training".into(),
        })
    }

    /// Serializes every trainable weight (and any training-time RNG state)
    /// so a checkpoint restore is bit-identical.
    fn export_state(&self) -> serde_json::Value;

    fn import_state(&mut self, state: &serde_json::Value) -> Result<(), BackendError>;
}

/// Known base models: name, hidden width, architecture, instruction tuning.
pub fn model_catalog() -> Vec<ModelInfo> {
    let decoder = |name: &str, dim: usize, inst: bool| ModelInfo {
        name: name.to_string(),
        hidden_dim: dim,
        arch: ModelArch::DecoderOnly,
        instruction_tuned: inst,
    };
    vec![
        decoder("gpt-j-6b", 4096, false),
        decoder("mistral-7b-instruct", 4096, true),
        decoder("llama2-7b", 4096, false),
        decoder("llama2-7b-chat", 4096, true),
        decoder("llama2-13b", 5120, false),
        decoder("llama2-13b-chat", 5120, true),
        decoder("llama3-8b", 4096, false),
        decoder("llama3-8b-instruct", 4096, true),
        ModelInfo {
            name: "roberta-base".into(),
            hidden_dim: 768,
            arch: ModelArch::EncoderOnly,
            instruction_tuned: false,
        },
        ModelInfo {
            name: "t5-base".into(),
            hidden_dim: 768,
            arch: ModelArch::EncoderDecoder,
            instruction_tuned: false,
        },
    ]
}

/// Looks up a catalog model by name.
pub fn catalog_model(name: &str) -> Option<ModelInfo> {
    model_catalog().into_iter().find(|m| m.name == name)
}

/// Whitespace tokens with their character spans (`start..=end`, inclusive).
pub(crate) fn whitespace_tokens(text: &str) -> Vec<(String, usize, usize)> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (idx, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push((std::mem::take(&mut current), start, idx - 1));
            }
        } else {
            if current.is_empty() {
                start = idx;
            }
            current.push(ch);
        }
    }
    if !current.is_empty() {
        let end = text.chars().count() - 1;
        tokens.push((current, start, end));
    }
    tokens
}

/// Index of the token containing `char_idx`, or of the nearest preceding
/// token when the offset falls on whitespace. `None` when no token starts
/// at or before the offset.
pub(crate) fn token_at_or_before(
    tokens: &[(String, usize, usize)],
    char_idx: usize,
) -> Option<usize> {
    let mut found = None;
    for (i, (_, start, _)) in tokens.iter().enumerate() {
        if *start <= char_idx {
            found = Some(i);
        } else {
            break;
        }
    }
    found
}

/// SplitMix64: cheap, well-distributed 64-bit mixer used to derive
/// deterministic pseudo-embeddings.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string, mixed once more for avalanche.
pub(crate) fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(h)
}

/// Maps a 64-bit hash to a float in [-1, 1).
pub(crate) fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_tracks_char_spans() {
        let tokens = whitespace_tokens("<old> a bc </old>");
        let texts: Vec<&str> = tokens.iter().map(|(t, _, _)| t.as_str()).collect();
        assert_eq!(texts, ["<old>", "a", "bc", "</old>"]);
        assert_eq!(tokens[1], ("a".to_string(), 6, 6));
        assert_eq!(tokens[2], ("bc".to_string(), 8, 9));

        // Unicode counts chars, not bytes.
        let tokens = whitespace_tokens("héllo wörld");
        assert_eq!(tokens[1], ("wörld".to_string(), 6, 10));
    }

    #[test]
    fn token_lookup_handles_whitespace_and_preceding() {
        let tokens = whitespace_tokens("ab cd ef");
        assert_eq!(token_at_or_before(&tokens, 0), Some(0));
        assert_eq!(token_at_or_before(&tokens, 1), Some(0));
        assert_eq!(token_at_or_before(&tokens, 2), Some(0), "whitespace falls back");
        assert_eq!(token_at_or_before(&tokens, 4), Some(1));
        assert_eq!(token_at_or_before(&tokens, 7), Some(2));

        let tokens = whitespace_tokens("\nab");
        assert_eq!(token_at_or_before(&tokens, 0), None, "nothing precedes offset 0");
    }

    #[test]
    fn adapter_parameter_formula() {
        // Square map of fan d at rank r costs 2*r*d.
        assert_eq!(adapter_parameters(128, 4096, 4096), 2 * 128 * 4096);
        assert_eq!(adapter_parameters(8, 32, 16), 8 * 32 + 16 * 8);
    }

    #[test]
    fn catalog_dimensions() {
        assert_eq!(catalog_model("llama2-13b").unwrap().hidden_dim, 5120);
        assert_eq!(catalog_model("llama2-7b").unwrap().hidden_dim, 4096);
        let roberta = catalog_model("roberta-base").unwrap();
        assert_eq!(roberta.hidden_dim, 768);
        assert_eq!(roberta.arch, ModelArch::EncoderOnly);
        assert!(catalog_model("mistral-7b-instruct").unwrap().instruction_tuned);
        assert_eq!(model_catalog().len(), 10);
    }

    #[test]
    fn hash_utilities_are_deterministic() {
        assert_eq!(hash_str("token"), hash_str("token"));
        assert_ne!(hash_str("token"), hash_str("tokem"));
        let u = unit_from_hash(splitmix64(42));
        assert!((-1.0..1.0).contains(&u));
        assert_eq!(u, unit_from_hash(splitmix64(42)));
    }
}
