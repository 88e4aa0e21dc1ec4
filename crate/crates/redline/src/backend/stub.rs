//! Deterministic hash-feature stub backend.
//!
//! Stands in for a frozen language model wherever tests or demos need
//! real representations without weights: every token gets a pseudo
//! embedding derived from a seeded hash, and a sequence state is the mean
//! of its prefix embeddings plus a position signature. The same input and
//! seed always produce the same vectors, on any machine.
//!
//! For cost experiments the stub charges a configurable unit of wall-clock
//! time per forward pass and per extracted state / decode step, so
//! measured throughput reflects invocation counts instead of noise.

use std::time::{Duration, Instant};

use super::{
    hash_str, splitmix64, token_at_or_before, unit_from_hash, whitespace_tokens, Backend,
    BackendError, Capabilities, Counters, ModelArch, ModelInfo, SpanPair,
};
use crate::prompting::EncodedInput;

/// Frozen deterministic encoder/generator stub.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    info: ModelInfo,
    seed: u64,
    max_tokens: usize,
    canned_response: Option<String>,
    unit_cost: Duration,
    counters: Counters,
}

impl HashEmbedder {
    pub fn new(hidden_dim: usize, seed: u64) -> Self {
        Self {
            info: ModelInfo {
                name: format!("hash-embedder-{hidden_dim}d"),
                hidden_dim,
                arch: ModelArch::DecoderOnly,
                instruction_tuned: false,
            },
            seed,
            max_tokens: 4096,
            canned_response: None,
            unit_cost: Duration::ZERO,
            counters: Counters::default(),
        }
    }

    /// Takes on a catalog model's identity (name, width, architecture).
    pub fn with_info(mut self, info: ModelInfo) -> Self {
        self.info = info;
        self
    }

    /// Switches to encoder-only behavior: `encode_last` reads the first
    /// token's state.
    pub fn encoder_only(mut self) -> Self {
        self.info.arch = ModelArch::EncoderOnly;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Fixes the text `generate` returns (the decode budget is still spent).
    pub fn with_canned_response(mut self, response: impl Into<String>) -> Self {
        self.canned_response = Some(response.into());
        self
    }

    /// Wall-clock charge per forward pass and per state/decode step.
    pub fn with_unit_cost(mut self, unit_cost: Duration) -> Self {
        self.unit_cost = unit_cost;
        self
    }

    fn spin(&self) {
        if self.unit_cost.is_zero() {
            return;
        }
        let start = Instant::now();
        while start.elapsed() < self.unit_cost {
            std::hint::spin_loop();
        }
    }

    fn embedding(&self, token: &str) -> Vec<f64> {
        let h = hash_str(token) ^ self.seed;
        (0..self.info.hidden_dim)
            .map(|i| unit_from_hash(splitmix64(h.wrapping_add(i as u64))))
            .collect()
    }

    fn position_signature(&self, position: usize) -> Vec<f64> {
        let h = splitmix64(self.seed ^ 0x706f73) ^ position as u64;
        (0..self.info.hidden_dim)
            .map(|i| 0.25 * unit_from_hash(splitmix64(h.wrapping_add(i as u64))))
            .collect()
    }

    /// The representation of the empty input: derived from the seed alone.
    pub fn null_text_vector(&self) -> Vec<f64> {
        let h = splitmix64(self.seed ^ 0x6e756c6c);
        (0..self.info.hidden_dim)
            .map(|i| unit_from_hash(splitmix64(h.wrapping_add(i as u64))))
            .collect()
    }

    fn tokenize_checked(
        &self,
        input: &EncodedInput,
    ) -> Result<Vec<(String, usize, usize)>, BackendError> {
        let tokens = whitespace_tokens(&input.text);
        if tokens.len() > self.max_tokens {
            return Err(BackendError::ContextOverflow {
                tokens: tokens.len(),
                limit: self.max_tokens,
            });
        }
        Ok(tokens)
    }

    /// State at token `t`: mean of embeddings over the prefix `0..=t` plus
    /// a position signature. `None` means "before any token" and yields the
    /// null-text vector.
    fn state_at(&self, tokens: &[(String, usize, usize)], t: Option<usize>) -> Vec<f64> {
        self.spin();
        let Some(t) = t else {
            return self.null_text_vector();
        };
        let mut state = vec![0.0; self.info.hidden_dim];
        for (token, _, _) in &tokens[..=t] {
            for (acc, v) in state.iter_mut().zip(self.embedding(token)) {
                *acc += v;
            }
        }
        let count = (t + 1) as f64;
        for v in &mut state {
            *v /= count;
        }
        for (acc, p) in state.iter_mut().zip(self.position_signature(t)) {
            *acc += p;
        }
        state
    }
}

impl Backend for HashEmbedder {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            encode: true,
            generate: true,
            trainable: false,
        }
    }

    fn encode_last(&mut self, input: &EncodedInput) -> Result<Vec<f64>, BackendError> {
        let tokens = self.tokenize_checked(input)?;
        self.counters.forward_passes += 1;
        self.counters.encode_calls += 1;
        self.spin();
        let position = match self.info.arch {
            ModelArch::EncoderOnly => (!tokens.is_empty()).then_some(0),
            _ => tokens.len().checked_sub(1),
        };
        Ok(self.state_at(&tokens, position))
    }

    fn encode_spans(&mut self, input: &EncodedInput) -> Result<SpanPair, BackendError> {
        let old_end = input
            .old_segment_end
            .ok_or(BackendError::MissingSpan { side: "old" })?;
        let new_end = input
            .new_segment_end
            .ok_or(BackendError::MissingSpan { side: "new" })?;
        let tokens = self.tokenize_checked(input)?;
        self.counters.forward_passes += 1;
        self.counters.encode_calls += 1;
        self.spin();
        let old = self.state_at(&tokens, token_at_or_before(&tokens, old_end));
        let new = self.state_at(&tokens, token_at_or_before(&tokens, new_end));
        Ok(SpanPair { old, new })
    }

    fn generate(
        &mut self,
        input: &EncodedInput,
        max_new_tokens: usize,
    ) -> Result<String, BackendError> {
        let tokens = self.tokenize_checked(input)?;
        self.counters.forward_passes += 1;
        self.spin();
        // The stub always spends the full decode budget; real models may
        // stop early at an end-of-sequence token.
        let mut sampled = Vec::new();
        let prompt_hash = hash_str(&input.text) ^ self.seed;
        for step in 0..max_new_tokens {
            self.counters.decode_steps += 1;
            self.spin();
            sampled.push(format!(
                "w{:04x}",
                splitmix64(prompt_hash.wrapping_add(step as u64 + tokens.len() as u64)) & 0xffff
            ));
        }
        if max_new_tokens == 0 {
            return Ok(String::new());
        }
        Ok(match &self.canned_response {
            Some(text) => text.clone(),
            None => sampled.join(" "),
        })
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn reset_counters(&mut self) {
        self.counters = Counters::default();
    }
}
