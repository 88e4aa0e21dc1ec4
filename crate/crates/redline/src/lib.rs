//! Pairwise text classification, revision alignment, and edit analytics.
//!
//! The crate revolves around one task shape: given an old and a new piece
//! of text, say how the two relate. Four approaches cover the trade-off
//! between quality and cost:
//!
//! * generation: prompt a decoder and read the label out of its completion;
//! * sequence classification: one forward pass, classify the last hidden
//!   state;
//! * cross-segment classification: one forward pass over both segments,
//!   classify a transform of the two segment-end representations;
//! * siamese classification: encode each segment separately, classify a
//!   transform of the pair.
//!
//! Around that core sit the pieces a revision-analysis pipeline needs:
//! corpus loading and balanced sampling ([`corpus`]), prompt and input
//! construction ([`prompting`]), model backends with deterministic
//! desk-scale stubs ([`backend`]), sentence alignment between document
//! revisions ([`alignment`]), adapter fine-tuning ([`training`]), metric
//! and significance machinery ([`evaluation`]), automatic corpus
//! annotation ([`autoannotate`]), and edit-behavior analytics
//! ([`analysis`]).
//!
//! Everything is deterministic given a seed: stubs derive representations
//! by hashing, training uses counter-based RNG streams, and reports
//! serialize with stable field orders, so byte-identical reruns are the
//! expected behavior, not a coincidence.

pub mod alignment;
pub mod analysis;
pub mod approaches;
pub mod autoannotate;
pub mod backend;
pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod prompting;
pub mod synthetic;
pub mod training;
