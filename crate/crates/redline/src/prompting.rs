//! Model input construction.
//!
//! Classifier inputs come in two styles: `Natural` (plain lines) and
//! `Structured` (segments wrapped in `<old>`/`<new>`-style tags), each with
//! or without the task instruction. Generation prompts additionally carry a
//! response scaffold (`RESPONSE:` / `<response>`) for the model to complete.
//!
//! Besides the text, [`EncodedInput`] records where the old and new
//! segments end, as character offsets. Cross-encoder prediction reads its
//! two span representations at those offsets, so they always point at the
//! last character inside the segment payload (for an empty segment, at the
//! single space that stands in for it; for an empty natural line, at the
//! line separator).
//!
//! Single-text tasks reuse the pair scaffolding with one `TEXT` segment in
//! place of the `OLD`/`NEW` pair; the text is carried on the sample's `new`
//! side, and so is its segment offset.

use serde::{Deserialize, Serialize};

use crate::corpus::{EditSample, InputArity, TaskSpec};

/// How segments are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputStyle {
    /// Plain text lines.
    Natural,
    /// Segments wrapped in angle-bracket tags.
    Structured,
}

/// Rendering style plus whether the task instruction is included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFormat {
    pub style: InputStyle,
    pub instruction: bool,
}

impl InputFormat {
    pub const NATURAL: InputFormat = InputFormat {
        style: InputStyle::Natural,
        instruction: false,
    };
    pub const STRUCTURED: InputFormat = InputFormat {
        style: InputStyle::Structured,
        instruction: false,
    };
    pub const NATURAL_INSTRUCTION: InputFormat = InputFormat {
        style: InputStyle::Natural,
        instruction: true,
    };
    pub const STRUCTURED_INSTRUCTION: InputFormat = InputFormat {
        style: InputStyle::Structured,
        instruction: true,
    };

    /// Short name used in config files and run records.
    pub fn name(&self) -> &'static str {
        match (self.style, self.instruction) {
            (InputStyle::Natural, false) => "natural",
            (InputStyle::Structured, false) => "structured",
            (InputStyle::Natural, true) => "natural+instruction",
            (InputStyle::Structured, true) => "structured+instruction",
        }
    }

    pub fn parse(name: &str) -> Option<InputFormat> {
        match name {
            "natural" => Some(Self::NATURAL),
            "structured" => Some(Self::STRUCTURED),
            "natural+instruction" => Some(Self::NATURAL_INSTRUCTION),
            "structured+instruction" => Some(Self::STRUCTURED_INSTRUCTION),
            _ => None,
        }
    }
}

/// Whether the text is a prompt for generation (with response scaffold) or
/// an encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateRole {
    Generation,
    Encoding,
}

/// A rendered model input with segment-end character offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub text: String,
    /// Char offset of the last character of the old segment, when present.
    pub old_segment_end: Option<usize>,
    /// Char offset of the last character of the new segment, when present.
    pub new_segment_end: Option<usize>,
}

impl EncodedInput {
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            old_segment_end: None,
            new_segment_end: None,
        }
    }
}

/// Accumulates text while tracking character (not byte) positions.
struct TextBuilder {
    text: String,
    chars: usize,
}

impl TextBuilder {
    fn new() -> Self {
        Self {
            text: String::new(),
            chars: 0,
        }
    }

    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    /// Renders `<tag> payload </tag>`; an empty payload collapses to a
    /// single space. Returns the char offset of the payload's last
    /// character (or of that space).
    fn push_tagged(&mut self, tag: &str, payload: &str) -> usize {
        self.push("<");
        self.push(tag);
        self.push(">");
        let end;
        if payload.is_empty() {
            self.push(" ");
            end = self.chars - 1;
        } else {
            self.push(" ");
            self.push(payload);
            end = self.chars - 1;
            self.push(" ");
        }
        self.push("</");
        self.push(tag);
        self.push(">");
        end
    }

    /// Renders `LABEL: payload`; returns the offset of the payload's last
    /// character (the space after the colon when the payload is empty).
    fn push_labeled(&mut self, label: &str, payload: &str) -> usize {
        self.push(label);
        self.push(": ");
        if payload.is_empty() {
            self.chars - 1
        } else {
            self.push(payload);
            self.chars - 1
        }
    }

    /// Renders a bare payload line; for an empty payload the offset points
    /// at the position the caller will fill with a separator.
    fn push_bare(&mut self, payload: &str) -> usize {
        if payload.is_empty() {
            self.chars
        } else {
            self.push(payload);
            self.chars - 1
        }
    }
}

fn payload(text: &Option<String>) -> &str {
    text.as_deref().unwrap_or("")
}

/// Renders a sample in the requested format for either a generation prompt
/// or an encoder input. Total on valid samples: absent sentences render as
/// empty segments.
pub fn build_input(
    sample: &EditSample,
    task: &TaskSpec,
    fmt: InputFormat,
    role: TemplateRole,
) -> EncodedInput {
    let mut b = TextBuilder::new();
    let mut old_end = None;
    let new_end;
    let single = task.input_arity == InputArity::Single;
    match (role, fmt.style) {
        (TemplateRole::Generation, InputStyle::Natural) => {
            if fmt.instruction {
                b.push("Instruction: ");
                b.push(&task.instruction);
                b.push("\n");
            }
            b.push("INPUT:\n");
            if single {
                new_end = Some(b.push_labeled("TEXT", payload(&sample.new_text)));
            } else {
                old_end = Some(b.push_labeled("OLD", payload(&sample.old_text)));
                b.push("\n");
                new_end = Some(b.push_labeled("NEW", payload(&sample.new_text)));
            }
            b.push("\nRESPONSE:");
        }
        (TemplateRole::Generation, InputStyle::Structured) => {
            if fmt.instruction {
                b.push("<instruction>\n");
                b.push(&task.instruction);
                b.push("\n</instruction>\n");
            }
            b.push("<input>\n");
            if single {
                new_end = Some(b.push_tagged("text", payload(&sample.new_text)));
            } else {
                old_end = Some(b.push_tagged("old", payload(&sample.old_text)));
                b.push("\n");
                new_end = Some(b.push_tagged("new", payload(&sample.new_text)));
            }
            b.push("\n</input>\n<response>");
        }
        (TemplateRole::Encoding, InputStyle::Natural) => {
            if fmt.instruction {
                b.push(&task.instruction);
                b.push("\n");
            }
            if single {
                let end = b.push_bare(payload(&sample.new_text));
                new_end = (!payload(&sample.new_text).is_empty()).then_some(end);
            } else {
                // An empty side points at the separating newline.
                old_end = Some(b.push_bare(payload(&sample.old_text)));
                b.push("\n");
                let n = payload(&sample.new_text);
                new_end = Some(if n.is_empty() {
                    b.chars - 1
                } else {
                    b.push_bare(n)
                });
            }
        }
        (TemplateRole::Encoding, InputStyle::Structured) => {
            if fmt.instruction {
                b.push(&task.instruction);
                b.push("\n");
            }
            if single {
                new_end = Some(b.push_tagged("text", payload(&sample.new_text)));
            } else {
                old_end = Some(b.push_tagged("old", payload(&sample.old_text)));
                b.push("\n");
                new_end = Some(b.push_tagged("new", payload(&sample.new_text)));
            }
        }
    }
    EncodedInput {
        text: b.text,
        old_segment_end: old_end,
        new_segment_end: new_end,
    }
}

/// Renders the two sides of a pair separately for twin-encoder prediction.
/// Only the style matters here; each side is rendered alone, and an absent
/// side renders as an empty text (natural) or an empty tagged segment
/// (structured).
pub fn build_siamese_inputs(sample: &EditSample, fmt: InputFormat) -> (EncodedInput, EncodedInput) {
    let old = match fmt.style {
        InputStyle::Natural => {
            let text = payload(&sample.old_text).to_string();
            let end = (!text.is_empty()).then(|| text.chars().count() - 1);
            EncodedInput {
                text,
                old_segment_end: end,
                new_segment_end: None,
            }
        }
        InputStyle::Structured => {
            let mut b = TextBuilder::new();
            let end = b.push_tagged("old", payload(&sample.old_text));
            EncodedInput {
                text: b.text,
                old_segment_end: Some(end),
                new_segment_end: None,
            }
        }
    };
    let new = match fmt.style {
        InputStyle::Natural => {
            let text = payload(&sample.new_text).to_string();
            let end = (!text.is_empty()).then(|| text.chars().count() - 1);
            EncodedInput {
                text,
                old_segment_end: None,
                new_segment_end: end,
            }
        }
        InputStyle::Structured => {
            let mut b = TextBuilder::new();
            let end = b.push_tagged("new", payload(&sample.new_text));
            EncodedInput {
                text: b.text,
                old_segment_end: None,
                new_segment_end: Some(end),
            }
        }
    };
    (old, new)
}

fn extract_tagged(text: &str, tag: &str) -> Option<Option<String>> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = start + text[start..].find(&close)?;
    let inner = &text[start..end];
    let stripped = inner
        .strip_prefix(' ')
        .and_then(|s| s.strip_suffix(' '))
        .unwrap_or("");
    Some(if inner == " " || stripped.is_empty() && inner.len() <= 2 {
        None
    } else {
        Some(stripped.to_string())
    })
}

/// Recovers the (old, new) payloads from an encoder input, inverting
/// [`build_input`] for pair tasks. Natural-style payloads must be
/// newline-free and structured payloads tag-free for the inversion to be
/// exact; absent sides come back as `None`.
pub fn extract_payloads(
    text: &str,
    fmt: InputFormat,
    instruction: Option<&str>,
) -> Option<(Option<String>, Option<String>)> {
    let body = if fmt.instruction {
        let inst = instruction?;
        text.strip_prefix(inst)?.strip_prefix('\n')?
    } else {
        text
    };
    match fmt.style {
        InputStyle::Natural => {
            let (old, new) = body.split_once('\n')?;
            let wrap = |s: &str| (!s.is_empty()).then(|| s.to_string());
            Some((wrap(old), wrap(new)))
        }
        InputStyle::Structured => {
            let old = extract_tagged(body, "old")?;
            let new = extract_tagged(body, "new")?;
            Some((old, new))
        }
    }
}
