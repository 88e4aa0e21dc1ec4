//! JSON-lines readers and writers for the three corpus record shapes:
//! edit pairs, single-text samples, and document revisions.
//!
//! One JSON object per line. Loaders report malformed lines with file and
//! line number; writers emit one canonical line per record so that
//! load -> emit -> load is the identity (key order aside, emission is
//! byte-stable because field order is fixed by the types).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorpusError, DocumentRevision, EditSample, LabelSet};

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            path: path.display().to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        records.push((lineno, record));
    }
    Ok(records)
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    for record in records {
        let line = serde_json::to_string(record).expect("corpus records serialize");
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Loads edit-pair samples, validating each against `labels` when given.
pub fn load_edits(path: &Path, labels: Option<&LabelSet>) -> Result<Vec<EditSample>, CorpusError> {
    let records = read_records::<EditSample>(path)?;
    let mut samples = Vec::with_capacity(records.len());
    for (lineno, sample) in records {
        sample.validate(labels).map_err(|e| CorpusError::Line {
            path: path.display().to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
struct SingleRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Loads single-text samples (`{id, text, label}` lines). The text is
/// stored on the sample's `new` side.
pub fn load_singles(
    path: &Path,
    labels: Option<&LabelSet>,
) -> Result<Vec<EditSample>, CorpusError> {
    let records = read_records::<SingleRecord>(path)?;
    let mut samples = Vec::with_capacity(records.len());
    for (lineno, record) in records {
        let mut sample = EditSample::single(record.id, record.text);
        sample.intent = record.label;
        sample.validate(labels).map_err(|e| CorpusError::Line {
            path: path.display().to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Loads document revisions (sentence lists plus optional domain and review
/// decisions). Documents must have at least one sentence on either side.
pub fn load_revisions(path: &Path) -> Result<Vec<DocumentRevision>, CorpusError> {
    let records = read_records::<DocumentRevision>(path)?;
    let mut docs = Vec::with_capacity(records.len());
    for (lineno, doc) in records {
        if doc.old_sentences.is_empty() && doc.new_sentences.is_empty() {
            return Err(CorpusError::Line {
                path: path.display().to_string(),
                line: lineno,
                message: format!("document {} has no sentences in either version", doc.doc_id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes edit samples, one JSON object per line.
pub fn emit_edits(path: &Path, samples: &[EditSample]) -> Result<(), CorpusError> {
    write_records(path, samples)
}

/// Writes single-text samples, one JSON object per line. Samples must carry
/// their text on the `new` side (as [`load_singles`] produces).
pub fn emit_singles(path: &Path, samples: &[EditSample]) -> Result<(), CorpusError> {
    let records: Vec<SingleRecord> = samples
        .iter()
        .map(|s| SingleRecord {
            id: s.edit_id.clone(),
            text: s.new_text.clone().unwrap_or_default(),
            label: s.intent.clone(),
        })
        .collect();
    write_records(path, &records)
}

/// Writes document revisions, one JSON object per line.
pub fn emit_revisions(path: &Path, docs: &[DocumentRevision]) -> Result<(), CorpusError> {
    write_records(path, docs)
}
