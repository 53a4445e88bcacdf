//! JSONL reading and writing.
//!
//! One sample per line. Blank lines and lines whose first non-blank
//! character is `#` are skipped, which lets bundled fixtures carry a
//! descriptive header.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, FewShotExample, GuidedSample, Provenance, Sample, ToolCall, ToolSpec};

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    query: String,
    tools: Vec<ToolSpec>,
    ground_truth: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    exemplars: Vec<FewShotExample>,
    #[serde(default)]
    provenance: Provenance,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: Record = serde_json::from_str(trimmed)
            .map_err(|e| DatasetError::Malformed { line, message: e.to_string() })?;
        let sample = Sample {
            id: record.id,
            query: record.query,
            tools: record.tools,
            ground_truth: record.ground_truth,
        };
        sample.validate().map_err(|source| DatasetError::Invalid { line, source })?;
        if !ids.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: sample.id });
        }
        let guided = GuidedSample::with_exemplars(sample, record.exemplars, record.provenance)
            .map_err(|source| DatasetError::Invalid { line, source })?;
        samples.push(guided);
    }
    Ok(Dataset { samples })
}

/// Serializes `dataset` as JSONL, one canonical record per line.
pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    for s in dataset.samples() {
        let record = Record {
            id: s.base.id.clone(),
            query: s.base.query.clone(),
            tools: s.base.tools.clone(),
            ground_truth: s.base.ground_truth.clone(),
            exemplars: s.exemplars().to_vec(),
            provenance: s.provenance(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}
