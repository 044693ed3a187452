//! Ingestion of externally annotated driving clips (text and control
//! signals only; no pixels required). One JSON object per line.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    /// What the vehicle does ("narration").
    pub action: String,
    /// Why it does it ("reasoning").
    pub justification: String,
    /// 1 Hz speed samples covering [start_s, end_s].
    pub speed: Vec<f64>,
    /// 1 Hz course samples covering the same span.
    pub course: Vec<f64>,
}

/// Parse a JSONL annotation file. Malformed lines are hard errors carrying
/// the line number; signal arrays whose length disagrees with the declared
/// duration produce a warning but the record is kept (documented policy:
/// text-side uses tolerate sloppy signal logs).
pub fn ingest_annotations(
    path: &Path,
) -> Result<(Vec<AnnotationRecord>, Vec<String>), HarnessError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Annotation { line: lineno, reason: e.to_string() })?;
        if !(record.end_s > record.start_s) {
            return Err(HarnessError::Annotation {
                line: lineno,
                reason: format!("end_s {} must exceed start_s {}", record.end_s, record.start_s),
            });
        }
        let expected = (record.end_s - record.start_s).round() as usize + 1;
        for (name, len) in [("speed", record.speed.len()), ("course", record.course.len())] {
            if len != expected {
                warnings.push(format!(
                    "line {lineno}: {name} has {len} samples, duration implies {expected}; record kept"
                ));
            }
        }
        records.push(record);
    }
    Ok((records, warnings))
}
