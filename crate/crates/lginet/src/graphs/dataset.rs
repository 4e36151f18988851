//! JSONL dataset IO: one object per (sentence, aspect) pair. A sentence
//! with several aspects appears as several lines.

use super::ParseSample;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn read_jsonl(path: &Path) -> Result<Vec<ParseSample>> {
    let text = fs::read_to_string(path)?;
    read_jsonl_str(&text)
}

pub fn read_jsonl_str(text: &str) -> Result<Vec<ParseSample>> {
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ParseSample = serde_json::from_str(line)
            .map_err(|e| Error::format(lineno, format!("bad sample: {e}")))?;
        sample
            .validate()
            .map_err(|e| Error::format(lineno, e.to_string()))?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::format(0, "dataset contains no samples"));
    }
    Ok(samples)
}

pub fn write_jsonl(path: &Path, samples: &[ParseSample]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
