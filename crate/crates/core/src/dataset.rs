//! Line-delimited JSON question datasets.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::types::QAItem;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    id: String,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    passages: Option<Vec<String>>,
    #[serde(default)]
    source: Option<String>,
}

/// Reads a dataset file, one JSON object per line, preserving file order.
///
/// Items without a `source` tag take the file stem as their tag.
pub fn load_dataset(path: &Path) -> Result<Vec<QAItem>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let default_source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::DataLine {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: DatasetLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let item = QAItem {
            id: raw.id,
            question: raw.question,
            gold_answers: raw.answers,
            passages: raw.passages,
            source: raw.source.unwrap_or_else(|| default_source.clone()),
        };
        item.validate().map_err(|e| bad(e.to_string()))?;
        if let Some(first) = seen.insert(item.id.clone(), lineno) {
            return Err(bad(format!(
                "duplicate id {:?} (first seen on line {first})",
                item.id
            )));
        }
        items.push(item);
    }
    Ok(items)
}

/// Writes items in the same schema `load_dataset` reads.
pub fn save_dataset(items: &[QAItem], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("dataset items serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
