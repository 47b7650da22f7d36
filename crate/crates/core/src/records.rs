//! Versioned JSONL persistence for audit records.
//!
//! The first line of a record file is a header object
//! `{"format":"delusion-audit-records","version":1}`; every following line
//! is one [`AuditRecord`]. Optional numbers are written as `null`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AuditRecord;

pub const RECORD_FORMAT: &str = "delusion-audit-records";
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn save_records(records: &[AuditRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: RECORD_FORMAT.into(),
        version: RECORD_VERSION,
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("record {}: {e}", r.item.id)))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_records(path: &Path) -> Result<Vec<AuditRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |line: usize, message: String| Error::DataLine {
        path: path.to_path_buf(),
        line,
        message,
    };

    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| bad(1, format!("bad header: {e}")))?
        }
        None => return Err(bad(1, "missing header line".into())),
    };
    if header.format != RECORD_FORMAT {
        return Err(bad(1, format!("unknown record format {:?}", header.format)));
    }
    if header.version != RECORD_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: RECORD_VERSION,
        });
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AuditRecord =
            serde_json::from_str(&line).map_err(|e| bad(idx + 1, e.to_string()))?;
        rec.check().map_err(|e| bad(idx + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
