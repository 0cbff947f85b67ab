//! Line-delimited JSON record files with a schema header.
//!
//! The first line is `{"schema": <name>, "version": <n>}`; every following
//! line is one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("expected schema {want:?} v{SCHEMA_VERSION}, found {found:?} v{version}")]
    Schema { want: String, found: String, version: u32 },
    #[error("missing schema header")]
    MissingHeader,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

pub fn write_records<T: Serialize, W: Write>(mut w: W, schema: &str, records: &[T]) -> Result<(), RecordError> {
    let header = Header {
        schema: schema.to_string(),
        version: SCHEMA_VERSION,
    };
    let line = |i, r: serde_json::Result<String>| r.map_err(|source| RecordError::Json { line: i, source });
    writeln!(w, "{}", line(1, serde_json::to_string(&header))?)?;
    for (i, r) in records.iter().enumerate() {
        writeln!(w, "{}", line(i + 2, serde_json::to_string(r))?)?;
    }
    Ok(())
}

pub fn read_records<T: DeserializeOwned, R: BufRead>(r: R, schema: &str) -> Result<Vec<T>, RecordError> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(RecordError::MissingHeader)??;
    let header: Header = serde_json::from_str(&first).map_err(|source| RecordError::Json { line: 1, source })?;
    if header.schema != schema || header.version != SCHEMA_VERSION {
        return Err(RecordError::Schema {
            want: schema.to_string(),
            found: header.schema,
            version: header.version,
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| RecordError::Json { line: i + 2, source })?);
    }
    Ok(out)
}

pub fn save_records<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), RecordError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, schema, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_records<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, RecordError> {
    read_records(BufReader::new(File::open(path)?), schema)
}
