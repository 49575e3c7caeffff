//! Append-only persistence for prediction records and raw generations.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::PredictionRecord;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const RAW_FILE: &str = "raw.jsonl";

#[derive(Debug, thiserror::Error)]
#[error("{path}: {source}")]
pub struct StoreError {
    pub path: String,
    #[source]
    pub source: std::io::Error,
}

/// One raw model generation, referenced from records by `key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntry {
    pub key: String,
    pub instance_id: String,
    pub run_index: u32,
    pub stage: String,
    pub text: String,
    pub request_fingerprint: String,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

pub type RecordKey = (String, u32, String);

pub fn record_key(r: &PredictionRecord) -> RecordKey {
    (r.instance_id.clone(), r.run_index, r.config_fingerprint.clone())
}

#[derive(Debug, Clone)]
pub struct RecordStore {
    dir: PathBuf,
}

impl RecordStore {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|source| StoreError { path: dir.display().to_string(), source })?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join(RECORDS_FILE)
    }

    pub fn raw_path(&self) -> PathBuf {
        self.dir.join(RAW_FILE)
    }

    pub fn append_record(&self, record: &PredictionRecord) -> Result<(), StoreError> {
        append_json_line(&self.records_path(), record)
    }

    pub fn append_raw(&self, entry: &RawEntry) -> Result<(), StoreError> {
        append_json_line(&self.raw_path(), entry)
    }

    /// Every stored record in file order.
    pub fn load_all(&self) -> Result<Vec<PredictionRecord>, StoreError> {
        read_records(&self.records_path())
    }

    /// The last stored record for every key, in order of first appearance.
    pub fn latest(&self) -> Result<Vec<PredictionRecord>, StoreError> {
        Ok(latest_by_key(self.load_all()?))
    }

    pub fn load_raw(&self) -> Result<Vec<RawEntry>, StoreError> {
        read_json_lines(&self.raw_path())
    }
}

pub fn latest_by_key(records: Vec<PredictionRecord>) -> Vec<PredictionRecord> {
    let mut index: HashMap<RecordKey, usize> = HashMap::new();
    let mut out: Vec<PredictionRecord> = Vec::new();
    for r in records {
        match index.get(&record_key(&r)) {
            Some(&i) => out[i] = r,
            None => {
                index.insert(record_key(&r), out.len());
                out.push(r);
            }
        }
    }
    out
}

/// Reads a records file; a missing file yields no records and unparseable
/// lines (e.g. a torn final write) are skipped with a warning.
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, StoreError> {
    read_json_lines(path)
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let err = |source| StoreError { path: path.display().to_string(), source };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(err(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(e) => log::warn!("{}:{}: skipping unreadable line: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Appends one JSON line with a single write call.
fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let err = |source| StoreError { path: path.display().to_string(), source };
    let mut line = serde_json::to_vec(value).map_err(|e| err(std::io::Error::other(e)))?;
    line.push(b'\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
    file.write_all(&line).map_err(err)
}
