use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QueryMode, QueryResult, QueryService};
use crate::datasets::Dataset;
use crate::error::{Error, Result};

const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    version: u32,
    dataset_fp: String,
    oracle_fp: String,
    mode: QueryMode,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    id: String,
    result: QueryResult,
}

/// Oracle answers for a whole dataset, keyed by example id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResults {
    pub mode: QueryMode,
    pub num_classes: usize,
    pub results: BTreeMap<String, QueryResult>,
    /// Queries actually issued to build this set (0 on a warm cache).
    #[serde(skip)]
    pub issued: usize,
}

impl QueryResults {
    pub fn get(&self, id: &str) -> Result<&QueryResult> {
        self.results
            .get(id)
            .ok_or_else(|| Error::MissingQuery(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

/// Query every example of `dataset` once. With a cache path, answers already
/// on disk are reused and new ones are appended, so a warm rerun issues no
/// queries at all.
pub fn query_dataset(
    service: &dyn QueryService,
    dataset: &Dataset,
    mode: QueryMode,
    cache: Option<&Path>,
) -> Result<QueryResults> {
    mode.validate(service.num_classes())?;
    let header = CacheHeader {
        version: CACHE_VERSION,
        dataset_fp: dataset.fingerprint(),
        oracle_fp: service.fingerprint(),
        mode,
    };
    let mut results = match cache {
        Some(path) if path.exists() => read_cache(path, &header)?,
        _ => BTreeMap::new(),
    };
    let mut writer = match cache {
        Some(path) => Some(open_for_append(path, &header)?),
        None => None,
    };

    let mut issued = 0;
    for ex in dataset.examples() {
        if results.contains_key(ex.id()) {
            continue;
        }
        let result = service.query_with_id(ex.id(), ex.input(), mode)?;
        issued += 1;
        if let (Some(w), Some(path)) = (writer.as_mut(), cache) {
            let record = CacheRecord {
                id: ex.id().to_string(),
                result: result.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path, e))?;
        }
        results.insert(ex.id().to_string(), result);
    }
    if let (Some(w), Some(path)) = (writer.as_mut(), cache) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let wanted: HashSet<&str> = dataset.ids().collect();
    results.retain(|id, _| wanted.contains(id.as_str()));
    log::info!(
        "oracle: {} cached, {issued} queried",
        results.len().saturating_sub(issued)
    );
    Ok(QueryResults {
        mode,
        num_classes: service.num_classes(),
        results,
        issued,
    })
}

/// Delete a cache file so it can be rebuilt under a different mode.
pub fn invalidate_cache(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_cache(path: &Path, expected: &CacheHeader) -> Result<BTreeMap<String, QueryResult>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let Some(first) = lines.next() else {
        return Ok(BTreeMap::new());
    };
    let header: CacheHeader = serde_json::from_str(&first.map_err(|e| Error::io(path, e))?)?;
    if header.mode != expected.mode {
        return Err(Error::CacheMismatch(format!(
            "{} was recorded in {:?} mode but {:?} was requested; invalidate it explicitly",
            path.display(),
            header.mode,
            expected.mode
        )));
    }
    if header != *expected {
        return Err(Error::CacheMismatch(format!(
            "{} belongs to a different dataset or oracle; invalidate it explicitly",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord = serde_json::from_str(&line)?;
        if record.result.mode != expected.mode {
            return Err(Error::CacheMismatch(format!(
                "record `{}` has mode {:?}",
                record.id, record.result.mode
            )));
        }
        out.insert(record.id, record.result);
    }
    Ok(out)
}

fn open_for_append(path: &Path, header: &CacheHeader) -> Result<File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(file, "{}", serde_json::to_string(header)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(file)
}
