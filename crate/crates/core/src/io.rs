//! JSON file helpers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Query;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| Error::Schema { path: path.display().to_string(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Schema { path: path.display().to_string(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// A set of queries sharing one embedding dimension.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(try_from = "WorkloadRecord")]
pub struct Workload {
    pub dim: usize,
    pub queries: Vec<Query>,
}

#[derive(serde::Deserialize)]
struct WorkloadRecord {
    dim: usize,
    queries: Vec<Query>,
}

impl TryFrom<WorkloadRecord> for Workload {
    type Error = Error;

    fn try_from(r: WorkloadRecord) -> Result<Self> {
        Workload::new(r.dim, r.queries)
    }
}

impl Workload {
    pub fn new(dim: usize, queries: Vec<Query>) -> Result<Self> {
        for q in &queries {
            if q.embedding.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: q.embedding.len() });
            }
        }
        let mut ids = std::collections::HashSet::new();
        if let Some(q) = queries.iter().find(|q| !ids.insert(q.id.as_str())) {
            return Err(Error::invalid(format!("duplicate query id {}", q.id)));
        }
        Ok(Workload { dim, queries })
    }
}
