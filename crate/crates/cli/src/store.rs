//! Directory-backed project store: JSON documents, columnar draw files and an
//! append-only run log.
//!
//! ```text
//! inputs/{sha256}.csv      raw ingested files
//! songs/{song}.json        translated curves
//! fits/{fit}/fit.json      fit summary
//! fits/{fit}/model.json    data, priors and sampler settings of a Bayesian fit
//! fits/{fit}/draws/        columnar posterior draws
//! plans/{plan}.json
//! clusters/{id}.json
//! runlog.jsonl
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use songdemand_core::bayes::draws::{read_columnar, BlockAcceptance};
use songdemand_core::bayes::{FittedModel, PosteriorDraws};

use crate::config::sha256_hex;
use crate::error::{AppError, AppResult};
use crate::ops::{ClusterDocument, FitDocument, Operation, PlanDocument};
use crate::ingest::SongSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongDocument {
    /// Hash of the input file the song was read from.
    pub source: String,
    #[serde(flatten)]
    pub series: SongSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    /// ISO-8601 UTC.
    pub recorded_at: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub operation: Operation,
    /// Ids of the documents the operation wrote.
    pub produced: Vec<String>,
}

pub struct ProjectStore {
    root: PathBuf,
    writer: Mutex<()>,
}

const DIRS: [&str; 5] = ["inputs", "songs", "fits", "plans", "clusters"];

/// Ids become file names, so they are restricted to a portable alphabet.
pub fn check_id(id: &str) -> AppResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(AppError::Validation(format!(
            "id `{id}` must be 1-128 letters, digits, '.', '_' or '-' and not start with '.'"
        )))
    }
}

fn encode<T: Serialize>(value: &T) -> AppResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| AppError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> AppResult<Self> {
        let root = root.into();
        for d in DIRS {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self { root, writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Held for the whole of a mutating operation.
    pub fn write_lock(&self) -> MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn write_atomic(&self, rel: &Path, bytes: &[u8]) -> AppResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Writes a document. An existing file with other contents is a conflict
    /// unless `replace` is set.
    fn put(&self, rel: &Path, bytes: &[u8], replace: bool) -> AppResult<()> {
        let path = self.root.join(rel);
        if !replace {
            match fs::read(&path) {
                Ok(existing) if existing == bytes => return Ok(()),
                Ok(_) => {
                    return Err(AppError::Conflict(format!(
                        "{} already exists with different contents",
                        rel.display()
                    )))
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.write_atomic(rel, bytes)
    }

    fn get<T: DeserializeOwned>(&self, rel: &Path, what: &str) -> AppResult<T> {
        match fs::read(self.root.join(rel)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| AppError::Internal(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(AppError::NotFound(what.into())),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, dir: &str, suffix: Option<&str>) -> AppResult<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join(dir))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            match suffix {
                Some(s) => {
                    if let Some(stem) = name.strip_suffix(s) {
                        out.push(stem.to_string());
                    }
                }
                None => out.push(name),
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn put_input(&self, bytes: &[u8]) -> AppResult<String> {
        let sha = sha256_hex(bytes);
        self.put(&Path::new("inputs").join(format!("{sha}.csv")), bytes, false)?;
        Ok(sha)
    }

    pub fn input(&self, sha: &str) -> AppResult<Vec<u8>> {
        check_id(sha)?;
        match fs::read(self.root.join("inputs").join(format!("{sha}.csv"))) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(AppError::NotFound(format!("input {sha}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn put_song(&self, doc: &SongDocument, replace: bool) -> AppResult<()> {
        check_id(&doc.series.song_id)?;
        let rel = Path::new("songs").join(format!("{}.json", doc.series.song_id));
        self.put(&rel, &encode(doc)?, replace)
    }

    pub fn song(&self, id: &str) -> AppResult<SongDocument> {
        check_id(id)?;
        self.get(&Path::new("songs").join(format!("{id}.json")), &format!("song {id}"))
    }

    pub fn song_ids(&self) -> AppResult<Vec<String>> {
        self.list("songs", Some(".json"))
    }

    pub fn put_fit(&self, doc: &FitDocument, draws: Option<&PosteriorDraws>) -> AppResult<()> {
        check_id(&doc.fit_id)?;
        let dir = Path::new("fits").join(&doc.fit_id);
        if let Some(d) = draws {
            self.write_atomic(&dir.join("model.json"), &encode(&d.model)?)?;
            d.write_columnar(&self.root.join(&dir).join("draws"))?;
        }
        self.put(&dir.join("fit.json"), &encode(doc)?, false)
    }

    pub fn fit(&self, id: &str) -> AppResult<FitDocument> {
        check_id(id)?;
        self.get(&Path::new("fits").join(id).join("fit.json"), &format!("fit {id}"))
    }

    pub fn fit_ids(&self) -> AppResult<Vec<String>> {
        self.list("fits", None)
    }

    /// Posterior draws of a Bayesian fit, with diagnostics recomputed.
    pub fn fit_draws(&self, id: &str, acceptance: Vec<BlockAcceptance>) -> AppResult<PosteriorDraws> {
        let dir = Path::new("fits").join(id);
        let model: FittedModel = self.get(&dir.join("model.json"), &format!("draws of fit {id}"))?;
        let (names, chains) = read_columnar(&self.root.join(&dir).join("draws"))?;
        Ok(PosteriorDraws::from_parts(names, chains, acceptance, model)?)
    }

    pub fn put_plan(&self, doc: &PlanDocument) -> AppResult<()> {
        check_id(&doc.plan_id)?;
        self.put(&Path::new("plans").join(format!("{}.json", doc.plan_id)), &encode(doc)?, false)
    }

    pub fn plan(&self, id: &str) -> AppResult<PlanDocument> {
        check_id(id)?;
        self.get(&Path::new("plans").join(format!("{id}.json")), &format!("plan {id}"))
    }

    pub fn put_clustering(&self, doc: &ClusterDocument) -> AppResult<()> {
        check_id(&doc.clustering_id)?;
        let rel = Path::new("clusters").join(format!("{}.json", doc.clustering_id));
        self.put(&rel, &encode(doc)?, false)
    }

    pub fn clustering(&self, id: &str) -> AppResult<ClusterDocument> {
        check_id(id)?;
        self.get(&Path::new("clusters").join(format!("{id}.json")), &format!("clustering {id}"))
    }

    pub fn append_log(
        &self,
        operation: &Operation,
        seed: Option<u64>,
        config_hash: String,
        produced: Vec<String>,
    ) -> AppResult<LogEntry> {
        let seq = self.log()?.len() as u64;
        let entry = LogEntry {
            seq,
            recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            seed,
            config_hash,
            operation: operation.clone(),
            produced,
        };
        let mut line = serde_json::to_vec(&entry).map_err(|e| AppError::Internal(e.to_string()))?;
        line.push(b'\n');
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("runlog.jsonl"))?;
        file.write_all(&line)?;
        Ok(entry)
    }

    pub fn log(&self) -> AppResult<Vec<LogEntry>> {
        let raw = match fs::read_to_string(self.root.join("runlog.jsonl")) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| AppError::Internal(format!("run log: {e}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_restricted() {
        assert!(check_id("song-a_1.2").is_ok());
        for bad in ["", "../x", ".hidden", "a/b", "a b"] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn differing_rewrite_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::open(dir.path()).unwrap();
        let rel = Path::new("plans/x.json");
        store.put(rel, b"1", false).unwrap();
        store.put(rel, b"1", false).unwrap();
        assert!(matches!(store.put(rel, b"2", false), Err(AppError::Conflict(_))));
        store.put(rel, b"2", true).unwrap();
        assert!(matches!(store.song("nope"), Err(AppError::NotFound(_))));
    }
}
