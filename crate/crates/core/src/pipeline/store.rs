//! Stage directories and the files that pass between stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rsa::PromptMeta;
use crate::runtime::{ActivationRecord, HeadLocator};
use crate::tasks::DatasetId;

pub const MANIFEST: &str = "manifest.json";

/// Written last into every finished stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch; the only field that differs between reruns.
    pub created_unix: u64,
    /// Relative path → sha256 of every other file in the stage.
    pub files: BTreeMap<String, String>,
}

/// A stage being written into a scratch directory that replaces the final
/// one on [`StageWriter::commit`].
pub struct StageWriter {
    stage: String,
    config_hash: String,
    tmp: PathBuf,
    dest: PathBuf,
}

impl StageWriter {
    pub fn begin(root: &Path, stage: &str, config_hash: &str) -> Result<Self> {
        let dest = root.join(stage);
        let tmp = root.join(format!(".{stage}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            tmp,
            dest,
        })
    }

    /// Path of `name` inside the stage, creating parent directories.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.tmp.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name)?;
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(name, e))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    pub fn commit(self) -> Result<PathBuf> {
        let mut files = BTreeMap::new();
        hash_tree(&self.tmp, &self.tmp, &mut files)?;
        let manifest = StageManifest {
            stage: self.stage.clone(),
            config_hash: self.config_hash.clone(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            files,
        };
        self.write_json(MANIFEST, &manifest)?;
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| Error::io(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| Error::io(&self.dest, e))?;
        Ok(self.dest.clone())
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

fn hash_tree(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(base, &p, out)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(base).expect("inside base").to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

/// A finished stage directory.
#[derive(Debug, Clone)]
pub struct StageDir {
    pub dir: PathBuf,
}

impl StageDir {
    /// The stage's directory, or [`Error::MissingUpstream`] if it never finished.
    pub fn open(root: &Path, stage: &str) -> Result<Self> {
        let dir = root.join(stage);
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::MissingUpstream {
                stage: stage.to_string(),
                path: dir,
            });
        }
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let p = self.path(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))
    }

    pub fn manifest(&self) -> Result<StageManifest> {
        self.read_json(MANIFEST)
    }
}

/// Index of `records.f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIndex {
    pub d_model: usize,
    pub heads: Vec<HeadLocator>,
    pub prompts: Vec<PromptMeta>,
    /// Each dataset's contiguous range of prompts.
    pub datasets: Vec<(DatasetId, usize, usize)>,
}

pub const RECORDS_BIN: &str = "records.f32";
pub const RECORDS_INDEX: &str = "records.json";

/// Records as one little-endian f32 blob, prompt-major then head-major.
pub fn write_records(w: &StageWriter, index: &RecordIndex, records: &[ActivationRecord]) -> Result<()> {
    let mut bytes = Vec::with_capacity(records.len() * index.heads.len() * index.d_model * 4);
    for (r, m) in records.iter().zip(&index.prompts) {
        if r.prompt_id() != m.prompt_id || r.heads() != index.heads.as_slice() {
            return Err(Error::Analysis(format!("record {} does not match the index", r.prompt_id())));
        }
        bytes.extend(r.raw().iter().flat_map(|x| x.to_le_bytes()));
    }
    w.write_bytes(RECORDS_BIN, &bytes)?;
    w.write_json(RECORDS_INDEX, index)
}

pub fn read_records(stage: &StageDir) -> Result<(RecordIndex, Vec<ActivationRecord>)> {
    let index: RecordIndex = stage.read_json(RECORDS_INDEX)?;
    let p = stage.path(RECORDS_BIN);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let per = index.heads.len() * index.d_model;
    if bytes.len() != per * index.prompts.len() * 4 {
        return Err(Error::Checksum {
            name: p.display().to_string(),
            reason: format!("expected {} bytes, found {}", per * index.prompts.len() * 4, bytes.len()),
        });
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let records = index
        .prompts
        .iter()
        .zip(floats.chunks_exact(per.max(1)))
        .map(|(m, data)| ActivationRecord::new(&m.prompt_id, index.d_model, index.heads.clone(), data.to_vec(), None))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, records))
}
