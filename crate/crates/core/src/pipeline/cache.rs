use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::PairScore;

/// Identity of one scored pair; any change to a component is a cache miss.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairKey {
    pub query_id: String,
    pub candidate_id: String,
    /// Scoring mode and its parameters, e.g. `uasc:n=5:lambda=0.5:...`.
    pub mode: String,
    /// Model name plus endpoint.
    pub model: String,
    pub prompt_hash: String,
}

impl PairKey {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            &self.query_id,
            &self.candidate_id,
            &self.mode,
            &self.model,
            &self.prompt_hash,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One JSON file per scored pair under a directory.
///
/// Writes go through a temporary file and a rename, so a reader sees
/// either nothing or a complete record even if the run is killed mid-write.
#[derive(Debug)]
pub struct PairCache {
    dir: PathBuf,
    hits: AtomicU64,
    writes: AtomicU64,
}

impl PairCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(PairCache {
            dir,
            hits: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &PairKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    /// Returns the stored score, or `None` on a miss. Unreadable entries
    /// count as misses and are overwritten by the next store.
    pub fn load(&self, key: &PairKey) -> Option<PairScore> {
        let path = self.path_for(key);
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<PairScore>(&text) {
            Ok(score) if score.query_id == key.query_id && score.candidate_id == key.candidate_id => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(score)
            }
            Ok(_) => {
                tracing::warn!(path = %path.display(), "cache entry belongs to another pair; ignoring");
                None
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable cache entry; ignoring");
                None
            }
        }
    }

    pub fn store(&self, key: &PairKey, score: &PairScore) -> io::Result<()> {
        let path = self.path_for(key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key.digest(),
            std::process::id(),
            rand::random::<u32>()
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, score).map_err(io::Error::other)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }
}
