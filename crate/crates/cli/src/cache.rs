//! On-disk feature cache keyed by audio content hash and extraction settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tgcritic_core::audio::load_wav;
use tgcritic_core::cqt::{CqtMatrix, CqtParams, KernelBank};
use tgcritic_core::features::{song_features, SongFeatures};
use tgcritic_core::timbre::{EmbeddingProvider, StubEmbedder, TimbreVector};

use crate::input_error;

/// Bumped whenever cached file layouts or feature code change meaning.
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheKey {
    content_sha256: String,
    params_digest: String,
    len: u64,
    mtime_ns: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimbreFile {
    pub sample_id: String,
    pub params_digest: String,
    pub timbre: TimbreVector,
}

pub struct FeatureCache {
    dir: PathBuf,
    bank: KernelBank,
    provider: StubEmbedder,
    params_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Computed,
}

fn stat(path: &Path) -> Result<(u64, u128)> {
    let meta = fs::metadata(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
    let mtime = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_nanos());
    Ok((meta.len(), mtime))
}

fn content_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let params = CqtParams::default();
        let provider = StubEmbedder::new();
        let params_digest = params_digest(&params, provider.name());
        Ok(Self {
            dir,
            bank: KernelBank::new(params)?,
            provider,
            params_digest,
        })
    }

    pub fn params_digest(&self) -> &str {
        &self.params_digest
    }

    pub fn cqt_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.cqt"))
    }

    pub fn timbre_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.timbre.json"))
    }

    fn key_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.key.json"))
    }

    fn read_key(&self, id: &str) -> Option<CacheKey> {
        let text = fs::read_to_string(self.key_path(id)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn load(&self, id: &str) -> Result<SongFeatures> {
        let cqt = CqtMatrix::read_cache(self.cqt_path(id), self.bank.params().hop_seconds())?;
        let text = fs::read_to_string(self.timbre_path(id))?;
        let file: TimbreFile = serde_json::from_str(&text)?;
        Ok(SongFeatures {
            cqt,
            timbre: file.timbre,
        })
    }

    /// Cached features when the settings match and the audio is unchanged
    /// (same size and mtime, or else the same content hash); computed otherwise.
    pub fn get(&self, id: &str, audio: &Path, force: bool) -> Result<(SongFeatures, Lookup)> {
        let (len, mtime_ns) = stat(audio)?;
        let mut hash = None;
        if !force {
            if let Some(key) = self.read_key(id) {
                let same_file = key.params_digest == self.params_digest
                    && ((key.len == len && key.mtime_ns == mtime_ns) || {
                        let h = content_hash(audio)?;
                        let same = key.content_sha256 == h;
                        hash = Some(h);
                        same
                    });
                if same_file {
                    if let Ok(f) = self.load(id) {
                        if hash.is_some() {
                            // content unchanged but touched: refresh the stat part
                            self.write_key(id, hash.clone().unwrap(), len, mtime_ns)?;
                        }
                        return Ok((f, Lookup::Hit));
                    }
                }
            }
        }
        let hash = match hash {
            Some(h) => h,
            None => content_hash(audio)?,
        };
        let clip = load_wav(audio).map_err(|e| input_error(format!("{}: {e}", audio.display())))?;
        let features = song_features(&clip, &self.bank, &self.provider)?;
        features.cqt.write_cache(self.cqt_path(id))?;
        let file = TimbreFile {
            sample_id: id.to_string(),
            params_digest: self.params_digest.clone(),
            timbre: features.timbre.clone(),
        };
        fs::write(self.timbre_path(id), serde_json::to_vec(&file)?)?;
        self.write_key(id, hash, len, mtime_ns)?;
        // re-read so callers see exactly what later cache hits will return
        Ok((self.load(id)?, Lookup::Computed))
    }

    fn write_key(&self, id: &str, content_sha256: String, len: u64, mtime_ns: u128) -> Result<()> {
        let key = CacheKey {
            content_sha256,
            params_digest: self.params_digest.clone(),
            len,
            mtime_ns,
        };
        fs::write(self.key_path(id), serde_json::to_vec(&key)?)?;
        Ok(())
    }
}

pub fn params_digest(params: &CqtParams, provider: &str) -> String {
    let text = format!("v{CACHE_VERSION}|{params:?}|{provider}");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_parameters() {
        let p = CqtParams::default();
        let mut q = p.clone();
        q.hop = 256;
        assert_eq!(params_digest(&p, "stub"), params_digest(&p, "stub"));
        assert_ne!(params_digest(&p, "stub"), params_digest(&q, "stub"));
        assert_ne!(params_digest(&p, "stub"), params_digest(&p, "other"));
    }
}
