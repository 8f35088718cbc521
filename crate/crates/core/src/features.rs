//! Song-level network inputs: the log-CQT and the aggregated timbre vector.

use thiserror::Error;

use crate::audio::{resample, AudioClip, AudioError, TARGET_RATE};
use crate::cqt::{compute_cqt, CqtError, CqtMatrix, KernelBank};
use crate::timbre::{build_timbregram, timbre_vector, EmbeddingProvider, TimbreError, TimbreVector};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Cqt(#[from] CqtError),
    #[error(transparent)]
    Timbre(#[from] TimbreError),
}

#[derive(Debug, Clone)]
pub struct SongFeatures {
    pub cqt: CqtMatrix,
    pub timbre: TimbreVector,
}

/// Resamples to 16 kHz, then computes the log-CQT and the timbre vector
/// (flagged zero vector when no window is voiced).
pub fn song_features(
    clip: &AudioClip,
    bank: &KernelBank,
    provider: &dyn EmbeddingProvider,
) -> Result<SongFeatures, FeatureError> {
    let clip = resample(clip, TARGET_RATE)?;
    let cqt = compute_cqt(&clip, bank)?;
    let gram = build_timbregram(&clip, provider)?;
    Ok(SongFeatures {
        cqt,
        timbre: timbre_vector(&gram)?,
    })
}
