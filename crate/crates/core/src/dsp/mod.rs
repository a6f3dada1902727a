//! Waveform to patch-sequence front end.
//!
//! `AudioClip` → [`resample`] → [`fit_duration`] → [`mel_spectrogram`] →
//! [`patchify`]. Every stage is a pure function.

mod audio;
pub mod fft;
mod mel;
mod patch;

pub use audio::{fit_duration, resample, AudioClip};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelConfig, MelSpectrogram};
pub use patch::{patchify, unpatchify, PatchGrid};

use crate::Result;

/// Full front end for one clip: resample to the configured rate, crop or pad
/// to the configured duration, compute the normalized log-mel spectrogram and
/// cut it into patches.
pub fn clip_to_patches(clip: &AudioClip, config: &MelConfig, patch_side: usize) -> Result<PatchGrid> {
    config.validate_for_patches(patch_side)?;
    let clip = resample(clip, config.sample_rate)?;
    let clip = fit_duration(&clip, config.duration)?;
    let spec = mel_spectrogram(&clip, config)?;
    patchify(&spec, patch_side)
}
