use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::fft::Fft;
use super::AudioClip;
use crate::{Error, Result};

/// Log-mel front-end geometry.
///
/// Defaults give 10 s at 32 kHz → 128 mel bands × 256 frames, hop 1250,
/// window 3125 (2.5 × hop), FFT size 4096.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub duration: f64,
    pub n_mels: usize,
    pub n_time_bins: usize,
    pub hop: usize,
    pub win: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 32000,
            duration: 10.0,
            n_mels: 128,
            n_time_bins: 256,
            hop: 1250,
            win: 3125,
            fft_size: 4096,
            fmin: 0.0,
            fmax: 16000.0,
            log_floor: 1e-8,
        }
    }
}

/// `round(2.5 · hop)`, half-up.
pub(crate) fn window_for_hop(hop: usize) -> usize {
    (5 * hop).div_ceil(2)
}

impl MelConfig {
    /// Derive hop, window and FFT size from the clip geometry, keeping the
    /// window at 2.5 hops and `duration · sample_rate = hop · n_time_bins`.
    /// `fmax` is set to Nyquist.
    pub fn from_geometry(sample_rate: u32, duration: f64, n_mels: usize, n_time_bins: usize) -> Result<Self> {
        if n_time_bins == 0 {
            return Err(Error::InvalidConfig("n_time_bins must be positive".into()));
        }
        let total = libm::round(duration * sample_rate as f64) as usize;
        if total == 0 || !total.is_multiple_of(n_time_bins) {
            return Err(Error::InvalidConfig(format!(
                "clip length {total} samples is not a multiple of n_time_bins {n_time_bins}"
            )));
        }
        let hop = total / n_time_bins;
        let win = window_for_hop(hop);
        let cfg = MelConfig {
            sample_rate,
            duration,
            n_mels,
            n_time_bins,
            hop,
            win,
            fft_size: win.next_power_of_two(),
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            log_floor: 1e-8,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clip_len(&self) -> usize {
        libm::round(self.duration * self.sample_rate as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.n_mels == 0 || self.n_time_bins == 0 || self.hop == 0 {
            return bad("n_mels, n_time_bins and hop must be positive".into());
        }
        if self.win != window_for_hop(self.hop) {
            return bad(format!(
                "win must equal round(2.5 * hop) = {}, got {}",
                window_for_hop(self.hop),
                self.win
            ));
        }
        if self.fft_size < self.win || !self.fft_size.is_power_of_two() {
            return bad(format!(
                "fft_size must be a power of two >= win ({}), got {}",
                self.win, self.fft_size
            ));
        }
        if self.clip_len() != self.hop * self.n_time_bins {
            return bad(format!(
                "duration * sample_rate ({}) must equal hop * n_time_bins ({})",
                self.clip_len(),
                self.hop * self.n_time_bins
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus divisibility of both spectrogram
    /// dimensions by `patch_side`.
    pub fn validate_for_patches(&self, patch_side: usize) -> Result<()> {
        self.validate()?;
        if patch_side == 0 {
            return Err(Error::InvalidConfig("patch side must be positive".into()));
        }
        if !self.n_mels.is_multiple_of(patch_side) {
            return Err(Error::NotDivisible {
                axis: "n_mels",
                dim: self.n_mels,
                side: patch_side,
            });
        }
        if !self.n_time_bins.is_multiple_of(patch_side) {
            return Err(Error::NotDivisible {
                axis: "n_time_bins",
                dim: self.n_time_bins,
                side: patch_side,
            });
        }
        Ok(())
    }
}

/// Normalized log-mel spectrogram, row-major `[n_mels × n_time_bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub(crate) values: Vec<f32>,
    pub(crate) n_mels: usize,
    pub(crate) n_time_bins: usize,
    pub(crate) config: Option<MelConfig>,
    pub(crate) silent: bool,
}

impl MelSpectrogram {
    /// Wrap raw values; used for spectrograms that did not come from audio.
    pub fn from_values(n_mels: usize, n_time_bins: usize, values: Vec<f32>) -> Result<Self> {
        if n_mels * n_time_bins != values.len() || values.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{n_mels} x {n_time_bins} spectrogram cannot hold {} values",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "spectrogram",
                index,
            });
        }
        Ok(MelSpectrogram {
            values,
            n_mels,
            n_time_bins,
            config: None,
            silent: false,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_time_bins(&self) -> usize {
        self.n_time_bins
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_time_bins + frame]
    }

    pub fn config(&self) -> Option<&MelConfig> {
        self.config.as_ref()
    }

    /// True when the clip had (numerically) zero spread before normalization,
    /// in which case the values were centred but not scaled.
    pub fn is_silent(&self) -> bool {
        self.silent
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular HTK filterbank, `n_mels` rows of `fft_size / 2 + 1` weights
/// (peak 1, no area normalization). Also returns the filter centres in Hz.
pub fn mel_filterbank(config: &MelConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n_bins = config.fft_size / 2 + 1;
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax);
    let points: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
    let mut rows = Vec::with_capacity(config.n_mels);
    for m in 0..config.n_mels {
        let (left, centre, right) = (points[m], points[m + 1], points[m + 2]);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                let up = (f - left) / (centre - left);
                let down = (right - f) / (right - centre);
                up.min(down).max(0.0)
            })
            .collect();
        if !row.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer mel bands or a larger fft_size"
            )));
        }
        rows.push(row);
    }
    Ok((rows, points[1..=config.n_mels].to_vec()))
}

/// STFT → power → mel → `ln(power + log_floor)` → per-instance
/// standardization.
///
/// The clip is zero-padded by `(win - hop) / 2` samples on the left and the
/// remainder on the right (937 / 938 at the defaults), which yields exactly
/// `len / hop` frames of a periodic Hann window.
pub fn mel_spectrogram(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if clip.sample_rate() != config.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "clip is at {} Hz, configuration expects {} Hz",
            clip.sample_rate(),
            config.sample_rate
        )));
    }
    let expected = config.hop * config.n_time_bins;
    if clip.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: clip.len(),
        });
    }
    let (filters, _) = mel_filterbank(config)?;
    // Each triangle is non-zero on a short contiguous run of bins.
    let spans: Vec<(usize, &[f64])> = filters
        .iter()
        .map(|row| {
            let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            (first, &row[first..=last])
        })
        .collect();
    let fft = Fft::new(config.fft_size)?;
    let window: Vec<f64> = (0..config.win)
        .map(|n| 0.5 - 0.5 * libm::cos(2.0 * PI * n as f64 / config.win as f64))
        .collect();
    let pad_left = (config.win - config.hop) / 2;
    let samples = clip.samples();

    let n_frames = config.n_time_bins;
    let mut logmel = vec![0.0f64; config.n_mels * n_frames];
    let mut frame = vec![0.0f64; config.win];
    for t in 0..n_frames {
        let start = (t * config.hop) as isize - pad_left as isize;
        for (n, slot) in frame.iter_mut().enumerate() {
            let idx = start + n as isize;
            let x = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize] as f64
            } else {
                0.0
            };
            *slot = x * window[n];
        }
        let power = fft.power_spectrum(&frame);
        for (m, &(first, weights)) in spans.iter().enumerate() {
            let energy: f64 = weights.iter().zip(&power[first..]).map(|(w, p)| w * p).sum();
            logmel[m * n_frames + t] = libm::log(energy + config.log_floor);
        }
    }

    // Shifted mean: exact for constant inputs, so silent clips map to 0.
    let n = logmel.len() as f64;
    let pivot = logmel[0];
    let mean = pivot + logmel.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = logmel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    let silent = std < 1e-12;
    let scale = if silent { 1.0 } else { std };
    let values = logmel.iter().map(|v| ((v - mean) / scale) as f32).collect();

    Ok(MelSpectrogram {
        values,
        n_mels: config.n_mels,
        n_time_bins: n_frames,
        config: Some(config.clone()),
        silent,
    })
}
