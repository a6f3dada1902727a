use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::{Error, Result};

/// Mono waveform. Samples are nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "audio samples",
                index,
            });
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

// Zero crossings of the sinc kernel on each side, measured at the lower of
// the two rates.
const SINC_ZEROS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;

fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 1.0;
    loop {
        term *= (half / m) * (half / m);
        sum += term;
        if term < 1e-17 * sum {
            return sum;
        }
        m += 1.0;
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// The kernel cutoff sits at the lower of the two Nyquist frequencies. Output
/// length is `round(len · target / source)`; samples outside the input are
/// treated as zero.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    let src = clip.sample_rate as u64;
    let dst = target_rate as u64;
    if src == dst {
        return Ok(clip.clone());
    }
    let n_in = clip.samples.len();
    let n_out = ((n_in as u64 * dst + src / 2) / src) as usize;
    let step = src as f64 / dst as f64;
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let half_width = SINC_ZEROS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);

    let input = &clip.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let t = n as f64 * step;
        let first = libm::ceil(t - half_width).max(0.0) as usize;
        let last = (libm::floor(t + half_width) as usize).min(n_in - 1);
        let mut acc = 0.0;
        for (k, &x) in input.iter().enumerate().take(last + 1).skip(first) {
            let d = k as f64 - t;
            let u = d / half_width;
            if u.abs() >= 1.0 {
                continue;
            }
            let arg = PI * cutoff * d;
            let sinc = if arg == 0.0 { 1.0 } else { libm::sin(arg) / arg };
            let window = bessel_i0(KAISER_BETA * libm::sqrt(1.0 - u * u)) / i0_beta;
            acc += x as f64 * cutoff * sinc * window;
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate)
}

/// Crop from the start or zero-pad at the end to exactly
/// `round(seconds · sample_rate)` samples.
pub fn fit_duration(clip: &AudioClip, seconds: f64) -> Result<AudioClip> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let target = libm::round(seconds * clip.sample_rate as f64) as usize;
    if target == 0 {
        return Err(Error::InvalidArgument("duration rounds to zero samples".into()));
    }
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip::new(samples, clip.sample_rate)
}
