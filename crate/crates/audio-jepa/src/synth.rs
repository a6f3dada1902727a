//! Labeled synthetic corpus: five sound classes with per-clip jitter.

use std::f64::consts::TAU;
use std::path::Path;

use ajepa_core::rng::{self, streams};
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRow, Split};
use crate::wav;

pub const CLASS_NAMES: [&str; 5] = ["tone-low", "tone-high", "chirp-up", "chirp-down", "noise"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoundClass {
    /// Sine between 200 and 400 Hz.
    ToneLow,
    /// Sine between 2 and 4 kHz.
    ToneHigh,
    ChirpUp,
    ChirpDown,
    /// White Gaussian noise.
    Noise,
}

impl SoundClass {
    pub const ALL: [SoundClass; 5] = [
        SoundClass::ToneLow,
        SoundClass::ToneHigh,
        SoundClass::ChirpUp,
        SoundClass::ChirpDown,
        SoundClass::Noise,
    ];

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller keeps the draw count fixed per sample.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// One clip of `class`. Frequencies, phase and amplitude are drawn inside the
/// class band; a faint noise floor is mixed into every class.
pub fn synth_clip<R: Rng>(class: SoundClass, sample_rate: u32, duration: f64, rng: &mut R) -> Vec<f32> {
    let n = (duration * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let top = 0.45 * sr;
    let amp = rng::uniform(rng, 0.2, 0.8);
    let phase = rng::uniform(rng, 0.0, TAU);
    let floor = 0.005;
    let mut out = Vec::with_capacity(n);
    match class {
        SoundClass::ToneLow | SoundClass::ToneHigh => {
            let (lo, hi) = if class == SoundClass::ToneLow {
                (200.0, 400.0)
            } else {
                (2000.0_f64.min(0.6 * top), 4000.0_f64.min(top))
            };
            let f = rng::uniform(rng, lo, hi);
            for i in 0..n {
                let t = i as f64 / sr;
                out.push(amp * (TAU * f * t + phase).sin() + floor * standard_normal(rng));
            }
        }
        SoundClass::ChirpUp | SoundClass::ChirpDown => {
            let low = rng::uniform(rng, 200.0, 600.0);
            let high = rng::uniform(rng, 0.6 * top, top);
            let (f0, f1) = if class == SoundClass::ChirpUp { (low, high) } else { (high, low) };
            let rate = (f1 - f0) / duration;
            for i in 0..n {
                let t = i as f64 / sr;
                let arg = TAU * (f0 * t + 0.5 * rate * t * t) + phase;
                out.push(amp * arg.sin() + floor * standard_normal(rng));
            }
        }
        SoundClass::Noise => {
            let scale = amp / 3.0;
            for _ in 0..n {
                out.push(scale * standard_normal(rng) + floor * standard_normal(rng));
            }
        }
    }
    out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<SoundClass>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sample_rate: u32,
    pub duration: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(train_per_class: usize, test_per_class: usize, sample_rate: u32, duration: f64, seed: u64) -> Self {
        SynthSpec {
            classes: SoundClass::ALL.to_vec(),
            train_per_class,
            test_per_class,
            sample_rate,
            duration,
            seed,
        }
    }
}

/// Every clip of the corpus in manifest order, with its label and split.
/// Clip id, label, split and samples.
pub type SynthClip = (String, usize, Split, Vec<f32>);

/// Clip `i` draws from its own generator stream, so clips are independent of
/// one another and of the class list order.
pub fn synth_clips(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    if spec.classes.len() < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least two classes, got {}",
            spec.classes.len()
        )));
    }
    let mut out = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for (label, &class) in spec.classes.iter().enumerate() {
            for k in 0..per_class {
                let id = format!("{split}/{}-{k:04}", class.name());
                let stream_id = ((split as u64) << 32) | ((class as u64) << 24) | k as u64;
                let mut g = rng::stream(spec.seed, streams::SYNTH + stream_id);
                let samples = synth_clip(class, spec.sample_rate, spec.duration, &mut g);
                out.push((id, label, split, samples));
            }
        }
    }
    Ok(out)
}

/// Write the corpus as 16-bit WAV files under `out_dir` plus
/// `out_dir/manifest.csv`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let mut rows = Vec::new();
    for (id, label, split, samples) in synth_clips(spec)? {
        let rel = format!("{id}.wav");
        wav::write_wav(&out_dir.join(&rel), &samples, spec.sample_rate)?;
        rows.push(ManifestRow {
            path: rel,
            label: Some(label),
            split: Some(split),
        });
    }
    let manifest = Manifest::new(rows, out_dir.to_path_buf())?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
