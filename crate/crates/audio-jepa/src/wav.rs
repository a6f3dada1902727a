//! WAV input and output.

use std::path::Path;

use ajepa_core::dsp::AudioClip;
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::fsutil;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Read a WAV file. Integer PCM (8 to 32 bit) is scaled to `[-1, 1)`; only
/// the first channel of multi-channel files is kept.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Wav {
                    path: path.to_path_buf(),
                    message: format!("unsupported float width {}", spec.bits_per_sample),
                });
            }
            reader
                .samples::<f32>()
                .step_by(channels)
                .collect::<Result<_, _>>()
                .map_err(wav_err(path))?
        }
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(wav_err(path))?
        }
    };
    Ok(AudioClip::new(samples, spec.sample_rate)?)
}

/// Write mono 16-bit PCM, clipping to `[-1, 1]`. The file appears atomically.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::with_capacity(44 + 2 * samples.len()));
    {
        let mut writer = WavWriter::new(&mut buf, spec).map_err(wav_err(path))?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(wav_err(path))?;
        }
        writer.finalize().map_err(wav_err(path))?;
    }
    fsutil::write_atomic(path, buf.get_ref())
}
