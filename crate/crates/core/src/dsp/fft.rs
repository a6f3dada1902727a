//! Iterative radix-2 complex FFT, sized for STFT frames.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::{Error, Result};

/// Precomputed twiddles and bit-reversal permutation for one power-of-two size.
#[derive(Clone, Debug)]
pub struct Fft {
    size: usize,
    twiddles: Vec<(f64, f64)>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 || !size.is_power_of_two() {
            return Err(Error::InvalidArgument(alloc::format!(
                "FFT size {size} is not a power of two >= 2"
            )));
        }
        let bits = size.trailing_zeros();
        let bitrev = (0..size)
            .map(|i| i.reverse_bits() >> (usize::BITS - bits))
            .collect();
        let twiddles = (0..size / 2)
            .map(|k| {
                let angle = -2.0 * PI * k as f64 / size as f64;
                (libm::cos(angle), libm::sin(angle))
            })
            .collect();
        Ok(Fft {
            size,
            twiddles,
            bitrev,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// In-place forward transform of `(re, im)`.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        assert_eq!(re.len(), self.size);
        assert_eq!(im.len(), self.size);
        for i in 0..self.size {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.size {
            let half = len / 2;
            let stride = self.size / len;
            for start in (0..self.size).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = self.twiddles[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }

    /// `|X_k|²` for `k = 0..=size/2` of a real frame (zero-padded to `size`).
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        assert!(frame.len() <= self.size);
        let mut re = alloc::vec![0.0; self.size];
        let mut im = alloc::vec![0.0; self.size];
        re[..frame.len()].copy_from_slice(frame);
        self.forward(&mut re, &mut im);
        (0..=self.size / 2)
            .map(|k| re[k] * re[k] + im[k] * im[k])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(r, i), (t, &v)| {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    (r + v * libm::cos(a), i + v * libm::sin(a))
                })
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<f64> = (0..64).map(|i| libm::sin(i as f64 * 0.37) + (i % 5) as f64 * 0.1).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; 64];
        Fft::new(64).unwrap().forward(&mut re, &mut im);
        for (k, (r, i)) in naive_dft(&x).into_iter().enumerate() {
            assert!((re[k] - r).abs() < 1e-9, "bin {k}");
            assert!((im[k] - i).abs() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(Fft::new(3125).is_err());
        assert!(Fft::new(1).is_err());
        assert!(Fft::new(4096).is_ok());
    }
}
