//! Random patch masking.
//!
//! One mask ratio is drawn per batch; each example then gets its own
//! uniformly random masked subset of that size. Masks are unstructured (no
//! blocks).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::{rng, Error, Result};

/// Visible/masked partition of `0..num_patches`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    masked: Vec<usize>,
    visible: Vec<usize>,
    num_patches: usize,
    ratio: f64,
}

impl MaskSpec {
    /// Build a mask from an explicit masked set; the visible set is its
    /// complement.
    pub fn from_masked(num_patches: usize, masked: &[usize], ratio: f64) -> Result<Self> {
        let mut flags = alloc::vec![false; num_patches];
        for &m in masked {
            if m >= num_patches || flags[m] {
                return Err(Error::InvalidArgument(format!(
                    "masked index {m} is out of range or repeated for {num_patches} patches"
                )));
            }
            flags[m] = true;
        }
        let masked: Vec<usize> = (0..num_patches).filter(|&i| flags[i]).collect();
        let visible: Vec<usize> = (0..num_patches).filter(|&i| !flags[i]).collect();
        if masked.is_empty() || visible.is_empty() {
            return Err(Error::DegenerateMask {
                num_patches,
                masked: masked.len(),
            });
        }
        Ok(MaskSpec {
            masked,
            visible,
            num_patches,
            ratio,
        })
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

/// `round(ratio · num_patches)`, half-up.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    libm::floor(ratio * num_patches as f64 + 0.5) as usize
}

/// Uniform mask ratio in `[lo, hi]` for one batch.
pub fn sample_batch_ratio<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio bounds must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
        )));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng::uniform(rng, lo, hi))
}

/// Uniformly random masked subset of size `round(ratio · num_patches)`,
/// drawn with a partial Fisher-Yates shuffle.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, num_patches: usize, ratio: f64) -> Result<MaskSpec> {
    if num_patches < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two patches to mask, got {num_patches}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let count = masked_count(num_patches, ratio);
    if count == 0 || count >= num_patches {
        return Err(Error::DegenerateMask {
            num_patches,
            masked: count,
        });
    }
    let mut order: Vec<usize> = (0..num_patches).collect();
    for i in 0..count {
        let j = rng.random_range(i..num_patches);
        order.swap(i, j);
    }
    let mut masked = order[..count].to_vec();
    let mut visible = order[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSpec {
        masked,
        visible,
        num_patches,
        ratio,
    })
}
