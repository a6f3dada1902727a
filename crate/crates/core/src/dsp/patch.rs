use alloc::vec::Vec;

use super::{MelConfig, MelSpectrogram};
use crate::{Error, Result};

/// Spectrogram cut into non-overlapping square patches.
///
/// Patch `p` sits at grid cell `(p / grid_w, p % grid_w)`: patches are ordered
/// frequency-major, so all patches of the lowest mel band come first. Inside a
/// patch values are row-major, mel row first, then frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    data: Vec<f32>,
    grid_h: usize,
    grid_w: usize,
    patch_side: usize,
    config: Option<MelConfig>,
    silent: bool,
}

impl PatchGrid {
    /// Build a grid from patch vectors laid out in grid order.
    pub fn from_patches(grid_h: usize, grid_w: usize, patch_side: usize, data: Vec<f32>) -> Result<Self> {
        let expected = grid_h * grid_w * patch_side * patch_side;
        if expected == 0 || data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(PatchGrid {
            data,
            grid_h,
            grid_w,
            patch_side,
            config: None,
            silent: false,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[index * d..(index + 1) * d]
    }

    /// All patches, concatenated in grid order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Grid coordinate `(row, col)` of patch `index`.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.grid_w, index % self.grid_w)
    }

    pub fn config(&self) -> Option<&MelConfig> {
        self.config.as_ref()
    }
}

pub fn patchify(spec: &MelSpectrogram, patch_side: usize) -> Result<PatchGrid> {
    if patch_side == 0 {
        return Err(Error::InvalidArgument("patch side must be positive".into()));
    }
    if !spec.n_mels.is_multiple_of(patch_side) {
        return Err(Error::NotDivisible {
            axis: "mel",
            dim: spec.n_mels,
            side: patch_side,
        });
    }
    if !spec.n_time_bins.is_multiple_of(patch_side) {
        return Err(Error::NotDivisible {
            axis: "time",
            dim: spec.n_time_bins,
            side: patch_side,
        });
    }
    let grid_h = spec.n_mels / patch_side;
    let grid_w = spec.n_time_bins / patch_side;
    let mut data = Vec::with_capacity(spec.values.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            for r in 0..patch_side {
                let row = i * patch_side + r;
                let start = row * spec.n_time_bins + j * patch_side;
                data.extend_from_slice(&spec.values[start..start + patch_side]);
            }
        }
    }
    Ok(PatchGrid {
        data,
        grid_h,
        grid_w,
        patch_side,
        config: spec.config.clone(),
        silent: spec.silent,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> MelSpectrogram {
    let side = grid.patch_side;
    let n_mels = grid.grid_h * side;
    let n_time_bins = grid.grid_w * side;
    let mut values = alloc::vec![0.0f32; n_mels * n_time_bins];
    for p in 0..grid.num_patches() {
        let (i, j) = grid.position(p);
        let patch = grid.patch(p);
        for r in 0..side {
            let start = (i * side + r) * n_time_bins + j * side;
            values[start..start + side].copy_from_slice(&patch[r * side..(r + 1) * side]);
        }
    }
    MelSpectrogram {
        values,
        n_mels,
        n_time_bins,
        config: grid.config.clone(),
        silent: grid.silent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ramp(h: usize, w: usize) -> MelSpectrogram {
        MelSpectrogram::from_values(h, w, (0..h * w).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn default_geometry_has_128_patches() {
        let grid = patchify(&ramp(128, 256), 16).unwrap();
        assert_eq!(grid.num_patches(), 128);
        assert_eq!((grid.grid_h(), grid.grid_w()), (8, 16));
        assert_eq!(grid.patch(0).len(), 256);
    }

    #[test]
    fn first_patch_is_top_left_block() {
        let spec = ramp(32, 32);
        let grid = patchify(&spec, 16).unwrap();
        assert_eq!(grid.num_patches(), 4);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(grid.patch(0)[r * 16 + c], spec.get(r, c));
                // Patch 1 is the next block along time.
                assert_eq!(grid.patch(1)[r * 16 + c], spec.get(r, 16 + c));
                // Patch 2 is the next block along frequency.
                assert_eq!(grid.patch(2)[r * 16 + c], spec.get(16 + r, c));
            }
        }
        assert_eq!(grid.position(1), (0, 1));
        assert_eq!(grid.position(2), (1, 0));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ramp(48, 80);
        assert_eq!(unpatchify(&patchify(&spec, 16).unwrap()), spec);
    }

    #[test]
    fn non_divisible_error_names_values() {
        let err = patchify(&ramp(40, 64), 16).unwrap_err();
        assert_eq!(
            err,
            Error::NotDivisible {
                axis: "mel",
                dim: 40,
                side: 16
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("40") && msg.contains("16"));
    }

    #[test]
    fn single_and_constant_grids() {
        let patch: Vec<f32> = (0..256).map(|v| v as f32).collect();
        let grid = PatchGrid::from_patches(1, 1, 16, patch.clone()).unwrap();
        let spec = unpatchify(&grid);
        assert_eq!((spec.n_mels(), spec.n_time_bins()), (16, 16));
        assert_eq!(spec.values(), &patch[..]);

        let grid = PatchGrid::from_patches(2, 3, 16, vec![1.5; 6 * 256]).unwrap();
        assert!(unpatchify(&grid).values().iter().all(|&v| v == 1.5));
    }
}
