//! Sliding-window decomposition of a square image into the ordered window
//! sequence read by the lower-level models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingSpec {
    pub image_size: usize,
    pub window: usize,
    pub stride: usize,
}

impl TilingSpec {
    pub fn new(image_size: usize, window: usize, stride: usize) -> Result<Self> {
        let spec = TilingSpec { image_size, window, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::NonPositiveStride);
        }
        if self.window == 0 || self.window > self.image_size {
            return Err(Error::WindowLargerThanImage { window: self.window, image: self.image_size });
        }
        Ok(())
    }

    /// Windows along one side: `⌊(H − w)/d⌋ + 1`.
    pub fn windows_per_side(&self) -> Result<usize> {
        self.validate()?;
        Ok((self.image_size - self.window) / self.stride + 1)
    }

    /// `T_x = (⌊(H − w)/d⌋ + 1)²`.
    pub fn expected_window_count(&self) -> Result<usize> {
        let side = self.windows_per_side()?;
        Ok(side * side)
    }

    /// Top-left `(row, col)` pixel of window `index` (zero-based, row-major).
    pub fn window_origin(&self, index: usize) -> Result<(usize, usize)> {
        let side = self.windows_per_side()?;
        if index >= side * side {
            return Err(Error::IndexOutOfRange { index, len: side * side });
        }
        Ok(((index / side) * self.stride, (index % side) * self.stride))
    }
}

pub fn expected_window_count(spec: &TilingSpec) -> Result<usize> {
    spec.expected_window_count()
}

/// Cuts `C×H×H` into `C×w×w` windows left to right, then top to bottom.
/// Pixels past the last full window on the right/bottom are not covered.
pub fn tile(image: &Tensor, spec: &TilingSpec) -> Result<Vec<Tensor>> {
    let (c, h, w) = image.dims3("tile")?;
    if h != w {
        return Err(Error::NonSquareImage(image.shape().to_vec()));
    }
    if h != spec.image_size {
        return Err(Error::DimensionMismatch {
            op: "tile",
            detail: format!("image is {h}×{w} but tiling expects {}", spec.image_size),
        });
    }
    let count = spec.expected_window_count()?;
    let win = spec.window;
    let data = image.data();
    (0..count)
        .map(|t| {
            let (r0, c0) = spec.window_origin(t)?;
            let mut out = Vec::with_capacity(c * win * win);
            for ch in 0..c {
                for r in r0..r0 + win {
                    let start = (ch * h + r) * w + c0;
                    out.extend_from_slice(&data[start..start + win]);
                }
            }
            Tensor::new(vec![c, win, win], out)
        })
        .collect()
}
