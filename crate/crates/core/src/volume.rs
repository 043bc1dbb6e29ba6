use crate::error::{Error, Result};
use ndarray::Array3;

/// A 3-D scalar grid with physical voxel spacing.
///
/// `origin_offset` is the position of voxel `[0, 0, 0]` inside the volume it
/// was cut from (zero for an uncropped scan; negative after padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    pub data: Array3<T>,
    pub spacing: [f64; 3],
    pub origin_offset: [i64; 3],
}

/// Integer label grid (lobe masks, nodule masks).
pub type LabelVolume = Volume<u8>;

impl<T> Volume<T> {
    pub fn new(data: Array3<T>, spacing: [f64; 3]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("data", "volume must not be empty"));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::validation(
                "spacing",
                format!("must be strictly positive, got {spacing:?}"),
            ));
        }
        Ok(Volume {
            data,
            spacing,
            origin_offset: [0; 3],
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (a, b, c) = self.data.dim();
        [a, b, c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
