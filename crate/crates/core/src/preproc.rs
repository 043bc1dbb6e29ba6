//! Intensity windowing, resampling and lung-centred cropping.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use ndarray::{Array3, s};
use serde::{Deserialize, Serialize};

/// HU window mapped onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub low: f64,
    pub high: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            low: -1350.0,
            high: 150.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return Err(Error::validation(
                "window",
                format!("need low < high, got [{}, {}]", self.low, self.high),
            ));
        }
        Ok(())
    }

    /// Maps one HU value into `[-1, 1]`.
    pub fn apply(&self, hu: f64) -> f64 {
        let c = hu.clamp(self.low, self.high);
        2.0 * (c - self.low) / (self.high - self.low) - 1.0
    }
}

/// Default voxel spacing every scan is resampled to, in mm per axis.
pub const TARGET_SPACING: [f64; 3] = [2.5, 1.4, 1.4];

/// Default margin added around the lung bounding box, in voxels per side.
pub const DEFAULT_CROP_PAD: [usize; 3] = [2, 2, 2];

pub fn window_and_normalize(v: &Volume<f32>, w: WindowSpec) -> Result<Volume<f32>> {
    w.validate()?;
    Ok(Volume {
        data: v.data.mapv(|x| w.apply(x as f64) as f32),
        spacing: v.spacing,
        origin_offset: v.origin_offset,
    })
}

fn resampled_shape(shape: [usize; 3], from: [f64; 3], to: [f64; 3]) -> Result<[usize; 3]> {
    if to.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::validation("target_spacing", "must be strictly positive"));
    }
    let out = [0, 1, 2].map(|a| (shape[a] as f64 * from[a] / to[a]).round() as usize);
    if out.contains(&0) {
        return Err(Error::shape(
            "resample",
            format!("degenerate output shape {out:?} for spacing {to:?}"),
        ));
    }
    Ok(out)
}

/// Source coordinate of output voxel `i` when the grid spacing changes from
/// `from` to `to`, aligning voxel centres.
fn source_coord(i: usize, from: f64, to: f64) -> f64 {
    (i as f64 + 0.5) * to / from - 0.5
}

/// Trilinear resampling to a new voxel spacing, no anti-aliasing.
/// Coordinates outside the source grid are clamped to its border.
pub fn resample_trilinear(v: &Volume<f32>, target_spacing: [f64; 3]) -> Result<Volume<f32>> {
    let shape = v.shape();
    let out_shape = resampled_shape(shape, v.spacing, target_spacing)?;
    if out_shape == shape && target_spacing == v.spacing {
        return Ok(v.clone());
    }
    // per-axis (lower index, upper index, weight of upper)
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..out_shape[a])
                .map(|i| {
                    let x = source_coord(i, v.spacing[a], target_spacing[a]).clamp(0.0, (shape[a] - 1) as f64);
                    let lo = x.floor() as usize;
                    let hi = (lo + 1).min(shape[a] - 1);
                    (lo, hi, x - lo as f64)
                })
                .collect()
        })
        .collect();
    let src = &v.data;
    let data = Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(i, j, k)| {
        let (i0, i1, wi) = taps[0][i];
        let (j0, j1, wj) = taps[1][j];
        let (k0, k1, wk) = taps[2][k];
        let at = |a: usize, b: usize, c: usize| src[[a, b, c]] as f64;
        let c00 = at(i0, j0, k0) * (1.0 - wk) + at(i0, j0, k1) * wk;
        let c01 = at(i0, j1, k0) * (1.0 - wk) + at(i0, j1, k1) * wk;
        let c10 = at(i1, j0, k0) * (1.0 - wk) + at(i1, j0, k1) * wk;
        let c11 = at(i1, j1, k0) * (1.0 - wk) + at(i1, j1, k1) * wk;
        let c0 = c00 * (1.0 - wj) + c01 * wj;
        let c1 = c10 * (1.0 - wj) + c11 * wj;
        (c0 * (1.0 - wi) + c1 * wi) as f32
    });
    Ok(Volume {
        data,
        spacing: target_spacing,
        origin_offset: v.origin_offset,
    })
}

/// Nearest-neighbour resampling for label volumes, on the same output grid
/// as [`resample_trilinear`].
pub fn resample_nearest(v: &LabelVolume, target_spacing: [f64; 3]) -> Result<LabelVolume> {
    let shape = v.shape();
    let out_shape = resampled_shape(shape, v.spacing, target_spacing)?;
    if out_shape == shape && target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..out_shape[a])
                .map(|i| {
                    let x = source_coord(i, v.spacing[a], target_spacing[a]);
                    (x.round().max(0.0) as usize).min(shape[a] - 1)
                })
                .collect()
        })
        .collect();
    let data = Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(i, j, k)| {
        v.data[[idx[0][i], idx[1][j], idx[2][k]]]
    });
    Ok(Volume {
        data,
        spacing: target_spacing,
        origin_offset: v.origin_offset,
    })
}

/// Axis-aligned bounding box `[lo, hi)` of the nonzero labels.
pub fn label_bounding_box(mask: &LabelVolume) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = mask.shape();
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &l) in mask.data.indexed_iter() {
        if l != 0 {
            any = true;
            for (a, x) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(x);
                hi[a] = hi[a].max(x + 1);
            }
        }
    }
    any.then_some((lo, hi))
}

fn crop<T: Clone>(v: &Volume<T>, lo: [usize; 3], hi: [usize; 3]) -> Volume<T> {
    Volume {
        data: v.data.slice(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).to_owned(),
        spacing: v.spacing,
        origin_offset: [0, 1, 2].map(|a| v.origin_offset[a] + lo[a] as i64),
    }
}

/// Crops volume and mask to the padded bounding box of the lung labels.
pub fn crop_to_lung<T: Clone>(
    v: &Volume<T>,
    lobe_mask: &LabelVolume,
    pad_voxels: [usize; 3],
) -> Result<(Volume<T>, LabelVolume)> {
    if v.shape() != lobe_mask.shape() {
        return Err(Error::shape(
            "crop_to_lung",
            format!("volume {:?} vs mask {:?}", v.shape(), lobe_mask.shape()),
        ));
    }
    let (lo, hi) = label_bounding_box(lobe_mask).ok_or(Error::EmptyMask)?;
    let shape = v.shape();
    let lo = [0, 1, 2].map(|a| lo[a].saturating_sub(pad_voxels[a]));
    let hi = [0, 1, 2].map(|a| (hi[a] + pad_voxels[a]).min(shape[a]));
    Ok((crop(v, lo, hi), crop(lobe_mask, lo, hi)))
}

/// Center-pads (with `fill`) or center-crops each axis to `target`.
pub fn fit_volume<T: Clone>(v: &Volume<T>, target: [usize; 3], fill: T) -> Volume<T> {
    let shape = v.shape();
    let mut out = Array3::from_elem((target[0], target[1], target[2]), fill);
    // offset of the source inside the target (positive = padding)
    // floor of half the size difference on both the padding and cropping
    // side, so that padding followed by cropping is the identity
    let shift: [i64; 3] = [0, 1, 2].map(|a| {
        if target[a] >= shape[a] {
            ((target[a] - shape[a]) / 2) as i64
        } else {
            -(((shape[a] - target[a]) / 2) as i64)
        }
    });
    let src_lo = [0, 1, 2].map(|a| (-shift[a]).max(0) as usize);
    let dst_lo = [0, 1, 2].map(|a| shift[a].max(0) as usize);
    let len = [0, 1, 2].map(|a| (shape[a] - src_lo[a]).min(target[a] - dst_lo[a]));
    out.slice_mut(s![
        dst_lo[0]..dst_lo[0] + len[0],
        dst_lo[1]..dst_lo[1] + len[1],
        dst_lo[2]..dst_lo[2] + len[2]
    ])
    .assign(&v.data.slice(s![
        src_lo[0]..src_lo[0] + len[0],
        src_lo[1]..src_lo[1] + len[1],
        src_lo[2]..src_lo[2] + len[2]
    ]));
    Volume {
        data: out,
        spacing: v.spacing,
        origin_offset: [0, 1, 2].map(|a| v.origin_offset[a] - shift[a]),
    }
}

/// Brings a normalized volume and its mask onto the canonical grid.
pub fn fit_to_grid(
    v: &Volume<f32>,
    lobe_mask: &LabelVolume,
    target_shape: [usize; 3],
    fill_value: f32,
) -> Result<(Volume<f32>, LabelVolume)> {
    if v.shape() != lobe_mask.shape() {
        return Err(Error::shape(
            "fit_to_grid",
            format!("volume {:?} vs mask {:?}", v.shape(), lobe_mask.shape()),
        ));
    }
    if target_shape.contains(&0) {
        return Err(Error::validation("target_shape", "must be positive"));
    }
    Ok((
        fit_volume(v, target_shape, fill_value),
        fit_volume(lobe_mask, target_shape, 0),
    ))
}
