//! Synthetic dataset creation, loading and preprocessing onto the model grid.

use super::config::{ExperimentConfig, PreprocessConfig};
use super::io::{ManifestRow, Split, read_manifest, read_volume, write_manifest, write_volume};
use crate::error::{Error, Result};
use crate::losses::{RegionAnnotation, patch_lobe_labels};
use crate::model::ModelConfig;
use crate::phantom::{PhantomSpec, RiskRecord, generate_phantom, patch_mask_from_voxels};
use crate::preproc::{crop_to_lung, fit_volume, resample_nearest, resample_trilinear, window_and_normalize};
use crate::tokenizer::{PatchGrid, patchify};
use crate::volume::{LabelVolume, Volume};
use std::path::Path;

/// Index ranges of the three splits: train first, then test, then probe.
pub fn split_of(index: usize, n_train: usize, n_test: usize) -> Split {
    if index < n_train {
        Split::Train
    } else if index < n_train + n_test {
        Split::Test
    } else {
        Split::Probe
    }
}

/// Writes `n_train + n_test + n_probe` phantoms and their manifest to `out`.
/// Probe scans always carry a nodule.
pub fn synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ManifestRow>> {
    let spec = cfg.phantom_spec();
    spec.validate()?;
    let probe_spec = PhantomSpec {
        nodule_probability: 1.0,
        ..spec.clone()
    };
    let (n_train, n_test) = (cfg.data.n_train, cfg.data.n_test);
    let total = n_train + n_test + cfg.data.n_probe;
    let mut rows = Vec::with_capacity(total);
    for index in 0..total {
        let split = split_of(index, n_train, n_test);
        let s = if split == Split::Probe { &probe_spec } else { &spec };
        let p = generate_phantom(s, index as u64)?;
        let id = p.record.sample_id.clone();
        let volume = format!("volumes/{id}");
        let lobe_mask = format!("lobes/{id}");
        write_volume(&out.join(&volume), &p.volume)?;
        write_volume(&out.join(&lobe_mask), &p.lobe_mask)?;
        let nodule_mask = if p.nodules.is_empty() {
            None
        } else {
            let stem = format!("nodules/{id}");
            write_volume(&out.join(&stem), &p.nodule_mask)?;
            Some(stem)
        };
        rows.push(ManifestRow {
            sample_id: id,
            split,
            volume,
            lobe_mask,
            nodule_mask,
            event: p.record.event as u8,
            time_years: p.record.time_years,
            lobe_label: p.annotation.lobe_label,
            side_label: p.annotation.side_label,
        });
    }
    write_manifest(out, &rows)?;
    Ok(rows)
}

/// One scan on the canonical grid, ready for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub grid: PatchGrid<f32>,
    /// Lobe label of every patch (0 outside the lung).
    pub lobe_patches: Vec<u8>,
    pub annotation: RegionAnnotation,
    pub record: RiskRecord,
}

/// Windowing, resampling, lung crop and fit to `grid_shape`, applied to the
/// volume, its lobe mask and (when present) its nodule mask alike.
pub fn preprocess(
    v: &Volume<f32>,
    lobes: &LabelVolume,
    nodules: Option<&LabelVolume>,
    pre: &PreprocessConfig,
    grid_shape: [usize; 3],
) -> Result<(Volume<f32>, LabelVolume, Option<LabelVolume>)> {
    let normalized = window_and_normalize(v, pre.window)?;
    let resampled = resample_trilinear(&normalized, pre.target_spacing)?;
    let lobes_r = resample_nearest(lobes, pre.target_spacing)?;
    if resampled.shape() != lobes_r.shape() {
        return Err(Error::Data(format!(
            "volume and lobe mask disagree after resampling: {:?} vs {:?}",
            resampled.shape(),
            lobes_r.shape()
        )));
    }
    let (vol_c, lobes_c) = crop_to_lung(&resampled, &lobes_r, pre.crop_pad)?;
    let nod_c = match nodules {
        Some(n) => {
            let n_r = resample_nearest(n, pre.target_spacing)?;
            // Same crop window as the lobes.
            let (n_c, _) = crop_to_lung(&n_r, &lobes_r, pre.crop_pad)?;
            Some(n_c)
        }
        None => None,
    };
    let fill = pre.window.apply(pre.fill_hu) as f32;
    let vol_f = fit_volume(&vol_c, grid_shape, fill);
    let lobes_f = fit_volume(&lobes_c, grid_shape, 0);
    let nod_f = nod_c.map(|n| fit_volume(&n, grid_shape, 0));
    Ok((vol_f, lobes_f, nod_f))
}

fn load_sample(dir: &Path, row: &ManifestRow, pre: &PreprocessConfig, model: &ModelConfig) -> Result<Sample> {
    let context = |e: Error| match e {
        Error::EmptyMask => Error::Data(format!("{}: no lung region found", row.sample_id)),
        other => other,
    };
    let v = read_volume::<f32>(&dir.join(&row.volume))?;
    let lobes = read_volume::<u8>(&dir.join(&row.lobe_mask))?;
    if v.shape() != lobes.shape() {
        return Err(Error::Data(format!(
            "{}: volume {:?} and lobe mask {:?} differ in shape",
            row.sample_id,
            v.shape(),
            lobes.shape()
        )));
    }
    let nodules = match &row.nodule_mask {
        Some(stem) => Some(read_volume::<u8>(&dir.join(stem))?),
        None => None,
    };
    let (vol, lobes, nod) = preprocess(&v, &lobes, nodules.as_ref(), pre, model.grid_shape).map_err(context)?;
    let grid = patchify::<f32>(&vol, model.patch_size)?;
    let lobe_patches = patch_lobe_labels(&lobes.data, model.patch_size);
    let mut annotation = row.region_labels();
    annotation.nodule_patch_mask = nod.and_then(|n| patch_mask_from_voxels(&n.data, model.patch_size));
    Ok(Sample {
        id: row.sample_id.clone(),
        split: row.split,
        grid,
        lobe_patches,
        annotation,
        record: row.record(),
    })
}

/// A preprocessed dataset directory.
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads the listed splits; every referenced file is read and checked
    /// before any training starts.
    pub fn load(dir: &Path, cfg: &ExperimentConfig, splits: &[Split]) -> Result<Dataset> {
        let rows = read_manifest(dir)?;
        let samples = rows
            .iter()
            .filter(|r| splits.contains(&r.split))
            .map(|r| load_sample(dir, r, &cfg.preprocess, &cfg.model))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "{} has no samples in splits {:?}",
                dir.display(),
                splits.iter().map(|s| s.name()).collect::<Vec<_>>()
            )));
        }
        Ok(Dataset { samples })
    }

    pub fn split(&self, s: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|x| x.split == s).collect()
    }
}
