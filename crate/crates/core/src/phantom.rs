//! Synthetic lung phantoms with a planted, analytically known risk signal.
//!
//! Each phantom is an air-filled field of view containing a soft-tissue body,
//! an ellipsoidal lung field split into five lobes (three on the patient's
//! right, two on the left) and zero or more spherical nodules. The yearly
//! cancer hazard grows linearly with the radius of the largest nodule, so the
//! best achievable discriminator is known in closed form.
//!
//! Axis convention: axis 0 runs superior to inferior, axis 1 anterior to
//! posterior, axis 2 from the patient's right to the patient's left.

use crate::error::{Error, Result};
use crate::losses::{RegionAnnotation, Side};
use crate::volume::{LabelVolume, Volume};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Prediction horizon in years.
pub const HORIZON: usize = 6;

pub const AIR_HU: f32 = -1000.0;
pub const TISSUE_HU: f32 = 40.0;
pub const LUNG_HU: f32 = -850.0;

const MAX_NODULES: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 4000;
const LUNG_SEMI_AXES: [f64; 3] = [0.42, 0.36, 0.44];
const BODY_SEMI_AXES: [f64; 3] = [0.49, 0.46, 0.49];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    pub voxel_spacing: [f64; 3],
    pub nodule_probability: f64,
    pub nodule_radius_range: (f64, f64),
    pub background_noise_sd: f64,
    pub base_yearly_hazard: f64,
    pub radius_hazard_slope: f64,
    pub censor_rate: f64,
    pub seed: u64,
    /// Patch grid used to rasterize the nodule annotation.
    pub patch_size: [usize; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_shape: [64, 64, 64],
            voxel_spacing: [2.5, 1.4, 1.4],
            nodule_probability: 0.4,
            nodule_radius_range: (4.0, 10.0),
            background_noise_sd: 20.0,
            base_yearly_hazard: 0.01,
            radius_hazard_slope: 0.1,
            censor_rate: 0.1,
            seed: 0,
            patch_size: [8, 8, 8],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().any(|&d| d < 8) {
            return Err(Error::validation(
                "grid_shape",
                format!("each dimension must be at least 8, got {:?}", self.grid_shape),
            ));
        }
        if self.voxel_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::validation("voxel_spacing", "must be strictly positive"));
        }
        if !(0.0..=1.0).contains(&self.nodule_probability) {
            return Err(Error::validation("nodule_probability", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.nodule_radius_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::validation(
                "nodule_radius_range",
                format!("need 0 < min <= max, got ({lo}, {hi})"),
            ));
        }
        if !(self.background_noise_sd.is_finite() && self.background_noise_sd >= 0.0) {
            return Err(Error::validation("background_noise_sd", "must be nonnegative"));
        }
        // A zero base hazard is allowed: it is the "nobody gets cancer" control.
        if !(0.0..1.0).contains(&self.base_yearly_hazard) {
            return Err(Error::validation("base_yearly_hazard", "must lie in [0, 1)"));
        }
        if !(self.radius_hazard_slope.is_finite() && self.radius_hazard_slope >= 0.0) {
            return Err(Error::validation("radius_hazard_slope", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.censor_rate) {
            return Err(Error::validation("censor_rate", "must lie in [0, 1]"));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::validation("patch_size", "must be positive"));
        }
        Ok(())
    }

    /// Yearly event probability for a subject whose largest nodule has the
    /// given radius (0 when nodule-free).
    pub fn yearly_hazard(&self, max_radius_mm: f64) -> f64 {
        (self.base_yearly_hazard + self.radius_hazard_slope * max_radius_mm).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    /// Voxel coordinates of the sphere center.
    pub center: [f64; 3],
    pub radius_mm: f64,
    pub lobe: u8,
    pub intensity_delta: f32,
}

/// Survival ground truth of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub sample_id: String,
    pub event: bool,
    /// Time to event when `event`, otherwise censoring / follow-up time.
    pub time_years: f64,
}

impl RiskRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_years.is_finite() && self.time_years > 0.0) {
            return Err(Error::validation(
                "time_years",
                format!("must be positive, got {} for {}", self.time_years, self.sample_id),
            ));
        }
        Ok(())
    }
}

/// Everything produced for one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Intensities in HU.
    pub volume: Volume<f32>,
    /// 0 outside the lung field, lobes 1..=5 inside.
    pub lobe_mask: LabelVolume,
    /// 1 on voxels inside any nodule sphere.
    pub nodule_mask: LabelVolume,
    pub nodules: Vec<Nodule>,
    pub record: RiskRecord,
    pub annotation: RegionAnnotation,
}

impl Phantom {
    pub fn max_radius_mm(&self) -> f64 {
        max_radius(&self.nodules)
    }
}

fn max_radius(nodules: &[Nodule]) -> f64 {
    nodules.iter().map(|n| n.radius_mm).fold(0.0, f64::max)
}

/// Fixed lobe-to-side convention: lobes 1–3 are right, 4–5 are left.
pub fn side_of_lobe(lobe: u8) -> Option<Side> {
    match lobe {
        1..=3 => Some(Side::Right),
        4 | 5 => Some(Side::Left),
        _ => None,
    }
}

pub fn sample_id(index: u64) -> String {
    format!("sample-{index:05}")
}

fn stream_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(stream));
    rng
}

struct Geometry {
    center: [f64; 3],
    lung: [f64; 3],
    body: [f64; 3],
}

impl Geometry {
    fn new(shape: [usize; 3]) -> Self {
        let f = |k: usize, frac: &[f64; 3]| frac[k] * shape[k] as f64;
        Geometry {
            center: [0, 1, 2].map(|k| (shape[k] as f64 - 1.0) / 2.0),
            lung: [0, 1, 2].map(|k| f(k, &LUNG_SEMI_AXES)),
            body: [0, 1, 2].map(|k| f(k, &BODY_SEMI_AXES)),
        }
    }

    fn normalized(&self, p: [f64; 3], semi: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| (p[k] - self.center[k]) / semi[k])
    }

    fn label(&self, p: [f64; 3]) -> (u8, bool) {
        let b = self.normalized(p, &self.body);
        let in_body = b.iter().map(|x| x * x).sum::<f64>() <= 1.0;
        let u = self.normalized(p, &self.lung);
        if u.iter().map(|x| x * x).sum::<f64>() > 1.0 {
            return (0, in_body);
        }
        // Slightly oblique fissures: superior-inferior coordinate tilted
        // towards posterior.
        let fissure = u[0] + 0.25 * u[1];
        let lobe = if p[2] < self.center[2] {
            if fissure < -0.3 {
                1
            } else if fissure < 0.25 {
                2
            } else {
                3
            }
        } else if fissure < 0.0 {
            4
        } else {
            5
        };
        (lobe, true)
    }
}

/// Generates the phantom with the given index. Pure function of
/// `(spec, index)`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<Phantom> {
    spec.validate()?;
    let shape = spec.grid_shape;
    let geom = Geometry::new(shape);

    let mut hu = Array3::<f32>::from_elem((shape[0], shape[1], shape[2]), AIR_HU);
    let mut lobes = Array3::<u8>::zeros(hu.dim());
    for ((i, j, k), v) in hu.indexed_iter_mut() {
        let (lobe, in_body) = geom.label([i as f64, j as f64, k as f64]);
        if lobe > 0 {
            *v = LUNG_HU;
            lobes[[i, j, k]] = lobe;
        } else if in_body {
            *v = TISSUE_HU;
        }
    }

    let mut geo_rng = stream_rng(spec.seed, index, 0);
    let mut count = 0;
    if geo_rng.random::<f64>() < spec.nodule_probability {
        count = 1;
        while count < MAX_NODULES && geo_rng.random::<f64>() < 0.3 * spec.nodule_probability {
            count += 1;
        }
    }

    let mut nodules = Vec::with_capacity(count);
    let mut nodule_mask = Array3::<u8>::zeros(hu.dim());
    for _ in 0..count {
        let (lo, hi) = spec.nodule_radius_range;
        let radius_mm = lo + (hi - lo) * geo_rng.random::<f64>();
        let lobe = geo_rng.random_range(1..=5u8);
        let intensity_delta = geo_rng.random_range(600.0..900.0f32);
        let center = place_nodule(&lobes, spec.voxel_spacing, lobe, radius_mm, &mut geo_rng).ok_or_else(|| {
            Error::validation(
                "nodule_radius_range",
                format!("a {radius_mm:.2} mm nodule does not fit into lobe {lobe}"),
            )
        })?;
        for_each_voxel_in_sphere(shape, spec.voxel_spacing, center, radius_mm, |idx| {
            hu[idx] = LUNG_HU + intensity_delta;
            nodule_mask[idx] = 1;
        });
        nodules.push(Nodule {
            center: center.map(|c| c as f64),
            radius_mm,
            lobe,
            intensity_delta,
        });
    }

    if spec.background_noise_sd > 0.0 {
        let mut noise_rng = stream_rng(spec.seed, index, 1);
        let normal = Normal::new(0.0, spec.background_noise_sd).expect("validated sd");
        for v in hu.iter_mut() {
            *v += normal.sample(&mut noise_rng) as f32;
        }
    }

    let mut event_rng = stream_rng(spec.seed, index, 2);
    let record = sample_time_to_event(&nodules, spec, &mut event_rng, sample_id(index))?;

    let annotation = annotate(&nodules, &nodule_mask, spec.patch_size);

    let spacing = spec.voxel_spacing;
    Ok(Phantom {
        volume: Volume::new(hu, spacing)?,
        lobe_mask: Volume::new(lobes, spacing)?,
        nodule_mask: Volume::new(nodule_mask, spacing)?,
        nodules,
        record,
        annotation,
    })
}

fn place_nodule(
    lobes: &Array3<u8>,
    spacing: [f64; 3],
    lobe: u8,
    radius_mm: f64,
    rng: &mut impl Rng,
) -> Option<[usize; 3]> {
    let (d0, d1, d2) = lobes.dim();
    let shape = [d0, d1, d2];
    // bounding box of the lobe
    let mut lo = shape;
    let mut hi = [0usize; 3];
    for ((i, j, k), &l) in lobes.indexed_iter() {
        if l == lobe {
            for (a, v) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    if lo[0] > hi[0] {
        return None;
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let c = [0, 1, 2].map(|a| rng.random_range(lo[a]..=hi[a]));
        if lobes[c] != lobe {
            continue;
        }
        let mut inside = true;
        let fits = sphere_within_grid(shape, spacing, c, radius_mm);
        if fits {
            for_each_voxel_in_sphere(shape, spacing, c, radius_mm, |idx| {
                if lobes[idx] == 0 {
                    inside = false;
                }
            });
        }
        if fits && inside {
            return Some(c);
        }
    }
    None
}

fn sphere_within_grid(shape: [usize; 3], spacing: [f64; 3], c: [usize; 3], r: f64) -> bool {
    (0..3).all(|a| {
        let reach = (r / spacing[a]).floor() as usize;
        c[a] >= reach && c[a] + reach < shape[a]
    })
}

/// Visits every voxel whose center lies within `radius_mm` of `center`.
fn for_each_voxel_in_sphere(
    shape: [usize; 3],
    spacing: [f64; 3],
    center: [usize; 3],
    radius_mm: f64,
    mut f: impl FnMut([usize; 3]),
) {
    let reach = [0, 1, 2].map(|a| (radius_mm / spacing[a]).floor() as i64);
    let r2 = radius_mm * radius_mm;
    for di in -reach[0]..=reach[0] {
        for dj in -reach[1]..=reach[1] {
            for dk in -reach[2]..=reach[2] {
                let d = [di, dj, dk];
                let dist2: f64 = (0..3).map(|a| (d[a] as f64 * spacing[a]).powi(2)).sum();
                if dist2 > r2 {
                    continue;
                }
                let idx = [0, 1, 2].map(|a| center[a] as i64 + d[a]);
                if (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < shape[a]) {
                    f(idx.map(|v| v as usize));
                }
            }
        }
    }
}

/// Draws the survival outcome from the planted hazard model.
///
/// The yearly hazard is `clamp(base + slope · max_radius, 0, 1)`; the event
/// year is the first of years 1..=6 whose uniform draw falls below it. The
/// stream always consumes the same nine uniforms so that two hazards can be
/// compared on identical draws.
pub fn sample_time_to_event(
    nodules: &[Nodule],
    spec: &PhantomSpec,
    rng: &mut impl Rng,
    sample_id: String,
) -> Result<RiskRecord> {
    spec.validate()?;
    let h = spec.yearly_hazard(max_radius(nodules));
    let years: [f64; HORIZON] = std::array::from_fn(|_| rng.random::<f64>());
    let within_year = rng.random::<f64>();
    let censor_draw = rng.random::<f64>();
    let censor_frac = rng.random::<f64>();

    let event_year = years.iter().position(|&u| u < h).map(|y| y + 1);
    let (mut event, mut time_years) = match event_year {
        Some(y) => (true, (y - 1) as f64 + (1.0 - within_year)),
        None => (false, HORIZON as f64),
    };
    if censor_draw < spec.censor_rate {
        event = false;
        time_years *= 1.0 - censor_frac;
    }
    Ok(RiskRecord {
        sample_id,
        event,
        time_years,
    })
}

fn annotate(nodules: &[Nodule], nodule_mask: &Array3<u8>, patch: [usize; 3]) -> RegionAnnotation {
    let Some(largest) = nodules.iter().max_by(|a, b| a.radius_mm.total_cmp(&b.radius_mm)) else {
        return RegionAnnotation::default();
    };
    RegionAnnotation {
        nodule_patch_mask: patch_mask_from_voxels(nodule_mask, patch),
        lobe_label: Some(largest.lobe),
        side_label: side_of_lobe(largest.lobe),
    }
}

/// Per-patch flag that is set when any voxel of the patch is nonzero.
/// Patches are enumerated row-major; trailing partial patches are ignored.
/// Returns `None` when no patch is flagged.
pub fn patch_mask_from_voxels(mask: &Array3<u8>, patch: [usize; 3]) -> Option<Vec<bool>> {
    let (d0, d1, d2) = mask.dim();
    let grid = [d0 / patch[0], d1 / patch[1], d2 / patch[2]];
    let mut out = vec![false; grid[0] * grid[1] * grid[2]];
    for ((i, j, k), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let g = [i / patch[0], j / patch[1], k / patch[2]];
        if g[0] < grid[0] && g[1] < grid[1] && g[2] < grid[2] {
            out[(g[0] * grid[1] + g[1]) * grid[2] + g[2]] = true;
        }
    }
    out.iter().any(|&b| b).then_some(out)
}
