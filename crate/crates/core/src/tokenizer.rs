//! Patch tokens and the two positional encodings: a learned absolute table
//! added once at the input, and 3-D rotary embeddings applied to queries and
//! keys inside every attention layer.

use crate::autodiff::{Rotation, Tape, Var, rotate_pairs};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Volume;
use ndarray::{Array2, Array3, s};

/// Non-overlapping patches of a volume, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<F> {
    /// `[N, P]`: one row per patch.
    pub tokens: Array2<F>,
    pub grid_dims: [usize; 3],
    pub patch_size: [usize; 3],
    /// Patch index along each axis, in token order.
    pub patch_coords: Vec<[usize; 3]>,
}

impl<F> PatchGrid<F> {
    pub fn num_patches(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Row-major enumeration of a patch grid.
pub fn grid_coords(grid_dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(grid_dims.iter().product());
    for i in 0..grid_dims[0] {
        for j in 0..grid_dims[1] {
            for k in 0..grid_dims[2] {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Number of patches along each axis; errors on the first indivisible axis.
pub fn grid_dims(shape: [usize; 3], patch_size: [usize; 3]) -> Result<[usize; 3]> {
    for a in 0..3 {
        if patch_size[a] == 0 || !shape[a].is_multiple_of(patch_size[a]) || shape[a] == 0 {
            return Err(Error::shape(
                "patchify",
                format!(
                    "axis {a}: size {} is not divisible by patch size {}",
                    shape[a], patch_size[a]
                ),
            ));
        }
    }
    Ok([0, 1, 2].map(|a| shape[a] / patch_size[a]))
}

pub fn patchify<F: Real>(v: &Volume<f32>, patch_size: [usize; 3]) -> Result<PatchGrid<F>> {
    let dims = grid_dims(v.shape(), patch_size)?;
    let coords = grid_coords(dims);
    let p: usize = patch_size.iter().product();
    let mut tokens = Array2::<F>::zeros((coords.len(), p));
    for (n, c) in coords.iter().enumerate() {
        let block = v.data.slice(s![
            c[0] * patch_size[0]..(c[0] + 1) * patch_size[0],
            c[1] * patch_size[1]..(c[1] + 1) * patch_size[1],
            c[2] * patch_size[2]..(c[2] + 1) * patch_size[2]
        ]);
        for (dst, &src) in tokens.row_mut(n).iter_mut().zip(block.iter()) {
            *dst = F::of(src as f64);
        }
    }
    Ok(PatchGrid {
        tokens,
        grid_dims: dims,
        patch_size,
        patch_coords: coords,
    })
}

/// Inverse of [`patchify`]; also used to lay per-patch predictions back out.
pub fn unpatchify<F: Real>(g: &PatchGrid<F>) -> Array3<F> {
    let ps = g.patch_size;
    let shape = [0, 1, 2].map(|a| g.grid_dims[a] * ps[a]);
    let mut out = Array3::<F>::zeros((shape[0], shape[1], shape[2]));
    for (n, c) in g.patch_coords.iter().enumerate() {
        let mut block = out.slice_mut(s![
            c[0] * ps[0]..(c[0] + 1) * ps[0],
            c[1] * ps[1]..(c[1] + 1) * ps[1],
            c[2] * ps[2]..(c[2] + 1) * ps[2]
        ]);
        for (dst, &src) in block.iter_mut().zip(g.tokens.row(n).iter()) {
            *dst = src;
        }
    }
    out
}

/// Patch embedding with a prepended CLS token.
///
/// Row 0 of the result is `cls` (no positional term). Row `i + 1` is
/// `tokens[i] · weight + bias + pos_table[positions[i]]`, where `positions`
/// holds row indices into the absolute position table.
pub fn embed_patches<F: Real>(
    tape: &Tape<F>,
    tokens: Var,
    positions: &[usize],
    weight: Var,
    bias: Var,
    pos_table: Var,
    cls: Var,
) -> Result<Var> {
    let (n, _) = tape.shape(tokens);
    if n != positions.len() {
        return Err(Error::shape(
            "embed_patches",
            format!("{n} tokens but {} positions", positions.len()),
        ));
    }
    let table_rows = tape.shape(pos_table).0;
    if let Some(&bad) = positions.iter().find(|&&p| p >= table_rows) {
        return Err(Error::shape(
            "embed_patches",
            format!("position {bad} outside a table of {table_rows} rows"),
        ));
    }
    let proj = tape.matmul(tokens, weight);
    let proj = tape.add_row(proj, bias);
    let pos = tape.gather_rows(pos_table, positions.to_vec());
    let x = tape.add(proj, pos);
    Ok(tape.concat_rows(&[cls, x]))
}

/// Frequencies of a 3-D rotary embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTables {
    pub head_dim: usize,
    /// Width of the contiguous block of `head_dim` assigned to each axis.
    pub axis_dims: [usize; 3],
    /// `freqs[a][j]` rotates pair `j` of axis block `a`.
    pub freqs: [Vec<f64>; 3],
}

impl RopeTables {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_base(head_dim, Self::DEFAULT_BASE)
    }

    /// Splits `head_dim` into three even blocks of about a third each, the
    /// remainder going to the last axis. Within a block of width `d`, pair
    /// `j` has frequency `base^(-2j/d)`.
    pub fn with_base(head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) || head_dim < 6 {
            return Err(Error::shape(
                "rope",
                format!("head_dim must be even and at least 6, got {head_dim}"),
            ));
        }
        let first = 2 * ((head_dim as f64 / 6.0).round() as usize).max(1);
        if 2 * first >= head_dim {
            return Err(Error::shape("rope", format!("cannot split head_dim {head_dim}")));
        }
        let axis_dims = [first, first, head_dim - 2 * first];
        let freqs = axis_dims.map(|d| (0..d / 2).map(|j| base.powf(-2.0 * j as f64 / d as f64)).collect());
        Ok(RopeTables {
            head_dim,
            axis_dims,
            freqs,
        })
    }

    /// Rotation for a sequence of positions. `None` marks a position-neutral
    /// token (the CLS token), which is rotated by zero.
    pub fn rotation<F: Real>(&self, coords: &[Option<[f64; 3]>]) -> Rotation<F> {
        let half = self.head_dim / 2;
        let mut cos = Array2::<F>::ones((coords.len(), half));
        let mut sin = Array2::<F>::zeros((coords.len(), half));
        for (r, c) in coords.iter().enumerate() {
            let Some(c) = c else { continue };
            let mut p = 0;
            for (pos, freqs) in c.iter().zip(&self.freqs) {
                for &f in freqs {
                    let angle = pos * f;
                    cos[[r, p]] = F::of(angle.cos());
                    sin[[r, p]] = F::of(angle.sin());
                    p += 1;
                }
            }
        }
        Rotation { cos, sin }
    }

    /// Rotation for a CLS token followed by the listed patch coordinates.
    pub fn rotation_with_cls<F: Real>(&self, coords: &[[usize; 3]]) -> Rotation<F> {
        let mut all = Vec::with_capacity(coords.len() + 1);
        all.push(None);
        all.extend(coords.iter().map(|c| Some(c.map(|v| v as f64))));
        self.rotation(&all)
    }
}

/// Applies the 3-D rotary embedding to `[heads, N, head_dim]` queries or keys.
pub fn apply_rope_3d<F: Real>(x: &Array3<F>, coords: &[Option<[f64; 3]>], tables: &RopeTables) -> Result<Array3<F>> {
    let (heads, n, hd) = x.dim();
    if hd != tables.head_dim {
        return Err(Error::shape(
            "apply_rope_3d",
            format!("head_dim {hd} vs tables {}", tables.head_dim),
        ));
    }
    if n != coords.len() {
        return Err(Error::shape(
            "apply_rope_3d",
            format!("{n} tokens but {} coordinates", coords.len()),
        ));
    }
    let rot = tables.rotation::<F>(coords);
    let mut out = Array3::zeros(x.dim());
    for h in 0..heads {
        let r = rotate_pairs(x.slice(s![h, .., ..]), rot.cos.view(), rot.sin.view(), false);
        out.slice_mut(s![h, .., ..]).assign(&r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || rng.random_range(-1.0..1.0f32));
        Volume::new(data, [1.0; 3]).unwrap()
    }

    #[test]
    fn patch_counts() {
        let g = patchify::<f32>(&random_volume([64, 64, 64], 0), [8, 8, 8]).unwrap();
        assert_eq!(g.tokens.dim(), (512, 512));
        assert_eq!(g.grid_dims, [8, 8, 8]);
        assert_eq!(g.patch_coords[1], [0, 0, 1]);
        assert_eq!(g.patch_coords[8], [0, 1, 0]);
    }

    #[test]
    fn single_patch_is_the_flattened_volume() {
        let v = random_volume([8, 8, 8], 1);
        let g = patchify::<f32>(&v, [8, 8, 8]).unwrap();
        assert_eq!(g.tokens.nrows(), 1);
        let flat: Vec<f32> = v.data.iter().copied().collect();
        assert_eq!(g.tokens.row(0).to_vec(), flat);
    }

    #[test]
    fn round_trip_is_exact() {
        for (seed, shape, ps) in [(2, [16, 16, 16], [8, 8, 8]), (3, [12, 8, 6], [4, 2, 3])] {
            let v = random_volume(shape, seed);
            let g = patchify::<f32>(&v, ps).unwrap();
            assert_eq!(unpatchify(&g), v.data);
        }
    }

    #[test]
    fn indivisible_axis_named() {
        let err = patchify::<f32>(&random_volume([16, 12, 16], 0), [8, 8, 8]).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn rope_split_and_frequencies() {
        let t = RopeTables::new(24).unwrap();
        assert_eq!(t.axis_dims, [8, 8, 8]);
        let t = RopeTables::new(66).unwrap();
        assert_eq!(t.axis_dims, [22, 22, 22]);
        let t = RopeTables::new(64).unwrap();
        assert_eq!(t.axis_dims.iter().sum::<usize>(), 64);
        assert!(t.axis_dims.iter().all(|d| d % 2 == 0));
        for f in &t.freqs {
            assert_eq!(f[0], 1.0);
            assert!(f.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        }
        assert!(RopeTables::new(7).is_err());
        assert!(RopeTables::new(4).is_err());
    }

    #[test]
    fn zero_coordinates_leave_input_unchanged() {
        let t = RopeTables::new(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_simple_fn((2, 3, 12), || rng.random_range(-1.0..1.0f64));
        let coords = vec![Some([0.0; 3]); 3];
        assert_eq!(apply_rope_3d(&x, &coords, &t).unwrap(), x);
        let none = vec![None; 3];
        assert_eq!(apply_rope_3d(&x, &none, &t).unwrap(), x);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let t = RopeTables::new(24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array3::from_shape_simple_fn((4, 5, 24), || rng.random_range(-2.0..2.0f64));
        let coords: Vec<_> = (0..5)
            .map(|_| Some([0, 1, 2].map(|_| rng.random_range(0.0..8.0))))
            .collect();
        let y = apply_rope_3d(&x, &coords, &t).unwrap();
        for h in 0..4 {
            for n in 0..5 {
                for p in 0..12 {
                    let a = x[[h, n, 2 * p]].hypot(x[[h, n, 2 * p + 1]]);
                    let b = y[[h, n, 2 * p]].hypot(y[[h, n, 2 * p + 1]]);
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
        assert!(apply_rope_3d(&x, &coords, &RopeTables::new(12).unwrap()).is_err());
    }

    #[test]
    fn embedding_is_linear_and_cls_is_content_free() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0f64));
        let tokens = rand(4, 6);
        let w = tape.constant(rand(6, 5));
        let b = tape.constant(rand(1, 5));
        let pos = tape.constant(rand(8, 5));
        let cls = tape.constant(rand(1, 5));
        let positions = [0, 3, 5, 7];
        let t1 = tape.constant(tokens.clone());
        let t2 = tape.constant(&tokens * 2.0);
        let e1 = embed_patches(&tape, t1, &positions, w, b, pos, cls).unwrap();
        let e2 = embed_patches(&tape, t2, &positions, w, b, pos, cls).unwrap();
        let (e1, e2) = (tape.value_owned(e1), tape.value_owned(e2));
        assert_eq!(e1.dim(), (5, 5));
        assert_eq!(e1.row(0), e2.row(0));
        let posv = tape.value_owned(pos);
        let bv = tape.value_owned(b);
        for (i, &p) in positions.iter().enumerate() {
            for c in 0..5 {
                let lin1 = e1[[i + 1, c]] - posv[[p, c]] - bv[[0, c]];
                let lin2 = e2[[i + 1, c]] - posv[[p, c]] - bv[[0, c]];
                assert!((lin2 - 2.0 * lin1).abs() < 1e-12);
            }
        }
        assert!(embed_patches(&tape, t1, &[0, 1, 2, 8], w, b, pos, cls).is_err());
    }
}
