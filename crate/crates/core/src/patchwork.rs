//! Patch protocol: random crops with a minimum valid fraction, a sliding
//! tile grid, and weighted stitching back to full resolution.

use crate::error::{check_dims, Error, Result};
use crate::normal::{norm3, NormalMap};
use crate::polar::{Mask, Plane};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendMode {
    /// Every covering patch weighs 1.
    Uniform,
    /// Separable raised-cosine window floored at [`COSINE_FLOOR`].
    #[default]
    Cosine,
}

impl std::str::FromStr for BlendMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown blend mode `{other}` (expected uniform|cosine)")),
        }
    }
}

/// Lower bound of the raised-cosine weight, so tile borders still count.
pub const COSINE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    /// Square patch side.
    pub size: usize,
    pub stride: usize,
    /// Sampled patches must have a valid fraction strictly above this.
    pub min_valid_fraction: f64,
    pub blend: BlendMode,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: 256,
            stride: 128,
            min_valid_fraction: 0.5,
            blend: BlendMode::Cosine,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 || self.stride > self.size {
            return Err(Error::InvalidValue(format!(
                "patch stride {} must satisfy 0 < stride ≤ size {}",
                self.stride, self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::InvalidValue("min valid fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn check_fits(&self, dims: (usize, usize)) -> Result<()> {
        if dims.0 < self.size || dims.1 < self.size {
            return Err(Error::InvalidValue(format!(
                "source {}×{} is smaller than patch size {}",
                dims.0, dims.1, self.size
            )));
        }
        Ok(())
    }
}

/// One crop: `origin` is its top-left `(row, col)` in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub planes: Vec<Plane>,
    pub mask: Mask,
}

impl Patch {
    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    /// `(rows, cols)` of the source.
    pub source_dims: (usize, usize),
    pub size: usize,
}

fn crop(planes: &[&Plane], mask: &Mask, origin: (usize, usize), size: usize) -> Patch {
    let (r, c) = origin;
    Patch {
        origin,
        planes: planes
            .iter()
            .map(|p| p.slice(s![r..r + size, c..c + size]).to_owned())
            .collect(),
        mask: mask.slice(s![r..r + size, c..c + size]).to_owned(),
    }
}

fn check_planes(planes: &[&Plane], mask: &Mask) -> Result<()> {
    for (k, p) in planes.iter().enumerate() {
        check_dims(format!("patch source plane {k}"), mask.dim(), p.dim())?;
    }
    Ok(())
}

/// Proposals allowed per requested patch before giving up.
pub const PROPOSALS_PER_PATCH: usize = 1000;

/// Rejection-samples `count` square crops whose valid fraction exceeds
/// `spec.min_valid_fraction`. Proposals are drawn from ChaCha8 seeded with `seed`.
pub fn sample_patches(
    planes: &[&Plane],
    mask: &Mask,
    spec: &PatchSpec,
    count: usize,
    seed: u64,
) -> Result<PatchSet> {
    spec.validate()?;
    check_planes(planes, mask)?;
    let (h, w) = mask.dim();
    spec.check_fits((h, w))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = PROPOSALS_PER_PATCH * count.max(1);
    let area = (spec.size * spec.size) as f64;
    let mut patches = Vec::with_capacity(count);
    let mut proposals = 0;
    while patches.len() < count {
        if proposals == budget {
            return Err(Error::PatchBudget {
                requested: count,
                accepted: patches.len(),
                proposals,
                rate: patches.len() as f64 / proposals as f64,
            });
        }
        proposals += 1;
        let r = rng.random_range(0..=h - spec.size);
        let c = rng.random_range(0..=w - spec.size);
        let valid = mask
            .slice(s![r..r + spec.size, c..c + spec.size])
            .iter()
            .filter(|m| **m)
            .count() as f64;
        if valid / area > spec.min_valid_fraction {
            patches.push(crop(planes, mask, (r, c), spec.size));
        }
    }
    Ok(PatchSet {
        patches,
        source_dims: (h, w),
        size: spec.size,
    })
}

fn axis_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = len - size;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| *o < last).collect();
    out.push(last);
    out
}

/// Tile origins at `stride`, with the last row and column snapped inward so
/// the final tile ends exactly at the border.
pub fn tile_grid(dims: (usize, usize), spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    spec.check_fits(dims)?;
    let rows = axis_origins(dims.0, spec.size, spec.stride);
    let cols = axis_origins(dims.1, spec.size, spec.stride);
    Ok(rows
        .iter()
        .flat_map(|r| cols.iter().map(move |c| (*r, *c)))
        .collect())
}

/// Every tile of [`tile_grid`], cut from the source.
pub fn extract_tiles(planes: &[&Plane], mask: &Mask, spec: &PatchSpec) -> Result<PatchSet> {
    check_planes(planes, mask)?;
    let origins = tile_grid(mask.dim(), spec)?;
    Ok(PatchSet {
        patches: origins
            .into_iter()
            .map(|o| crop(planes, mask, o, spec.size))
            .collect(),
        source_dims: mask.dim(),
        size: spec.size,
    })
}

/// Per-pixel blend weight of a `size`-wide patch.
pub fn blend_window(size: usize, blend: BlendMode) -> Plane {
    let profile: Vec<f64> = (0..size)
        .map(|k| match blend {
            BlendMode::Uniform => 1.0,
            BlendMode::Cosine => {
                (0.5 - 0.5 * (2.0 * PI * (k as f64 + 0.5) / size as f64).cos()).max(COSINE_FLOOR)
            }
        })
        .collect();
    Plane::from_shape_fn((size, size), |(i, j)| profile[i] * profile[j])
}

fn hole_error(covered: &Mask) -> Error {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ((i, j), c) in covered.indexed_iter() {
        if !c {
            r0 = r0.min(i);
            r1 = r1.max(i);
            c0 = c0.min(j);
            c1 = c1.max(j);
        }
    }
    Error::CoverageHole {
        rows: (r0, r1),
        cols: (c0, c1),
    }
}

/// Weighted average of overlapping patches, accumulated in patch-list order.
pub fn stitch(set: &PatchSet, blend: BlendMode) -> Result<Vec<Plane>> {
    let (h, w) = set.source_dims;
    let nplanes = set.patches.first().map_or(0, |p| p.planes.len());
    let window = blend_window(set.size, blend);
    let mut acc = vec![Plane::zeros((h, w)); nplanes];
    let mut wsum = Plane::zeros((h, w));
    for p in &set.patches {
        let (r, c) = p.origin;
        if p.planes.len() != nplanes || r + set.size > h || c + set.size > w {
            return Err(Error::InvalidValue(format!(
                "patch at {:?} does not fit the {h}×{w} frame",
                p.origin
            )));
        }
        for (a, src) in acc.iter_mut().zip(&p.planes) {
            let mut view = a.slice_mut(s![r..r + set.size, c..c + set.size]);
            ndarray::Zip::from(&mut view)
                .and(src)
                .and(&window)
                .for_each(|a, v, wt| *a += wt * v);
        }
        wsum.slice_mut(s![r..r + set.size, c..c + set.size])
            .zip_mut_with(&window, |a, wt| *a += wt);
    }
    let covered = wsum.mapv(|v| v > 0.0);
    if covered.iter().any(|c| !c) {
        return Err(hole_error(&covered));
    }
    for a in &mut acc {
        a.zip_mut_with(&wsum, |v, wt| *v /= wt);
    }
    Ok(acc)
}

/// Tile of a normal map plus its origin.
#[derive(Debug, Clone)]
pub struct NormalTile {
    pub origin: (usize, usize),
    pub normals: NormalMap,
}

/// Result of [`stitch_normals`].
#[derive(Debug, Clone)]
pub struct StitchedNormals {
    pub normals: NormalMap,
    /// Pixels whose blended mean vector nearly cancelled.
    pub antipodal: usize,
}

/// Norm of the blended mean below which a pixel is flagged.
pub const ANTIPODAL_EPS: f64 = 1e-6;

/// Blends normal tiles in vector space over each tile's foreground, then
/// renormalizes. Pixels never covered by a foreground tile pixel are
/// background.
pub fn stitch_normals(tiles: &[NormalTile], dims: (usize, usize), blend: BlendMode) -> Result<StitchedNormals> {
    let (h, w) = dims;
    let mut acc = [Plane::zeros(dims), Plane::zeros(dims), Plane::zeros(dims)];
    let mut wsum = Plane::zeros(dims);
    let mut covered = Mask::from_elem(dims, false);
    for t in tiles {
        let (th, tw) = t.normals.dims();
        if th != tw {
            return Err(Error::InvalidValue("normal tiles must be square".into()));
        }
        let (r, c) = t.origin;
        if r + th > h || c + tw > w {
            return Err(Error::InvalidValue(format!(
                "tile at {:?} does not fit the {h}×{w} frame",
                t.origin
            )));
        }
        let window = blend_window(th, blend);
        for i in 0..th {
            for j in 0..tw {
                covered[[r + i, c + j]] = true;
                if !t.normals.mask[[i, j]] {
                    continue;
                }
                let wt = window[[i, j]];
                let n = t.normals.at(i, j);
                for k in 0..3 {
                    acc[k][[r + i, c + j]] += wt * n[k];
                }
                wsum[[r + i, c + j]] += wt;
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(hole_error(&covered));
    }
    let mut antipodal = 0;
    let normals = NormalMap::from_fn(h, w, |i, j| {
        let wt = wsum[[i, j]];
        if wt <= 0.0 {
            return None;
        }
        let v = [0, 1, 2].map(|k| acc[k][[i, j]] / wt);
        let len = norm3(v);
        (len >= ANTIPODAL_EPS).then(|| v.map(|x| x / len))
    });
    for ((i, j), m) in normals.mask.indexed_iter() {
        if !m && wsum[[i, j]] > 0.0 {
            antipodal += 1;
        }
    }
    Ok(StitchedNormals { normals, antipodal })
}
