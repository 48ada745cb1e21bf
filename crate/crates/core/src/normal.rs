//! Normal maps and their RGB color encoding `c = (n + 1)/2`.
//!
//! Channel order is `R = n_x`, `G = n_y`, `B = n_z`. The camera looks down
//! `−z`; `n_z ≥ 0` on the visible hemisphere. Image rows grow along `+y`.

use crate::error::{check_dims, Error, Result};
use crate::par;
use crate::polar::{Mask, Plane};
use ndarray::Array3;

/// Per-pixel unit normals plus foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub nx: Plane,
    pub ny: Plane,
    pub nz: Plane,
    pub mask: Mask,
}

impl NormalMap {
    pub fn new(nx: Plane, ny: Plane, nz: Plane, mask: Mask) -> Result<Self> {
        let dims = nx.dim();
        check_dims("normal plane ny", dims, ny.dim())?;
        check_dims("normal plane nz", dims, nz.dim())?;
        check_dims("normal mask", dims, mask.dim())?;
        Ok(Self { nx, ny, nz, mask })
    }

    /// Constant normal on an all-foreground map.
    pub fn constant(h: usize, w: usize, n: [f64; 3]) -> Self {
        Self {
            nx: Plane::from_elem((h, w), n[0]),
            ny: Plane::from_elem((h, w), n[1]),
            nz: Plane::from_elem((h, w), n[2]),
            mask: Mask::from_elem((h, w), true),
        }
    }

    /// Builds a map from a per-pixel function; `None` marks background.
    pub fn from_fn<F>(h: usize, w: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> Option<[f64; 3]> + Sync + Send,
    {
        let cells = par::grid(h, w, f);
        Self {
            nx: cells.mapv(|c| c.map_or(0.0, |n| n[0])),
            ny: cells.mapv(|c| c.map_or(0.0, |n| n[1])),
            nz: cells.mapv(|c| c.map_or(0.0, |n| n[2])),
            mask: cells.mapv(|c| c.is_some()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.nx.dim()
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 3] {
        [self.nx[[i, j]], self.ny[[i, j]], self.nz[[i, j]]]
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Checks unit norm (within `1e−6`) and, when `strict_nz`, `n_z ≥ 0` at foreground pixels.
    pub fn validate(&self, strict_nz: bool) -> Result<()> {
        let (h, w) = self.dims();
        for i in 0..h {
            for j in 0..w {
                if !self.mask[[i, j]] {
                    continue;
                }
                let n = self.at(i, j);
                let norm = norm3(n);
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidValue(format!(
                        "normal at ({i}, {j}) has norm {norm}"
                    )));
                }
                if strict_nz && n[2] < 0.0 {
                    return Err(Error::InvalidValue(format!(
                        "normal at ({i}, {j}) faces away from the camera (n_z = {})",
                        n[2]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy with a replacement mask.
    pub fn with_mask(&self, mask: Mask) -> Result<Self> {
        Self::new(self.nx.clone(), self.ny.clone(), self.nz.clone(), mask)
    }
}

pub(crate) fn norm3(n: [f64; 3]) -> f64 {
    (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Angle between two vectors, `atan2(‖a×b‖, a·b)`; exact 0 for identical inputs.
pub(crate) fn angle3(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3(cross3(a, b)).atan2(dot3(a, b))
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Color-encoded normal image, `(rows, cols, 3)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedNormalImage {
    pub rgb: Array3<f64>,
}

impl EncodedNormalImage {
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.rgb.dim();
        (h, w)
    }

    /// Rounds every channel to the nearest code of a `bits`-bit integer.
    pub fn quantized(&self, bits: u32) -> Self {
        let max = ((1u64 << bits) - 1) as f64;
        Self {
            rgb: self.rgb.mapv(|c| (c.clamp(0.0, 1.0) * max).round() / max),
        }
    }
}

/// Zero-vector background color.
pub const DEFAULT_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

/// `c = (n + 1)/2`; masked-out pixels take `background`.
pub fn encode_normals(n: &NormalMap, background: [f64; 3]) -> EncodedNormalImage {
    let (h, w) = n.dims();
    let mut rgb = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let c = if n.mask[[i, j]] {
                n.at(i, j).map(|v| (v + 1.0) / 2.0)
            } else {
                background
            };
            for k in 0..3 {
                rgb[[i, j, k]] = c[k];
            }
        }
    }
    EncodedNormalImage { rgb }
}

/// Diagnostics from [`decode_normals`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeStats {
    /// Largest `|‖2c − 1‖ − 1|` over foreground pixels.
    pub max_renorm_delta: f64,
    /// Foreground pixels whose decoded vector was (near) zero; removed from the mask.
    pub zero_vectors: usize,
    /// Foreground pixels with `n_z < 0`.
    pub back_facing: usize,
}

/// Decoded vectors shorter than this are flagged as zero vectors.
const ZERO_VECTOR_NORM: f64 = 1e-3;

/// `n = 2c − 1` renormalized to unit length at foreground pixels.
///
/// With `strict_nz`, any foreground pixel with `n_z < 0` is an error.
pub fn decode_normals(
    img: &EncodedNormalImage,
    mask: &Mask,
    strict_nz: bool,
) -> Result<(NormalMap, DecodeStats)> {
    let (h, w) = img.dims();
    check_dims("normal mask", (h, w), mask.dim())?;
    let mut stats = DecodeStats::default();
    let mut out = NormalMap {
        nx: Plane::zeros((h, w)),
        ny: Plane::zeros((h, w)),
        nz: Plane::zeros((h, w)),
        mask: mask.clone(),
    };
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            let v = [0, 1, 2].map(|k| 2.0 * img.rgb[[i, j, k]] - 1.0);
            let norm = norm3(v);
            if !(norm >= ZERO_VECTOR_NORM) {
                stats.zero_vectors += 1;
                out.mask[[i, j]] = false;
                continue;
            }
            stats.max_renorm_delta = stats.max_renorm_delta.max((norm - 1.0).abs());
            let n = v.map(|x| x / norm);
            if n[2] < 0.0 {
                if strict_nz {
                    return Err(Error::InvalidValue(format!(
                        "decoded normal at ({i}, {j}) has n_z = {} < 0",
                        n[2]
                    )));
                }
                stats.back_facing += 1;
            }
            out.nx[[i, j]] = n[0];
            out.ny[[i, j]] = n[1];
            out.nz[[i, j]] = n[2];
        }
    }
    Ok((out, stats))
}
