//! Stokes algebra on images.
//!
//! Conversions between four-angle analyzer stacks, linear Stokes images,
//! DoP/AoP maps and the polarized/unpolarized split, plus 2×2
//! division-of-focal-plane mosaic handling.

use crate::error::{check_dims, Error, Result};
use crate::par;
use ndarray::Array2;
use std::f64::consts::{FRAC_PI_2, PI};

/// Single-channel image plane, row-major `(rows, cols)`.
pub type Plane = Array2<f64>;
/// Per-pixel boolean plane; `true` marks a valid / foreground pixel.
pub type Mask = Array2<bool>;

/// Analyzer orientation of one plane of a [`PolarizationStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Analyzer {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl Analyzer {
    pub const ALL: [Analyzer; 4] = [
        Analyzer::Deg0,
        Analyzer::Deg45,
        Analyzer::Deg90,
        Analyzer::Deg135,
    ];

    pub fn degrees(self) -> u32 {
        match self {
            Analyzer::Deg0 => 0,
            Analyzer::Deg45 => 45,
            Analyzer::Deg90 => 90,
            Analyzer::Deg135 => 135,
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 => Ok(Analyzer::Deg0),
            45 => Ok(Analyzer::Deg45),
            90 => Ok(Analyzer::Deg90),
            135 => Ok(Analyzer::Deg135),
            other => Err(Error::Mosaic(format!("unknown analyzer angle {other}°"))),
        }
    }

    /// Conventional plane file stem, e.g. `I045`.
    pub fn file_stem(self) -> String {
        format!("I{:03}", self.degrees())
    }
}

/// Four co-registered intensity images behind analyzers at 0°, 45°, 90° and 135°.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizationStack {
    pub i0: Plane,
    pub i45: Plane,
    pub i90: Plane,
    pub i135: Plane,
}

impl PolarizationStack {
    /// Builds a stack, checking shapes and that every intensity is finite and non-negative.
    pub fn new(i0: Plane, i45: Plane, i90: Plane, i135: Plane) -> Result<Self> {
        let stack = Self::from_planes(i0, i45, i90, i135)?;
        for a in Analyzer::ALL {
            if let Some(v) = stack.plane(a).iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidValue(format!(
                    "plane {} holds intensity {v}",
                    a.file_stem()
                )));
            }
        }
        Ok(stack)
    }

    /// Builds a stack, checking shapes only.
    pub fn from_planes(i0: Plane, i45: Plane, i90: Plane, i135: Plane) -> Result<Self> {
        let dims = i0.dim();
        check_dims("plane I045", dims, i45.dim())?;
        check_dims("plane I090", dims, i90.dim())?;
        check_dims("plane I135", dims, i135.dim())?;
        Ok(Self { i0, i45, i90, i135 })
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        let p = Plane::from_elem((h, w), v);
        Self {
            i0: p.clone(),
            i45: p.clone(),
            i90: p.clone(),
            i135: p,
        }
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.i0.dim()
    }

    pub fn plane(&self, a: Analyzer) -> &Plane {
        match a {
            Analyzer::Deg0 => &self.i0,
            Analyzer::Deg45 => &self.i45,
            Analyzer::Deg90 => &self.i90,
            Analyzer::Deg135 => &self.i135,
        }
    }

    pub fn planes(&self) -> [&Plane; 4] {
        [&self.i0, &self.i45, &self.i90, &self.i135]
    }

    pub fn into_planes(self) -> [Plane; 4] {
        [self.i0, self.i45, self.i90, self.i135]
    }

    /// Per-pixel `|(i0 + i90) − (i45 + i135)|`; zero for ideal data.
    pub fn consistency_residual(&self) -> Plane {
        let (h, w) = self.dims();
        par::grid(h, w, |i, j| {
            ((self.i0[[i, j]] + self.i90[[i, j]]) - (self.i45[[i, j]] + self.i135[[i, j]])).abs()
        })
    }

    /// Per-pixel mean of the four planes.
    pub fn mean_intensity(&self) -> Plane {
        let (h, w) = self.dims();
        par::grid(h, w, |i, j| {
            (self.i0[[i, j]] + self.i45[[i, j]] + self.i90[[i, j]] + self.i135[[i, j]]) / 4.0
        })
    }
}

/// Linear Stokes image `(S0, S1, S2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesImage {
    pub s0: Plane,
    pub s1: Plane,
    pub s2: Plane,
}

/// Counts of physically invalid Stokes pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StokesValidity {
    pub negative_s0: usize,
    pub overpolarized: usize,
    pub non_finite: usize,
}

impl StokesValidity {
    pub fn is_valid(&self) -> bool {
        self.negative_s0 == 0 && self.overpolarized == 0 && self.non_finite == 0
    }
}

impl StokesImage {
    pub fn new(s0: Plane, s1: Plane, s2: Plane) -> Result<Self> {
        let dims = s0.dim();
        check_dims("Stokes plane s1", dims, s1.dim())?;
        check_dims("Stokes plane s2", dims, s2.dim())?;
        Ok(Self { s0, s1, s2 })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            s0: Plane::zeros((h, w)),
            s1: Plane::zeros((h, w)),
            s2: Plane::zeros((h, w)),
        }
    }

    /// Spatially constant Stokes image.
    pub fn uniform(h: usize, w: usize, s: [f64; 3]) -> Self {
        Self {
            s0: Plane::from_elem((h, w), s[0]),
            s1: Plane::from_elem((h, w), s[1]),
            s2: Plane::from_elem((h, w), s[2]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.s0.dim()
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 3] {
        [self.s0[[i, j]], self.s1[[i, j]], self.s2[[i, j]]]
    }

    /// Counts pixels violating `s0 ≥ 0` or `√(s1² + s2²) ≤ s0·(1 + rel_tol)`.
    pub fn validate(&self, rel_tol: f64) -> StokesValidity {
        let mut v = StokesValidity::default();
        for ((s0, s1), s2) in self.s0.iter().zip(&self.s1).zip(&self.s2) {
            if !(s0.is_finite() && s1.is_finite() && s2.is_finite()) {
                v.non_finite += 1;
                continue;
            }
            if *s0 < 0.0 {
                v.negative_s0 += 1;
            }
            if s1.hypot(*s2) > s0.max(0.0) * (1.0 + rel_tol) {
                v.overpolarized += 1;
            }
        }
        v
    }
}

/// `S0 = I0 + I90`, `S1 = I0 − I90`, `S2 = I45 − I135`.
pub fn stokes_from_stack(stack: &PolarizationStack) -> StokesImage {
    let (h, w) = stack.dims();
    let s0 = par::grid(h, w, |i, j| stack.i0[[i, j]] + stack.i90[[i, j]]);
    let s1 = par::grid(h, w, |i, j| stack.i0[[i, j]] - stack.i90[[i, j]]);
    let s2 = par::grid(h, w, |i, j| stack.i45[[i, j]] - stack.i135[[i, j]]);
    StokesImage { s0, s1, s2 }
}

/// Analyzer intensity `I(ψ) = (S0 + S1·cos 2ψ + S2·sin 2ψ)/2` at the four
/// stack angles. The trigonometric factors are exact there (0, ±1), so the
/// evaluation is written out without calling `cos`/`sin`.
pub fn stack_from_stokes(s: &StokesImage) -> PolarizationStack {
    let (h, w) = s.dims();
    let i0 = par::grid(h, w, |i, j| 0.5 * (s.s0[[i, j]] + s.s1[[i, j]]));
    let i45 = par::grid(h, w, |i, j| 0.5 * (s.s0[[i, j]] + s.s2[[i, j]]));
    let i90 = par::grid(h, w, |i, j| 0.5 * (s.s0[[i, j]] - s.s1[[i, j]]));
    let i135 = par::grid(h, w, |i, j| 0.5 * (s.s0[[i, j]] - s.s2[[i, j]]));
    PolarizationStack { i0, i45, i90, i135 }
}

/// Intensity behind an analyzer at an arbitrary angle `psi` (radians).
pub fn analyzer_intensity(s: [f64; 3], psi: f64) -> f64 {
    0.5 * (s[0] + s[1] * (2.0 * psi).cos() + s[2] * (2.0 * psi).sin())
}

/// Thresholds used when deriving DoP/AoP maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarOptions {
    /// Pixels with `s0 ≤ s0_floor` get the sentinel DoP and are flagged.
    pub s0_floor: f64,
    /// Relative tolerance on `DoP ≤ 1`.
    pub dop_tolerance: f64,
    /// DoP value written at degenerate pixels.
    pub sentinel: f64,
    /// Accept over-polarized pixels as valid with DoP clamped to 1.
    pub clamp: bool,
}

impl Default for PolarOptions {
    fn default() -> Self {
        Self {
            s0_floor: 1e-12,
            dop_tolerance: 1e-6,
            sentinel: 0.0,
            clamp: false,
        }
    }
}

/// Raw degree-of-polarization map.
#[derive(Debug, Clone)]
pub struct DopMap {
    pub values: Plane,
    pub valid: Mask,
    /// Pixels with `s0` at or below the floor.
    pub degenerate: usize,
    /// Pixels with DoP above `1 + tolerance`; their raw value is kept.
    pub overpolarized: usize,
}

/// `ρ = √(s1² + s2²)/s0`.
///
/// Over-polarized pixels keep their raw ratio and are counted; they are not
/// clamped here.
pub fn dop(s: &StokesImage, opts: &PolarOptions) -> Result<DopMap> {
    let (h, w) = s.dims();
    if h * w > 0 && s.s0.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateStokes);
    }
    let cells = par::grid(h, w, |i, j| {
        let s0 = s.s0[[i, j]];
        if !(s0 > opts.s0_floor) || !s0.is_finite() {
            return (opts.sentinel, false);
        }
        let rho = s.s1[[i, j]].hypot(s.s2[[i, j]]) / s0;
        (rho, rho.is_finite())
    });
    let values = cells.mapv(|c| c.0);
    let valid = cells.mapv(|c| c.1);
    let degenerate = valid.iter().filter(|v| !**v).count();
    let overpolarized = values
        .iter()
        .zip(&valid)
        .filter(|(r, v)| **v && **r > 1.0 + opts.dop_tolerance)
        .count();
    Ok(DopMap {
        values,
        valid,
        degenerate,
        overpolarized,
    })
}

/// Reduces an angle to the canonical half-period `[−π/2, π/2)`.
pub fn wrap_half_period(a: f64) -> f64 {
    let r = (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if r >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        r
    }
}

/// Reduces an angle to `[0, 2π)`.
pub fn wrap_full_period(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

/// Angle-of-polarization map.
#[derive(Debug, Clone)]
pub struct AopMap {
    pub values: Plane,
    /// `false` where `s1 = s2 = 0`; those pixels hold 0.
    pub valid: Mask,
    pub degenerate: usize,
}

/// AoP of a single Stokes vector, `½·atan2(s2, s1)` in `[−π/2, π/2)`.
/// Returns `None` for `s1 = s2 = 0`.
pub fn aop_of(s1: f64, s2: f64) -> Option<f64> {
    if s1 == 0.0 && s2 == 0.0 {
        None
    } else {
        Some(wrap_half_period(0.5 * s2.atan2(s1)))
    }
}

/// `φ = ½·atan2(s2, s1)` reduced to `[−π/2, π/2)`.
pub fn aop(s: &StokesImage) -> AopMap {
    let (h, w) = s.dims();
    let cells = par::grid(h, w, |i, j| aop_of(s.s1[[i, j]], s.s2[[i, j]]));
    let values = cells.mapv(|c| c.unwrap_or(0.0));
    let valid = cells.mapv(|c| c.is_some());
    let degenerate = valid.iter().filter(|v| !**v).count();
    AopMap {
        values,
        valid,
        degenerate,
    }
}

/// DoP and AoP maps with validity masks, ready for zenith/azimuth inversion.
#[derive(Debug, Clone)]
pub struct PolarParamMaps {
    /// Degree of polarization in `[0, 1]`.
    pub dop: Plane,
    /// Angle of polarization in `[−π/2, π/2)`.
    pub aop: Plane,
    pub dop_valid: Mask,
    pub aop_valid: Mask,
    /// Pixels whose raw DoP exceeded `1 + tolerance`.
    pub overpolarized: usize,
}

impl PolarParamMaps {
    pub fn dims(&self) -> (usize, usize) {
        self.dop.dim()
    }

    /// Builds maps from explicit values; every pixel valid.
    pub fn from_values(dop: Plane, aop: Plane) -> Result<Self> {
        check_dims("aop map", dop.dim(), aop.dim())?;
        let valid = Mask::from_elem(dop.dim(), true);
        Ok(Self {
            dop,
            aop,
            dop_valid: valid.clone(),
            aop_valid: valid,
            overpolarized: 0,
        })
    }
}

/// DoP/AoP with the clamping policy applied.
///
/// Raw DoP within the tolerance of 1 is clamped to 1. Beyond the tolerance the
/// value is stored as 1 and the pixel is flagged invalid, unless
/// `opts.clamp` is set, in which case it stays valid.
pub fn polar_params(s: &StokesImage, opts: &PolarOptions) -> Result<PolarParamMaps> {
    let raw = dop(s, opts)?;
    let aop = aop(s);
    let mut dop = raw.values;
    let mut dop_valid = raw.valid;
    for (r, v) in dop.iter_mut().zip(dop_valid.iter_mut()) {
        if !*v {
            continue;
        }
        if *r > 1.0 + opts.dop_tolerance {
            *r = 1.0;
            *v = opts.clamp;
        } else if *r > 1.0 {
            *r = 1.0;
        }
    }
    Ok(PolarParamMaps {
        dop,
        aop: aop.values,
        dop_valid,
        aop_valid: aop.valid,
        overpolarized: raw.overpolarized,
    })
}

/// Per-plane noise standard deviation estimated from the analyzer
/// redundancy `i0 + i90 = i45 + i135`: with i.i.d. plane noise of variance
/// `σ²` the residual has variance `4σ²`. Averaged over `mask` (default: all
/// pixels).
pub fn estimate_plane_noise(stack: &PolarizationStack, mask: Option<&Mask>) -> Result<f64> {
    let (h, w) = stack.dims();
    if let Some(m) = mask {
        check_dims("noise mask", (h, w), m.dim())?;
    }
    let idx: Vec<usize> = (0..h * w)
        .filter(|k| mask.is_none_or(|m| m[[k / w, k % w]]))
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask("noise estimate over an empty mask".into()));
    }
    let r = stack.consistency_residual();
    let r = r.as_slice().expect("standard layout");
    let ss = par::sum_indexed(idx.len(), |k| r[idx[k]] * r[idx[k]]);
    Ok((ss / idx.len() as f64 / 4.0).sqrt())
}

/// Averaging applied to a Stokes image before DoP/AoP extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StokesSmoothing {
    Off,
    /// Fixed `(2r + 1)²` window.
    Radius(usize),
    /// Smallest radius whose window brings the per-pixel noise `σ / (2r + 1)`
    /// down to `target`, capped at `max_radius`. Noiseless input gets radius 0.
    Auto { target: f64, max_radius: usize },
}

impl Default for StokesSmoothing {
    fn default() -> Self {
        StokesSmoothing::Auto {
            target: 0.0025,
            max_radius: 3,
        }
    }
}

impl StokesSmoothing {
    /// Window radius for plane noise `sigma`.
    pub fn radius_for(&self, sigma: f64) -> usize {
        match *self {
            StokesSmoothing::Off => 0,
            StokesSmoothing::Radius(r) => r,
            StokesSmoothing::Auto { target, max_radius } => (0..=max_radius)
                .find(|r| sigma / (2 * r + 1) as f64 <= target)
                .unwrap_or(max_radius),
        }
    }
}

/// Box average of `s0, s1, s2` over a `(2r + 1)²` window, restricted to
/// `mask` pixels; pixels outside the mask are copied unchanged. Averaging
/// the linear Stokes components (not DoP/AoP) keeps the estimate unbiased
/// under additive noise.
pub fn smooth_stokes(s: &StokesImage, mask: Option<&Mask>, radius: usize) -> Result<StokesImage> {
    let (h, w) = s.dims();
    if let Some(m) = mask {
        check_dims("smoothing mask", (h, w), m.dim())?;
    }
    if radius == 0 {
        return Ok(s.clone());
    }
    let inside = |i: usize, j: usize| mask.is_none_or(|m| m[[i, j]]);
    let cells = par::grid(h, w, |i, j| {
        if !inside(i, j) {
            return [s.s0[[i, j]], s.s1[[i, j]], s.s2[[i, j]]];
        }
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for a in i.saturating_sub(radius)..(i + radius + 1).min(h) {
            for b in j.saturating_sub(radius)..(j + radius + 1).min(w) {
                if inside(a, b) {
                    acc[0] += s.s0[[a, b]];
                    acc[1] += s.s1[[a, b]];
                    acc[2] += s.s2[[a, b]];
                    n += 1.0;
                }
            }
        }
        acc.map(|v| v / n)
    });
    StokesImage::new(cells.mapv(|c| c[0]), cells.mapv(|c| c[1]), cells.mapv(|c| c[2]))
}

/// Polarized / unpolarized intensity split.
#[derive(Debug, Clone)]
pub struct SpecularDiffuse {
    /// Fully polarized part, `√(s1² + s2²)`.
    pub specular: Plane,
    /// Unpolarized remainder, `s0 − specular`.
    pub diffuse: Plane,
    /// `false` where the diffuse part is negative beyond tolerance.
    pub valid: Mask,
    pub flagged: usize,
}

/// Splits each pixel into its polarized (`specular`) and unpolarized
/// (`diffuse`) intensity. This is the Stokes decomposition, used as a
/// stand-in for the reflection-component separation of learned pipelines.
pub fn split_specular_diffuse(s: &StokesImage, rel_tol: f64) -> SpecularDiffuse {
    let (h, w) = s.dims();
    let specular = par::grid(h, w, |i, j| s.s1[[i, j]].hypot(s.s2[[i, j]]));
    let diffuse = par::grid(h, w, |i, j| s.s0[[i, j]] - specular[[i, j]]);
    let valid = par::grid(h, w, |i, j| {
        diffuse[[i, j]] >= -rel_tol * s.s0[[i, j]].abs().max(f64::MIN_POSITIVE)
    });
    let flagged = valid.iter().filter(|v| !**v).count();
    SpecularDiffuse {
        specular,
        diffuse,
        valid,
        flagged,
    }
}

/// 2×2 analyzer layout of a DoFP sensor: `[top-left, top-right, bottom-left, bottom-right]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofpPattern {
    layout: [Analyzer; 4],
}

impl DofpPattern {
    pub fn new(layout: [Analyzer; 4]) -> Result<Self> {
        for a in Analyzer::ALL {
            if !layout.contains(&a) {
                return Err(Error::Mosaic(format!(
                    "pattern {:?} is not a permutation of the four analyzer angles",
                    layout.map(Analyzer::degrees)
                )));
            }
        }
        Ok(Self { layout })
    }

    pub fn from_degrees(deg: [u32; 4]) -> Result<Self> {
        let mut layout = [Analyzer::Deg0; 4];
        for (slot, d) in layout.iter_mut().zip(deg) {
            *slot = Analyzer::from_degrees(d)?;
        }
        Self::new(layout)
    }

    pub fn layout(&self) -> [Analyzer; 4] {
        self.layout
    }

    /// `(row, col)` offset of `a` inside the 2×2 superpixel.
    pub fn offset(&self, a: Analyzer) -> (usize, usize) {
        let k = self
            .layout
            .iter()
            .position(|x| *x == a)
            .expect("pattern is a permutation");
        (k / 2, k % 2)
    }
}

impl Default for DofpPattern {
    /// `(0°, 45°; 90°, 135°)`.
    fn default() -> Self {
        Self {
            layout: Analyzer::ALL,
        }
    }
}

/// Raw DoFP sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DofpMosaic {
    pub raw: Plane,
    pub pattern: DofpPattern,
}

impl DofpMosaic {
    pub fn new(raw: Plane, pattern: DofpPattern) -> Result<Self> {
        let (h, w) = raw.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Mosaic(format!(
                "raw frame {h}×{w} must have positive even dimensions"
            )));
        }
        Ok(Self { raw, pattern })
    }

    /// Interleaves a stack into a `(2H)×(2W)` mosaic.
    pub fn from_stack(stack: &PolarizationStack, pattern: DofpPattern) -> Self {
        let (h, w) = stack.dims();
        let raw = par::grid(2 * h, 2 * w, |r, c| {
            let k = (r % 2) * 2 + (c % 2);
            stack.plane(pattern.layout[k])[[r / 2, c / 2]]
        });
        Self { raw, pattern }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DemosaicMode {
    /// Each angle plane is its own sub-lattice, `H×W`.
    #[default]
    Superpixel,
    /// Each angle plane is bilinearly interpolated to `(2H)×(2W)`.
    Bilinear,
}

pub fn demosaic_dofp(m: &DofpMosaic, mode: DemosaicMode) -> Result<PolarizationStack> {
    let (rh, rw) = m.raw.dim();
    if rh % 2 != 0 || rw % 2 != 0 {
        return Err(Error::Mosaic(format!(
            "raw frame {rh}×{rw} must have even dimensions"
        )));
    }
    let (h, w) = (rh / 2, rw / 2);
    let sub = |a: Analyzer| -> Plane {
        let (oy, ox) = m.pattern.offset(a);
        par::grid(h, w, |i, j| m.raw[[2 * i + oy, 2 * j + ox]])
    };
    let [p0, p45, p90, p135] = Analyzer::ALL.map(|a| {
        let lattice = sub(a);
        match mode {
            DemosaicMode::Superpixel => lattice,
            DemosaicMode::Bilinear => upsample_lattice(&lattice, m.pattern.offset(a), rh, rw),
        }
    });
    PolarizationStack::from_planes(p0, p45, p90, p135)
}

fn upsample_lattice(lattice: &Plane, (oy, ox): (usize, usize), rh: usize, rw: usize) -> Plane {
    let (h, w) = lattice.dim();
    let axis = |pos: usize, off: usize, n: usize| -> (usize, usize, f64) {
        let u = ((pos as f64 - off as f64) / 2.0).clamp(0.0, (n - 1) as f64);
        let a = u.floor() as usize;
        let b = (a + 1).min(n - 1);
        (a, b, u - a as f64)
    };
    par::grid(rh, rw, |r, c| {
        let (r0, r1, fr) = axis(r, oy, h);
        let (c0, c1, fc) = axis(c, ox, w);
        let top = lattice[[r0, c0]] * (1.0 - fc) + lattice[[r0, c1]] * fc;
        let bottom = lattice[[r1, c0]] * (1.0 - fc) + lattice[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}
