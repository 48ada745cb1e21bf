//! Fresnel degree-of-polarization models, their inversion to zenith angles,
//! azimuth candidates from the AoP, and normal-map assembly.

use crate::error::{check_dims, Error, Result};
use crate::normal::{dot3, NormalMap};
use crate::par;
use crate::polar::{wrap_full_period, wrap_half_period, Mask, PolarParamMaps};
use std::f64::consts::{FRAC_PI_2, PI};

/// Reflection model used to relate DoP to zenith angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReflectionMode {
    Specular,
    #[default]
    Diffuse,
}

impl std::str::FromStr for ReflectionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "specular" => Ok(Self::Specular),
            "diffuse" => Ok(Self::Diffuse),
            other => Err(format!("unknown reflection mode `{other}` (expected specular|diffuse)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FresnelConfig {
    /// Relative refractive index, `> 1`.
    pub eta: f64,
    pub mode: ReflectionMode,
    /// Bisection stops once the bracket is narrower than this (radians).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FresnelConfig {
    fn default() -> Self {
        Self {
            eta: 1.5,
            mode: ReflectionMode::Diffuse,
            tolerance: 1e-12,
            max_iterations: 200,
        }
    }
}

impl FresnelConfig {
    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)?;
        if !(self.tolerance > 0.0) {
            return Err(Error::OutOfDomain {
                what: "solver tolerance",
                value: self.tolerance,
                domain: "(0, ∞)",
            });
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidValue("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 1.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfDomain {
            what: "refractive index",
            value: eta,
            domain: "(1, ∞)",
        })
    }
}

fn check_zenith(theta: f64) -> Result<()> {
    if (0.0..=FRAC_PI_2).contains(&theta) {
        Ok(())
    } else {
        Err(Error::OutOfDomain {
            what: "zenith angle",
            value: theta,
            domain: "[0, π/2]",
        })
    }
}

/// Specular DoP:
/// `ρ = 2 sin²θ cosθ √(η² − sin²θ) / (η² − sin²θ − η² sin²θ + 2 sin⁴θ)`.
pub fn rho_specular(theta: f64, eta: f64) -> Result<f64> {
    check_zenith(theta)?;
    check_eta(eta)?;
    Ok(rho_specular_unchecked(theta, eta))
}

fn rho_specular_unchecked(theta: f64, eta: f64) -> f64 {
    let s = theta.sin();
    let s2 = s * s;
    let e2 = eta * eta;
    let num = 2.0 * s2 * theta.cos() * (e2 - s2).sqrt();
    let den = e2 - s2 - e2 * s2 + 2.0 * s2 * s2;
    num / den
}

/// Diffuse DoP:
/// `ρ = (η − 1/η)² sin²θ / (2 + 2η² − (η + 1/η)² sin²θ + 4 cosθ √(η² − sin²θ))`.
pub fn rho_diffuse(theta: f64, eta: f64) -> Result<f64> {
    check_zenith(theta)?;
    check_eta(eta)?;
    Ok(rho_diffuse_unchecked(theta, eta))
}

fn rho_diffuse_unchecked(theta: f64, eta: f64) -> f64 {
    let s = theta.sin();
    let s2 = s * s;
    let e2 = eta * eta;
    let a = eta - 1.0 / eta;
    let b = eta + 1.0 / eta;
    let num = a * a * s2;
    let den = 2.0 + 2.0 * e2 - b * b * s2 + 4.0 * theta.cos() * (e2 - s2).sqrt();
    num / den
}

/// DoP of `mode` at zenith `theta`.
pub fn rho(mode: ReflectionMode, theta: f64, eta: f64) -> Result<f64> {
    match mode {
        ReflectionMode::Specular => rho_specular(theta, eta),
        ReflectionMode::Diffuse => rho_diffuse(theta, eta),
    }
}

/// `arctan η`, where the specular DoP reaches 1.
pub fn brewster_angle(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(eta.atan())
}

/// Largest diffuse DoP, attained at grazing incidence.
pub fn rho_diffuse_max(eta: f64) -> Result<f64> {
    rho_diffuse(FRAC_PI_2, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZenithBranch {
    Unique,
    TwoFold,
    None,
}

/// Zenith angles consistent with one measured DoP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZenithSolution {
    pub theta_low: Option<f64>,
    pub theta_high: Option<f64>,
    pub branch: ZenithBranch,
}

impl ZenithSolution {
    const NONE: Self = Self {
        theta_low: None,
        theta_high: None,
        branch: ZenithBranch::None,
    };

    fn unique(theta: f64) -> Self {
        Self {
            theta_low: Some(theta),
            theta_high: None,
            branch: ZenithBranch::Unique,
        }
    }

    /// Solutions in `[low, high]` order.
    pub fn candidates(&self) -> impl Iterator<Item = f64> {
        self.theta_low.into_iter().chain(self.theta_high)
    }
}

/// Bisection for `f(θ) = target` on `[lo, hi]`, where `f` is monotone and
/// `increasing` gives its direction.
fn bisect<F: Fn(f64) -> f64>(
    f: F,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    increasing: bool,
    cfg: &FresnelConfig,
) -> Result<f64> {
    for _ in 0..cfg.max_iterations {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= cfg.tolerance || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if (f(mid) < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo <= cfg.tolerance {
        Ok(0.5 * (lo + hi))
    } else {
        Err(Error::ZenithNonConvergence {
            iterations: cfg.max_iterations,
            lo,
            hi,
        })
    }
}

/// Zenith angle(s) producing DoP `rho` under `cfg.mode`.
///
/// Diffuse DoP is monotone, so there is at most one root; values above the
/// grazing maximum return [`ZenithBranch::None`]. Specular DoP rises to 1 at
/// the Brewster angle and falls back to 0, so each side is bisected
/// separately. Within `cfg.tolerance` of 1 the branches merge and the Brewster
/// angle is returned as the unique solution.
pub fn invert_zenith(rho: f64, cfg: &FresnelConfig) -> Result<ZenithSolution> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::OutOfDomain {
            what: "degree of polarization",
            value: rho,
            domain: "[0, 1]",
        });
    }
    let eta = cfg.eta;
    match cfg.mode {
        ReflectionMode::Diffuse => {
            if rho == 0.0 {
                return Ok(ZenithSolution::unique(0.0));
            }
            let max = rho_diffuse_unchecked(FRAC_PI_2, eta);
            if rho > max {
                return Ok(ZenithSolution::NONE);
            }
            let f = |t| rho_diffuse_unchecked(t, eta);
            bisect(f, rho, 0.0, FRAC_PI_2, true, cfg).map(ZenithSolution::unique)
        }
        ReflectionMode::Specular => {
            let brewster = eta.atan();
            if rho >= 1.0 - cfg.tolerance {
                return Ok(ZenithSolution::unique(brewster));
            }
            let f = |t| rho_specular_unchecked(t, eta);
            let low = if rho == 0.0 {
                0.0
            } else {
                bisect(f, rho, 0.0, brewster, true, cfg)?
            };
            let high = if rho == 0.0 {
                FRAC_PI_2
            } else {
                bisect(f, rho, brewster, FRAC_PI_2, false, cfg)?
            };
            Ok(ZenithSolution {
                theta_low: Some(low),
                theta_high: Some(high),
                branch: ZenithBranch::TwoFold,
            })
        }
    }
}

/// The two azimuths compatible with one AoP; they differ by π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzimuthCandidates {
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub mode: ReflectionMode,
}

impl AzimuthCandidates {
    pub fn both(&self) -> [f64; 2] {
        [self.alpha_a, self.alpha_b]
    }
}

/// Diffuse: `α ∈ {φ, φ + π}`. Specular: `α ∈ {φ + π/2, φ − π/2}`.
pub fn azimuth_candidates(phi: f64, mode: ReflectionMode) -> AzimuthCandidates {
    let base = match mode {
        ReflectionMode::Diffuse => phi,
        ReflectionMode::Specular => phi + FRAC_PI_2,
    };
    let alpha_a = wrap_full_period(base);
    AzimuthCandidates {
        alpha_a,
        alpha_b: wrap_full_period(alpha_a + PI),
        mode,
    }
}

/// AoP produced by a surface with azimuth `alpha` under `mode`.
pub fn aop_from_azimuth(alpha: f64, mode: ReflectionMode) -> f64 {
    match mode {
        ReflectionMode::Diffuse => wrap_half_period(alpha),
        ReflectionMode::Specular => wrap_half_period(alpha - FRAC_PI_2),
    }
}

/// `n = (sinθ cosα, sinθ sinα, cosθ)`.
pub fn assemble_normal(theta: f64, alpha: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [st * ca, st * sa, ct]
}

/// Zenith and azimuth of a unit normal; azimuth in `[0, 2π)`.
pub fn normal_angles(n: [f64; 3]) -> (f64, f64) {
    let theta = n[2].clamp(-1.0, 1.0).acos();
    let alpha = wrap_full_period(n[1].atan2(n[0]));
    (theta, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZenithChoice {
    #[default]
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AzimuthChoice {
    #[default]
    First,
    Second,
}

/// Selects one normal among the (up to four) candidates of each pixel.
#[derive(Debug, Clone, Copy)]
pub enum Disambiguator<'a> {
    /// Candidate closest to a reference normal map.
    Oracle(&'a NormalMap),
    /// Greedy scanline pass: candidate closest (summed angular deviation) to
    /// the already-resolved up and left neighbours.
    Smoothness,
    /// Always the same branch.
    FixedBranch {
        zenith: ZenithChoice,
        azimuth: AzimuthChoice,
    },
}

/// Per-pixel solve result.
#[derive(Debug, Clone)]
pub struct NormalSolution {
    pub normals: NormalMap,
    /// Foreground pixels that produced no normal (invalid DoP, no zenith
    /// root, or solver failure).
    pub failed: usize,
    /// Foreground pixels considered.
    pub considered: usize,
    /// Pixels masked because DoP exceeded the diffuse maximum.
    pub above_diffuse_max: usize,
}

impl NormalSolution {
    pub fn failure_fraction(&self) -> f64 {
        if self.considered == 0 {
            0.0
        } else {
            self.failed as f64 / self.considered as f64
        }
    }
}

enum PixelCandidates {
    Background,
    Failed { above_max: bool },
    Ok { cands: Vec<[f64; 3]>, zenith_count: usize },
}

fn pixel_candidates(
    params: &PolarParamMaps,
    cfg: &FresnelConfig,
    i: usize,
    j: usize,
    fg: bool,
) -> PixelCandidates {
    if !fg {
        return PixelCandidates::Background;
    }
    if !params.dop_valid[[i, j]] {
        return PixelCandidates::Failed { above_max: false };
    }
    let sol = match invert_zenith(params.dop[[i, j]], cfg) {
        Ok(s) => s,
        Err(_) => return PixelCandidates::Failed { above_max: false },
    };
    if sol.branch == ZenithBranch::None {
        return PixelCandidates::Failed { above_max: true };
    }
    // An undefined AoP only occurs at zero DoP, where the azimuth is irrelevant
    // for the low branch; 0 is used.
    let phi = if params.aop_valid[[i, j]] {
        params.aop[[i, j]]
    } else {
        0.0
    };
    let az = azimuth_candidates(phi, cfg.mode);
    let mut cands = Vec::with_capacity(4);
    let mut zenith_count = 0;
    for theta in sol.candidates() {
        zenith_count += 1;
        for alpha in az.both() {
            cands.push(assemble_normal(theta, alpha));
        }
    }
    PixelCandidates::Ok {
        cands,
        zenith_count,
    }
}

fn pick_closest(cands: &[[f64; 3]], reference: &[[f64; 3]]) -> [f64; 3] {
    let mut best = cands[0];
    let mut best_cost = f64::INFINITY;
    for c in cands {
        let cost: f64 = reference
            .iter()
            .map(|r| dot3(*c, *r).clamp(-1.0, 1.0).acos())
            .sum();
        if cost < best_cost {
            best_cost = cost;
            best = *c;
        }
    }
    best
}

/// Inverts DoP/AoP maps to a normal map.
///
/// Each foreground pixel (per `foreground`, default all) yields up to two
/// zenith angles and two azimuths; `disambiguator` picks one of the
/// resulting normals. Pixels without a solution are masked out and counted.
/// Oracle and fixed-branch selection run per pixel in parallel; the
/// smoothness pass is sequential in scanline order.
pub fn solve_normal_map(
    params: &PolarParamMaps,
    cfg: &FresnelConfig,
    disambiguator: Disambiguator<'_>,
    foreground: Option<&Mask>,
) -> Result<NormalSolution> {
    cfg.validate()?;
    let (h, w) = params.dims();
    check_dims("aop map", (h, w), params.aop.dim())?;
    if let Some(m) = foreground {
        check_dims("foreground mask", (h, w), m.dim())?;
    }
    if let Disambiguator::Oracle(gt) = disambiguator {
        check_dims("oracle normal map", (h, w), gt.dims())?;
    }
    let fg = |i: usize, j: usize| foreground.is_none_or(|m| m[[i, j]]);
    let pixels = par::grid(h, w, |i, j| pixel_candidates(params, cfg, i, j, fg(i, j)));

    let chosen: Vec<Option<[f64; 3]>> = match disambiguator {
        Disambiguator::Oracle(gt) => par::map_indexed(h * w, |k| {
            let (i, j) = (k / w, k % w);
            match &pixels[[i, j]] {
                PixelCandidates::Ok { cands, .. } => {
                    if gt.mask[[i, j]] {
                        Some(pick_closest(cands, &[gt.at(i, j)]))
                    } else {
                        Some(cands[0])
                    }
                }
                _ => None,
            }
        }),
        Disambiguator::FixedBranch { zenith, azimuth } => par::map_indexed(h * w, |k| {
            let (i, j) = (k / w, k % w);
            match &pixels[[i, j]] {
                PixelCandidates::Ok {
                    cands,
                    zenith_count,
                } => {
                    let zi = match zenith {
                        ZenithChoice::High if *zenith_count > 1 => 1,
                        _ => 0,
                    };
                    let ai = match azimuth {
                        AzimuthChoice::First => 0,
                        AzimuthChoice::Second => 1,
                    };
                    Some(cands[zi * 2 + ai])
                }
                _ => None,
            }
        }),
        Disambiguator::Smoothness => {
            let mut out: Vec<Option<[f64; 3]>> = vec![None; h * w];
            for i in 0..h {
                for j in 0..w {
                    if let PixelCandidates::Ok { cands, .. } = &pixels[[i, j]] {
                        let mut refs = Vec::with_capacity(2);
                        if i > 0 {
                            refs.extend(out[(i - 1) * w + j]);
                        }
                        if j > 0 {
                            refs.extend(out[i * w + j - 1]);
                        }
                        out[i * w + j] = Some(if refs.is_empty() {
                            cands[0]
                        } else {
                            pick_closest(cands, &refs)
                        });
                    }
                }
            }
            out
        }
    };

    let mut failed = 0;
    let mut considered = 0;
    let mut above_diffuse_max = 0;
    for p in pixels.iter() {
        match p {
            PixelCandidates::Background => {}
            PixelCandidates::Failed { above_max } => {
                considered += 1;
                failed += 1;
                above_diffuse_max += usize::from(*above_max);
            }
            PixelCandidates::Ok { .. } => considered += 1,
        }
    }
    let normals = NormalMap::from_fn(h, w, |i, j| chosen[i * w + j]);
    Ok(NormalSolution {
        normals,
        failed,
        considered,
        above_diffuse_max,
    })
}
