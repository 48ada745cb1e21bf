//! Flat `key = value` pipeline configuration.
//!
//! UTF-8 text, one assignment per line, `#` starts a comment. Unknown keys
//! and malformed values are rejected with the offending line number.

use crate::error::{Error, Result};
use crate::fresnel::{AzimuthChoice, FresnelConfig, ReflectionMode, ZenithChoice};
use crate::integrator::IntegratorConfig;
use crate::io::BitDepth;
use crate::metrics::{LossWeights, SsimParams};
use crate::patchwork::{BlendMode, PatchSpec};
use crate::polar::{PolarOptions, StokesSmoothing};
use crate::scatter::{Albedo, NoiseSpec, SceneSpec, Surface};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Environment variable consulted when no `--config` is given.
pub const CONFIG_ENV: &str = "POLARSFP_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisambiguatorKind {
    #[default]
    Oracle,
    Smoothness,
    Fixed,
}

impl FromStr for DisambiguatorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "smoothness" => Ok(Self::Smoothness),
            "fixed" => Ok(Self::Fixed),
            o => Err(format!("unknown disambiguator `{o}` (expected oracle|smoothness|fixed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMode {
    #[default]
    Whole,
    Patch,
}

impl FromStr for SolveMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "whole" => Ok(Self::Whole),
            "patch" => Ok(Self::Patch),
            o => Err(format!("unknown solve mode `{o}` (expected whole|patch)")),
        }
    }
}

/// `stokes_smoothing = auto | off | <radius>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothingKind {
    #[default]
    Auto,
    Off,
    Radius(usize),
}

impl FromStr for SmoothingKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "off" => Ok(Self::Off),
            r => r
                .parse()
                .map(Self::Radius)
                .map_err(|_| format!("invalid smoothing `{r}` (expected auto|off|<radius>)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceKind {
    #[default]
    Sphere,
    Plane,
    Paraboloid,
    Torus,
}

impl FromStr for SurfaceKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "plane" => Ok(Self::Plane),
            "paraboloid" => Ok(Self::Paraboloid),
            "torus" => Ok(Self::Torus),
            o => Err(format!("unknown surface `{o}` (expected sphere|plane|paraboloid|torus)")),
        }
    }
}

/// Simulated scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub surface: SurfaceKind,
    pub width: usize,
    pub height: usize,
    pub center: (Option<f64>, Option<f64>),
    /// Defaults to 0.4 × the shorter image side.
    pub sphere_radius: Option<f64>,
    pub plane_normal: [f64; 3],
    pub paraboloid_kx: f64,
    pub paraboloid_ky: f64,
    pub paraboloid_aperture: Option<f64>,
    pub torus_major: Option<f64>,
    pub torus_minor: Option<f64>,
    pub albedo: f64,
    pub illumination: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            surface: SurfaceKind::Sphere,
            width: 128,
            height: 128,
            center: (None, None),
            sphere_radius: None,
            plane_normal: [0.0, 0.0, 1.0],
            paraboloid_kx: 0.02,
            paraboloid_ky: 0.02,
            paraboloid_aperture: None,
            torus_major: None,
            torus_minor: None,
            albedo: 1.0,
            illumination: 1.0,
        }
    }
}

impl SceneConfig {
    fn center(&self) -> Option<(f64, f64)> {
        match self.center {
            (None, None) => None,
            (x, y) => Some((
                x.unwrap_or((self.width as f64 - 1.0) / 2.0),
                y.unwrap_or((self.height as f64 - 1.0) / 2.0),
            )),
        }
    }

    pub fn surface(&self) -> Surface {
        let short = self.width.min(self.height) as f64;
        let center = self.center();
        match self.surface {
            SurfaceKind::Sphere => Surface::Sphere {
                radius: self.sphere_radius.unwrap_or(0.4 * short),
                center,
            },
            SurfaceKind::Plane => Surface::Plane {
                normal: self.plane_normal,
            },
            SurfaceKind::Paraboloid => Surface::Paraboloid {
                kx: self.paraboloid_kx,
                ky: self.paraboloid_ky,
                center,
                aperture: self.paraboloid_aperture,
            },
            SurfaceKind::Torus => Surface::Torus {
                major: self.torus_major.unwrap_or(0.3 * short),
                minor: self.torus_minor.unwrap_or(0.12 * short),
                center,
            },
        }
    }
}

/// Backscatter parameters (`phi` in degrees).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterConfig {
    pub b0: f64,
    pub rho: f64,
    pub phi_deg: f64,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        Self {
            b0: 0.0,
            rho: 0.3,
            phi_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub fresnel: FresnelConfig,
    pub disambiguator: DisambiguatorKind,
    pub fixed_zenith: ZenithChoice,
    pub fixed_azimuth: AzimuthChoice,
    /// Largest tolerated fraction of failed foreground pixels in `solve`.
    pub failure_threshold: f64,
    pub solve_mode: SolveMode,
    pub polar: PolarOptions,
    pub smoothing: SmoothingKind,
    /// Per-pixel noise the automatic smoothing window aims for.
    pub smoothing_target: f64,
    pub smoothing_max_radius: usize,
    pub scene: SceneConfig,
    pub scatter: ScatterConfig,
    pub noise: NoiseSpec,
    /// Explicit backscatter for `descatter`; estimated from the background when absent.
    pub descatter: Option<ScatterConfig>,
    pub descatter_tolerance: f64,
    pub patch: PatchSpec,
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub psnr_peak: f64,
    pub integrator: IntegratorConfig,
    pub grazing_threshold: f64,
    pub plane_bit_depth: BitDepth,
    pub normal_bit_depth: BitDepth,
    pub normal_background: f64,
    pub strict_nz: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fresnel: FresnelConfig::default(),
            disambiguator: DisambiguatorKind::Oracle,
            fixed_zenith: ZenithChoice::Low,
            fixed_azimuth: AzimuthChoice::First,
            failure_threshold: 0.5,
            solve_mode: SolveMode::Whole,
            polar: PolarOptions::default(),
            smoothing: SmoothingKind::Auto,
            smoothing_target: 0.0025,
            smoothing_max_radius: 3,
            scene: SceneConfig::default(),
            scatter: ScatterConfig::default(),
            noise: NoiseSpec {
                sigma: 0.0,
                seed: 0,
            },
            descatter: None,
            descatter_tolerance: 1e-6,
            patch: PatchSpec::default(),
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            psnr_peak: 1.0,
            integrator: IntegratorConfig::default(),
            grazing_threshold: 1e-2,
            plane_bit_depth: BitDepth::Sixteen,
            normal_bit_depth: BitDepth::Sixteen,
            normal_background: 0.5,
            strict_nz: true,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value `{v}`: {e}"))
}

fn finite(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("value `{v}` is not finite"))
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = finite(v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("value `{v}` must be ≥ 0"))
    }
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x = finite(v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("value `{v}` must be > 0"))
    }
}

fn unit_interval(v: &str) -> std::result::Result<f64, String> {
    let x = finite(v)?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("value `{v}` must lie in [0, 1]"))
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        o => Err(format!("invalid boolean `{o}`")),
    }
}

fn vec3(v: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, found `{v}`"));
    }
    Ok([finite(parts[0])?, finite(parts[1])?, finite(parts[2])?])
}

fn count(v: &str) -> std::result::Result<usize, String> {
    let n: usize = parse(v)?;
    if n > 0 {
        Ok(n)
    } else {
        Err("value must be a positive integer".into())
    }
}

impl PipelineConfig {
    /// Parses configuration text; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config {
                path: origin.to_string(),
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn descatter_mut(&mut self) -> &mut ScatterConfig {
        self.descatter.get_or_insert(ScatterConfig {
            b0: 0.0,
            rho: 0.0,
            phi_deg: 0.0,
        })
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "eta" => {
                let eta = finite(v)?;
                if eta <= 1.0 {
                    return Err(format!("eta = {eta} must exceed 1"));
                }
                self.fresnel.eta = eta;
            }
            "mode" => self.fresnel.mode = parse::<ReflectionMode>(v)?,
            "solver_tolerance" => self.fresnel.tolerance = positive(v)?,
            "solver_max_iterations" => self.fresnel.max_iterations = count(v)?,
            "disambiguator" => self.disambiguator = parse(v)?,
            "fixed_zenith" => {
                self.fixed_zenith = match v {
                    "low" => ZenithChoice::Low,
                    "high" => ZenithChoice::High,
                    o => return Err(format!("unknown zenith branch `{o}` (expected low|high)")),
                }
            }
            "fixed_azimuth" => {
                self.fixed_azimuth = match v {
                    "first" => AzimuthChoice::First,
                    "second" => AzimuthChoice::Second,
                    o => return Err(format!("unknown azimuth branch `{o}` (expected first|second)")),
                }
            }
            "failure_threshold" => self.failure_threshold = unit_interval(v)?,
            "solve_mode" => self.solve_mode = parse(v)?,
            "dop_tolerance" => self.polar.dop_tolerance = non_negative(v)?,
            "s0_floor" => self.polar.s0_floor = non_negative(v)?,
            "clamp" => self.polar.clamp = boolean(v)?,
            "stokes_smoothing" => self.smoothing = parse(v)?,
            "smoothing_target" => self.smoothing_target = positive(v)?,
            "smoothing_max_radius" => self.smoothing_max_radius = parse(v)?,
            "surface" => self.scene.surface = parse(v)?,
            "width" => self.scene.width = count(v)?,
            "height" => self.scene.height = count(v)?,
            "center_x" => self.scene.center.0 = Some(finite(v)?),
            "center_y" => self.scene.center.1 = Some(finite(v)?),
            "sphere_radius" => self.scene.sphere_radius = Some(positive(v)?),
            "plane_normal" => self.scene.plane_normal = vec3(v)?,
            "paraboloid_kx" => self.scene.paraboloid_kx = finite(v)?,
            "paraboloid_ky" => self.scene.paraboloid_ky = finite(v)?,
            "paraboloid_aperture" => self.scene.paraboloid_aperture = Some(positive(v)?),
            "torus_major" => self.scene.torus_major = Some(positive(v)?),
            "torus_minor" => self.scene.torus_minor = Some(positive(v)?),
            "albedo" => self.scene.albedo = non_negative(v)?,
            "illumination" => self.scene.illumination = non_negative(v)?,
            "scatter_b0" => self.scatter.b0 = non_negative(v)?,
            "scatter_rho" => self.scatter.rho = unit_interval(v)?,
            "scatter_phi_deg" => self.scatter.phi_deg = finite(v)?,
            "noise_sigma" => self.noise.sigma = non_negative(v)?,
            "seed" => self.noise.seed = parse(v)?,
            "descatter_b0" => self.descatter_mut().b0 = non_negative(v)?,
            "descatter_rho" => self.descatter_mut().rho = unit_interval(v)?,
            "descatter_phi_deg" => self.descatter_mut().phi_deg = finite(v)?,
            "descatter_tolerance" => self.descatter_tolerance = non_negative(v)?,
            "patch_size" => self.patch.size = count(v)?,
            "patch_stride" => self.patch.stride = count(v)?,
            "patch_min_valid" => self.patch.min_valid_fraction = unit_interval(v)?,
            "patch_blend" => self.patch.blend = parse::<BlendMode>(v)?,
            "lambda1" | "lambda_hist" => self.weights.hist = non_negative(v)?,
            "lambda2" | "lambda_l1" => self.weights.l1 = non_negative(v)?,
            "lambda3" | "lambda_ssim" => self.weights.ssim = non_negative(v)?,
            "lambda4" | "lambda_tv" => self.weights.tv = non_negative(v)?,
            "lambda5" | "lambda_perceptual" => self.weights.perceptual = non_negative(v)?,
            "lambda6" | "lambda_normal" => self.weights.normal = non_negative(v)?,
            "ssim_k1" => self.ssim.k1 = positive(v)?,
            "ssim_k2" => self.ssim.k2 = positive(v)?,
            "ssim_range" => self.ssim.dynamic_range = positive(v)?,
            "ssim_window" => {
                let n = count(v)?;
                if n % 2 == 0 {
                    return Err("ssim_window must be odd".into());
                }
                self.ssim.window = n;
            }
            "ssim_sigma" => self.ssim.sigma = positive(v)?,
            "psnr_peak" => self.psnr_peak = positive(v)?,
            "integrator_tolerance" => self.integrator.tolerance = positive(v)?,
            "integrator_max_iterations" => self.integrator.max_iterations = Some(count(v)?),
            "integrator_screening" => self.integrator.screening = non_negative(v)?,
            "grazing_threshold" => self.grazing_threshold = non_negative(v)?,
            "plane_bit_depth" => self.plane_bit_depth = BitDepth::from_bits(parse(v)?).map_err(|e| e.to_string())?,
            "normal_bit_depth" => self.normal_bit_depth = BitDepth::from_bits(parse(v)?).map_err(|e| e.to_string())?,
            "normal_background" => self.normal_background = unit_interval(v)?,
            "strict_nz" => self.strict_nz = boolean(v)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.fresnel.validate()?;
        self.patch.validate()?;
        self.ssim.validate()?;
        self.weights.validate()?;
        self.scene_spec().validate()?;
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            surface: self.scene.surface(),
            height: self.scene.height,
            width: self.scene.width,
            mode: self.fresnel.mode,
            eta: self.fresnel.eta,
            albedo: Albedo::Constant(self.scene.albedo),
            illumination: self.scene.illumination,
        }
    }

    pub fn stokes_smoothing(&self) -> StokesSmoothing {
        match self.smoothing {
            SmoothingKind::Auto => StokesSmoothing::Auto {
                target: self.smoothing_target,
                max_radius: self.smoothing_max_radius,
            },
            SmoothingKind::Off => StokesSmoothing::Off,
            SmoothingKind::Radius(r) => StokesSmoothing::Radius(r),
        }
    }

    pub fn background_color(&self) -> [f64; 3] {
        [self.normal_background; 3]
    }
}
