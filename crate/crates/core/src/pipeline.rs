//! Scene-directory orchestration behind the `polarsfp` subcommands.
//!
//! Scene layout (this toolkit's own convention):
//!
//! ```text
//! scene/I000.png … I135.png     observed analyzer planes
//!       mask.png                foreground mask
//!       normal_gt.png           reference normals (optional)
//!       stokes.pstk             observed Stokes at full precision (optional)
//!       clean/                  clear-medium reference planes (optional)
//!       scene.json              analytic surface description (optional)
//!       manifest.json           sha256 of every file written by `simulate`
//! ```
//!
//! Derived outputs go to the output directory: `descattered/`,
//! `normal_pred.png`, `mask_pred.png`, `depth.pdep`, `residual.pdep`,
//! `mesh.obj`, `metrics.json`, `metrics.csv` and one `*_report.json` per
//! subcommand.

use crate::config::{DisambiguatorKind, PipelineConfig, SolveMode};
use crate::error::{check_dims, Error, Result};
use crate::fresnel::{solve_normal_map, Disambiguator, ReflectionMode};
use crate::integrator::{analytic_rmse, depth_to_mesh, integrate, normals_to_gradients};
use crate::io::{
    read_mask_png, read_normal_png, read_stack, sha256_file, write_depth, write_mask_png,
    write_normal_png, write_plane_png, write_stack, write_stokes, MASK_FILE, NORMAL_GT_FILE,
};
use crate::metrics::{
    angular_error_map, hist_l1, l1_loss, normal_cosine_loss, normal_histogram, psnr_planes,
    ssim_planes, total_loss, tv_mean, LossComponents, MetricValue, MetricsReport,
};
use crate::normal::NormalMap;
use crate::patchwork::{stitch_normals, tile_grid, NormalTile, PatchSpec};
use crate::polar::{
    estimate_plane_noise, polar_params, smooth_stokes, stack_from_stokes, stokes_from_stack,
    Analyzer, Mask, Plane, PolarParamMaps, PolarizationStack,
};
use crate::scatter::{
    add_backscatter, add_noise, analytic_depth, descatter_subtract, estimate_backscatter_uniform,
    render_polarization, Albedo, SceneSpec, ScatterField, Surface,
};
use ndarray::s;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILE: &str = "scene.json";
pub const STOKES_FILE: &str = "stokes.pstk";
pub const CLEAN_DIR: &str = "clean";
pub const DESCATTERED_DIR: &str = "descattered";
pub const NORMAL_PRED_FILE: &str = "normal_pred.png";
pub const MASK_PRED_FILE: &str = "mask_pred.png";
pub const DEPTH_FILE: &str = "depth.pdep";
pub const RESIDUAL_FILE: &str = "residual.pdep";
pub const MESH_FILE: &str = "mesh.obj";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_text(path, &text)
}

/// JSON number, with `"inf"` for +∞ and `null` for NaN.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v == f64::INFINITY {
        json!("inf")
    } else {
        Value::Null
    }
}

fn mode_name(m: ReflectionMode) -> &'static str {
    match m {
        ReflectionMode::Specular => "specular",
        ReflectionMode::Diffuse => "diffuse",
    }
}

fn all_true(dims: (usize, usize)) -> Mask {
    Mask::from_elem(dims, true)
}

fn read_optional_mask(path: &Path, dims: (usize, usize)) -> Result<Option<Mask>> {
    if !path.exists() {
        return Ok(None);
    }
    let m = read_mask_png(path)?;
    check_dims(path.display().to_string(), dims, m.dim())?;
    Ok(Some(m))
}

// ---------------------------------------------------------------- simulate

/// One file listed in `manifest.json`, path relative to the scene root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

/// Analytic scene description stored as `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub surface: Surface,
    pub height: usize,
    pub width: usize,
    pub mode: String,
    pub eta: f64,
    pub albedo: f64,
    pub illumination: f64,
    pub scatter_b0: f64,
    pub scatter_rho: f64,
    pub scatter_phi_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneDescription {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            surface: cfg.scene.surface(),
            height: cfg.scene.height,
            width: cfg.scene.width,
            mode: mode_name(cfg.fresnel.mode).to_string(),
            eta: cfg.fresnel.eta,
            albedo: cfg.scene.albedo,
            illumination: cfg.scene.illumination,
            scatter_b0: cfg.scatter.b0,
            scatter_rho: cfg.scatter.rho,
            scatter_phi_deg: cfg.scatter.phi_deg,
            noise_sigma: cfg.noise.sigma,
            seed: cfg.noise.seed,
        }
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let spec = SceneSpec {
            surface: self.surface.clone(),
            height: self.height,
            width: self.width,
            mode: self.mode.parse().map_err(Error::InvalidValue)?,
            eta: self.eta,
            albedo: Albedo::Constant(self.albedo),
            illumination: self.illumination,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(SCENE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub manifest: Manifest,
    pub foreground: usize,
    /// Observed plane samples above full scale, clipped when written.
    pub saturated: usize,
}

impl SimulateSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "command": "simulate",
            "files": self.manifest.files.len(),
            "foreground": self.foreground,
            "saturated": self.saturated,
            "seed": self.manifest.seed,
        })
    }
}

/// Renders the configured scene into `out`: observed (scattered, noisy)
/// planes, the clean reference, ground truth and a checksum manifest.
pub fn cmd_simulate(cfg: &PipelineConfig, out: &Path) -> Result<SimulateSummary> {
    let scene = cfg.scene_spec();
    scene.validate()?;
    let rendered = render_polarization(&scene)?;
    let (h, w) = (scene.height, scene.width);
    let field = ScatterField::uniform(
        h,
        w,
        cfg.scatter.b0,
        cfg.scatter.rho,
        cfg.scatter.phi_deg.to_radians(),
    )?;
    let scattered = add_backscatter(&rendered.stokes, &field)?;
    let observed = add_noise(&stack_from_stokes(&scattered), &cfg.noise)?;
    let saturated = observed
        .planes()
        .iter()
        .map(|p| p.iter().filter(|v| **v > 1.0).count())
        .sum();

    let clean_dir = out.join(CLEAN_DIR);
    ensure_dir(&clean_dir)?;
    let mut written: Vec<String> = write_stack(out, &observed, cfg.plane_bit_depth)?;
    write_stokes(&out.join(STOKES_FILE), &stokes_from_stack(&observed))?;
    written.push(STOKES_FILE.into());
    for name in write_stack(&clean_dir, &rendered.stack, cfg.plane_bit_depth)? {
        written.push(format!("{CLEAN_DIR}/{name}"));
    }
    write_stokes(&clean_dir.join(STOKES_FILE), &rendered.stokes)?;
    written.push(format!("{CLEAN_DIR}/{STOKES_FILE}"));
    write_mask_png(&out.join(MASK_FILE), &rendered.normals.mask)?;
    written.push(MASK_FILE.into());
    write_normal_png(
        &out.join(NORMAL_GT_FILE),
        &rendered.normals,
        cfg.background_color(),
        cfg.normal_bit_depth,
    )?;
    written.push(NORMAL_GT_FILE.into());
    write_json(
        &out.join(SCENE_FILE),
        &serde_json::to_value(SceneDescription::from_config(cfg))?,
    )?;
    written.push(SCENE_FILE.into());

    written.sort();
    let files = written
        .into_iter()
        .map(|path| {
            let sha256 = sha256_file(&out.join(&path))?;
            Ok(ManifestEntry { path, sha256 })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: cfg.noise.seed,
        files,
    };
    write_json(&out.join(MANIFEST_FILE), &serde_json::to_value(&manifest)?)?;
    Ok(SimulateSummary {
        manifest,
        foreground: rendered.normals.foreground_count(),
        saturated,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Recomputes every manifest checksum; returns the paths that differ or are missing.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    let mut bad = Vec::new();
    for e in &manifest.files {
        match sha256_file(&dir.join(&e.path)) {
            Ok(h) if h == e.sha256 => {}
            _ => bad.push(e.path.clone()),
        }
    }
    Ok(bad)
}

// --------------------------------------------------------------- descatter

/// Masked PSNR / SSIM of a stack against a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
}

impl ImageScores {
    fn to_json(self) -> Value {
        json!({ "psnr": num(self.psnr), "ssim": num(self.ssim) })
    }
}

fn stack_pairs<'a>(a: &'a PolarizationStack, b: &'a PolarizationStack) -> Vec<(&'a Plane, &'a Plane)> {
    Analyzer::ALL.iter().map(|x| (a.plane(*x), b.plane(*x))).collect()
}

fn image_scores(
    a: &PolarizationStack,
    reference: &PolarizationStack,
    mask: Option<&Mask>,
    cfg: &PipelineConfig,
) -> Result<ImageScores> {
    check_dims("reference stack", a.dims(), reference.dims())?;
    let pairs = stack_pairs(a, reference);
    Ok(ImageScores {
        psnr: psnr_planes(&pairs, mask, cfg.psnr_peak)?,
        ssim: ssim_planes(&pairs, &cfg.ssim, mask)?,
    })
}

#[derive(Debug, Clone)]
pub struct DescatterSummary {
    /// `(b0, ρ_b, φ_b in degrees)` subtracted.
    pub estimate: (f64, f64, f64),
    /// `"config"` or `"background"`.
    pub source: &'static str,
    pub before: Option<ImageScores>,
    pub after: Option<ImageScores>,
    pub negative_s0: usize,
    pub notes: Vec<String>,
}

impl DescatterSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "command": "descatter",
            "estimate": {
                "b0": num(self.estimate.0),
                "rho": num(self.estimate.1),
                "phi_deg": num(self.estimate.2),
                "source": self.source,
            },
            "before": self.before.map(ImageScores::to_json),
            "after": self.after.map(ImageScores::to_json),
            "negative_s0": self.negative_s0,
            "notes": self.notes,
        })
    }
}

/// Subtracts a uniform backscatter estimate (explicit, or the mean Stokes
/// vector of the background) and writes `out/descattered/`.
pub fn cmd_descatter(scene: &Path, out: &Path, cfg: &PipelineConfig) -> Result<DescatterSummary> {
    let stack = read_stack(scene)?;
    let dims = stack.dims();
    let observed = stokes_from_stack(&stack);
    let mask = read_optional_mask(&scene.join(MASK_FILE), dims)?;
    let (field, source) = match (&cfg.descatter, &mask) {
        (Some(b), _) => (
            ScatterField::uniform(dims.0, dims.1, b.b0, b.rho, b.phi_deg.to_radians())?,
            "config",
        ),
        (None, Some(m)) => (estimate_backscatter_uniform(&observed, &m.mapv(|v| !v))?, "background"),
        (None, None) => {
            return Err(Error::Pipeline(format!(
                "{}: descattering needs {MASK_FILE} for background estimation or an explicit descatter_b0",
                scene.display()
            )))
        }
    };
    let d = descatter_subtract(&observed, &field, cfg.descatter_tolerance)?;
    // Subtracting per plane keeps a zero field an exact identity; the Stokes
    // round trip would project away the plane redundancy.
    let b_planes = stack_from_stokes(&field.stokes());
    let restored = PolarizationStack {
        i0: &stack.i0 - &b_planes.i0,
        i45: &stack.i45 - &b_planes.i45,
        i90: &stack.i90 - &b_planes.i90,
        i135: &stack.i135 - &b_planes.i135,
    };

    let target = out.join(DESCATTERED_DIR);
    ensure_dir(&target)?;
    for a in Analyzer::ALL {
        write_plane_png(
            &target.join(format!("{}.png", a.file_stem())),
            &restored.plane(a).mapv(|v| v.max(0.0)),
            cfg.plane_bit_depth,
        )?;
    }
    write_stokes(&target.join(STOKES_FILE), &d.stokes)?;

    let mut notes = Vec::new();
    let clean_dir = scene.join(CLEAN_DIR);
    let (before, after) = if clean_dir.exists() {
        let clean = read_stack(&clean_dir)?;
        (
            Some(image_scores(&stack, &clean, mask.as_ref(), cfg)?),
            Some(image_scores(&restored, &clean, mask.as_ref(), cfg)?),
        )
    } else {
        notes.push(format!("no {CLEAN_DIR}/ reference; before/after scores skipped"));
        (None, None)
    };
    if d.negative_s0 > 0 {
        notes.push(format!("{} pixels with negative recovered s0", d.negative_s0));
    }
    let b = field.stokes().at(0, 0);
    let rho = if b[0] > 0.0 { b[1].hypot(b[2]) / b[0] } else { 0.0 };
    let phi = 0.5 * b[2].atan2(b[1]);
    let summary = DescatterSummary {
        estimate: (b[0], rho, phi.to_degrees()),
        source,
        before,
        after,
        negative_s0: d.negative_s0,
        notes,
    };
    write_json(&out.join("descatter_report.json"), &summary.to_json())?;
    Ok(summary)
}

// ------------------------------------------------------------------- solve

#[derive(Debug, Clone)]
pub struct SolveSummary {
    pub input: String,
    pub mode: SolveMode,
    /// Plane noise estimated from the analyzer redundancy.
    pub noise_sigma: f64,
    pub smoothing_radius: usize,
    pub considered: usize,
    pub failed: usize,
    pub failure_fraction: f64,
    pub overpolarized: usize,
    pub antipodal: usize,
    pub mae_deg: Option<f64>,
    pub median_ae_deg: Option<f64>,
    pub threshold_exceeded: bool,
    pub normals: NormalMap,
}

impl SolveSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "command": "solve",
            "input": self.input,
            "mode": match self.mode { SolveMode::Whole => "whole", SolveMode::Patch => "patch" },
            "noise_sigma": num(self.noise_sigma),
            "smoothing_radius": self.smoothing_radius,
            "considered": self.considered,
            "failed": self.failed,
            "failure_fraction": num(self.failure_fraction),
            "overpolarized": self.overpolarized,
            "antipodal": self.antipodal,
            "mae_deg": self.mae_deg.map(num),
            "median_ae_deg": self.median_ae_deg.map(num),
            "threshold_exceeded": self.threshold_exceeded,
        })
    }
}

fn disambiguator<'a>(cfg: &PipelineConfig, gt: Option<&'a NormalMap>) -> Result<Disambiguator<'a>> {
    Ok(match cfg.disambiguator {
        DisambiguatorKind::Oracle => Disambiguator::Oracle(gt.ok_or_else(|| {
            Error::Pipeline(format!("oracle disambiguation needs {NORMAL_GT_FILE}"))
        })?),
        DisambiguatorKind::Smoothness => Disambiguator::Smoothness,
        DisambiguatorKind::Fixed => Disambiguator::FixedBranch {
            zenith: cfg.fixed_zenith,
            azimuth: cfg.fixed_azimuth,
        },
    })
}

fn crop_params(p: &PolarParamMaps, (r, c): (usize, usize), n: usize) -> PolarParamMaps {
    let f = |x: &Plane| x.slice(s![r..r + n, c..c + n]).to_owned();
    let m = |x: &Mask| x.slice(s![r..r + n, c..c + n]).to_owned();
    PolarParamMaps {
        dop: f(&p.dop),
        aop: f(&p.aop),
        dop_valid: m(&p.dop_valid),
        aop_valid: m(&p.aop_valid),
        overpolarized: 0,
    }
}

fn crop_normals(n: &NormalMap, (r, c): (usize, usize), size: usize) -> Result<NormalMap> {
    let f = |x: &Plane| x.slice(s![r..r + size, c..c + size]).to_owned();
    NormalMap::new(
        f(&n.nx),
        f(&n.ny),
        f(&n.nz),
        n.mask.slice(s![r..r + size, c..c + size]).to_owned(),
    )
}

/// Patch spec clipped to the frame: tiles never exceed the shorter side.
pub fn fitted_patch_spec(spec: &PatchSpec, dims: (usize, usize)) -> PatchSpec {
    let size = spec.size.min(dims.0).min(dims.1);
    PatchSpec {
        size,
        stride: spec.stride.min(size),
        ..*spec
    }
}

/// Per-pixel solve on the maps of a whole frame or on overlapping tiles
/// stitched back together.
pub fn solve_maps(
    params: &PolarParamMaps,
    foreground: &Mask,
    gt: Option<&NormalMap>,
    cfg: &PipelineConfig,
) -> Result<(NormalMap, usize)> {
    let dis = disambiguator(cfg, gt)?;
    match cfg.solve_mode {
        SolveMode::Whole => Ok((
            solve_normal_map(params, &cfg.fresnel, dis, Some(foreground))?.normals,
            0,
        )),
        SolveMode::Patch => {
            let dims = params.dims();
            let spec = fitted_patch_spec(&cfg.patch, dims);
            let mut tiles = Vec::new();
            for origin in tile_grid(dims, &spec)? {
                let sub = crop_params(params, origin, spec.size);
                let fg = foreground
                    .slice(s![origin.0..origin.0 + spec.size, origin.1..origin.1 + spec.size])
                    .to_owned();
                let sub_gt = gt.map(|g| crop_normals(g, origin, spec.size)).transpose()?;
                let dis = disambiguator(cfg, sub_gt.as_ref())?;
                let normals = solve_normal_map(&sub, &cfg.fresnel, dis, Some(&fg))?.normals;
                tiles.push(NormalTile { origin, normals });
            }
            let st = stitch_normals(&tiles, dims, spec.blend)?;
            Ok((st.normals, st.antipodal))
        }
    }
}

/// DoP/AoP maps of a stack after noise-adaptive Stokes averaging over the
/// foreground. Returns the maps, the estimated plane noise and the radius used.
pub fn prepare_params(
    stack: &PolarizationStack,
    foreground: &Mask,
    cfg: &PipelineConfig,
) -> Result<(PolarParamMaps, f64, usize)> {
    let sigma = if foreground.iter().any(|m| *m) {
        estimate_plane_noise(stack, Some(foreground))?
    } else {
        0.0
    };
    let radius = cfg.stokes_smoothing().radius_for(sigma);
    let stokes = smooth_stokes(&stokes_from_stack(stack), Some(foreground), radius)?;
    Ok((polar_params(&stokes, &cfg.polar)?, sigma, radius))
}

/// Input stack for `solve`: `descattered/` when present, else the scene planes.
fn solve_input(scene: &Path) -> (PathBuf, String) {
    let d = scene.join(DESCATTERED_DIR);
    if d.join(format!("{}.png", Analyzer::Deg0.file_stem())).exists() {
        (d, DESCATTERED_DIR.into())
    } else {
        (scene.to_path_buf(), "observed".into())
    }
}

/// Inverts the scene's polarization planes to a normal map.
pub fn cmd_solve(scene: &Path, out: &Path, cfg: &PipelineConfig) -> Result<SolveSummary> {
    let (dir, input) = solve_input(scene);
    let stack = read_stack(&dir)?;
    let dims = stack.dims();
    let stokes = stokes_from_stack(&stack);
    let foreground = match read_optional_mask(&scene.join(MASK_FILE), dims)? {
        Some(m) => m,
        None => stokes.s0.mapv(|v| v > cfg.polar.s0_floor),
    };
    let gt_path = scene.join(NORMAL_GT_FILE);
    let gt = if gt_path.exists() {
        let (n, _) = read_normal_png(&gt_path, &foreground, cfg.strict_nz)?;
        Some(n)
    } else {
        None
    };
    let (params, noise_sigma, smoothing_radius) = prepare_params(&stack, &foreground, cfg)?;
    let (normals, antipodal) = solve_maps(&params, &foreground, gt.as_ref(), cfg)?;

    let considered = foreground.iter().filter(|m| **m).count();
    let solved = ndarray::Zip::from(&foreground)
        .and(&normals.mask)
        .fold(0usize, |acc, f, n| acc + usize::from(*f && *n));
    let failed = considered - solved;
    let failure_fraction = if considered == 0 {
        0.0
    } else {
        failed as f64 / considered as f64
    };
    let (mae_deg, median_ae_deg) = match &gt {
        Some(g) if solved > 0 => {
            let e = angular_error_map(&normals, g)?;
            (Some(e.mae_deg), Some(e.median_deg))
        }
        _ => (None, None),
    };

    ensure_dir(out)?;
    write_normal_png(
        &out.join(NORMAL_PRED_FILE),
        &normals,
        cfg.background_color(),
        cfg.normal_bit_depth,
    )?;
    write_mask_png(&out.join(MASK_PRED_FILE), &normals.mask)?;
    let summary = SolveSummary {
        input,
        mode: cfg.solve_mode,
        noise_sigma,
        smoothing_radius,
        considered,
        failed,
        failure_fraction,
        overpolarized: params.overpolarized,
        antipodal,
        mae_deg,
        median_ae_deg,
        threshold_exceeded: failure_fraction > cfg.failure_threshold,
        normals,
    };
    write_json(&out.join("solve_report.json"), &summary.to_json())?;
    Ok(summary)
}

// --------------------------------------------------------------- integrate

#[derive(Debug, Clone)]
pub struct IntegrateSummary {
    pub source: String,
    pub iterations: usize,
    pub relative_residual: f64,
    pub objective: f64,
    pub components: usize,
    pub grazing: usize,
    pub max_residual: f64,
    /// RMSE against the analytic depth after per-component offset alignment.
    pub rmse: Option<f64>,
    /// Depth range of the analytic surface over the integrated pixels.
    pub cap_height: Option<f64>,
}

impl IntegrateSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "command": "integrate",
            "source": self.source,
            "iterations": self.iterations,
            "relative_residual": num(self.relative_residual),
            "objective": num(self.objective),
            "components": self.components,
            "grazing_excluded": self.grazing,
            "max_residual": num(self.max_residual),
            "rmse": self.rmse.map(num),
            "cap_height": self.cap_height.map(num),
        })
    }
}

/// Predicted normals when present, else the reference normals.
fn integrate_input(scene: &Path) -> Result<(PathBuf, PathBuf, String)> {
    let pred = scene.join(NORMAL_PRED_FILE);
    if pred.exists() {
        return Ok((pred, scene.join(MASK_PRED_FILE), NORMAL_PRED_FILE.into()));
    }
    let gt = scene.join(NORMAL_GT_FILE);
    if gt.exists() {
        return Ok((gt, scene.join(MASK_FILE), NORMAL_GT_FILE.into()));
    }
    Err(Error::Pipeline(format!(
        "{}: no {NORMAL_PRED_FILE} or {NORMAL_GT_FILE} to integrate",
        scene.display()
    )))
}

/// Integrates the scene's normal map into depth, residual and an OBJ mesh.
pub fn cmd_integrate(scene: &Path, out: &Path, cfg: &PipelineConfig) -> Result<IntegrateSummary> {
    let (normal_path, mask_path, source) = integrate_input(scene)?;
    let enc = crate::io::read_encoded_png(&normal_path)?;
    let dims = enc.dims();
    let mask = read_optional_mask(&mask_path, dims)?.unwrap_or_else(|| all_true(dims));
    let (normals, _) = read_normal_png(&normal_path, &mask, cfg.strict_nz)?;
    let grads = normals_to_gradients(&normals, cfg.grazing_threshold)?;
    let depth = integrate(&grads.field, &cfg.integrator)?;

    ensure_dir(out)?;
    write_depth(&out.join(DEPTH_FILE), &depth.z)?;
    write_depth(&out.join(RESIDUAL_FILE), &depth.residual_map)?;
    write_text(&out.join(MESH_FILE), &depth_to_mesh(&depth)?.to_obj())?;

    let (rmse, cap_height) = match SceneDescription::load(scene)? {
        Some(desc) => {
            let spec = desc.scene_spec()?;
            let (zt, mt) = analytic_depth(&spec)?;
            check_dims("analytic depth", dims, zt.dim())?;
            match analytic_rmse(&depth, &zt, &mt)? {
                Some((r, cap)) => (Some(r), Some(cap)),
                None => (None, None),
            }
        }
        None => (None, None),
    };
    let summary = IntegrateSummary {
        source,
        iterations: depth.iterations,
        relative_residual: depth.relative_residual,
        objective: depth.objective,
        components: depth.components,
        grazing: grads.grazing,
        max_residual: depth.residual_map.iter().cloned().fold(0.0, f64::max),
        rmse,
        cap_height,
    };
    write_json(&out.join("integrate_report.json"), &summary.to_json())?;
    Ok(summary)
}

// ---------------------------------------------------------------- evaluate

/// Stack evaluated as the prediction: `descattered/` when present.
fn pred_stack(dir: &Path) -> Result<PolarizationStack> {
    read_stack(&solve_input(dir).0)
}

/// Stack used as reference: `clean/` when present.
fn reference_stack(dir: &Path) -> Result<PolarizationStack> {
    let clean = dir.join(CLEAN_DIR);
    if clean.exists() {
        read_stack(&clean)
    } else {
        read_stack(dir)
    }
}

fn load_normals(png: &Path, mask: &Mask, strict_nz: bool) -> Result<Option<NormalMap>> {
    if !png.exists() {
        return Ok(None);
    }
    Ok(Some(read_normal_png(png, mask, strict_nz)?.0))
}

/// Compares a prediction scene against a reference scene and writes
/// `metrics.json` / `metrics.csv` into `out`.
pub fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<MetricsReport> {
    let pred = pred_stack(pred_dir)?;
    let reference = reference_stack(gt_dir)?;
    let dims = reference.dims();
    check_dims("predicted stack", dims, pred.dims())?;
    let gt_mask = read_optional_mask(&gt_dir.join(MASK_FILE), dims)?.unwrap_or_else(|| all_true(dims));
    let pred_mask = match read_optional_mask(&pred_dir.join(MASK_PRED_FILE), dims)? {
        Some(m) => m,
        None => read_optional_mask(&pred_dir.join(MASK_FILE), dims)?.unwrap_or_else(|| all_true(dims)),
    };

    let mut report = MetricsReport::default();
    report.mask_coverage = gt_mask.iter().filter(|m| **m).count() as f64 / gt_mask.len() as f64;
    let pairs = stack_pairs(&pred, &reference);
    let psnr = psnr_planes(&pairs, Some(&gt_mask), cfg.psnr_peak)?;
    let ssim = ssim_planes(&pairs, &cfg.ssim, Some(&gt_mask))?;
    let mut l1 = 0.0;
    for (a, b) in &pairs {
        l1 += l1_loss(a, b, Some(&gt_mask))?;
    }
    l1 /= pairs.len() as f64;
    let tv = tv_mean(&pred.mean_intensity());
    report.set("psnr", MetricValue::from_f64(psnr));
    report.set("ssim", MetricValue::from_f64(ssim));
    report.set("l1", MetricValue::from_f64(l1));
    report.set("tv_mean", MetricValue::from_f64(tv));

    let pred_png = [NORMAL_PRED_FILE, NORMAL_GT_FILE]
        .iter()
        .map(|f| pred_dir.join(f))
        .find(|p| p.exists());
    let pred_n = match pred_png {
        Some(p) => load_normals(&p, &pred_mask, cfg.strict_nz)?,
        None => None,
    };
    let gt_n = load_normals(&gt_dir.join(NORMAL_GT_FILE), &gt_mask, cfg.strict_nz)?;
    let mut components = LossComponents {
        l1: Some(l1),
        ssim_loss: Some(1.0 - ssim),
        tv: Some(tv),
        ..LossComponents::default()
    };
    match (&pred_n, &gt_n) {
        (Some(p), Some(g)) => {
            check_dims("predicted normal map", g.dims(), p.dims())?;
            let e = angular_error_map(p, g)?;
            let h = hist_l1(&normal_histogram(p)?, &normal_histogram(g)?);
            let nl = normal_cosine_loss(p, g)?;
            report.set("mae_deg", MetricValue::from_f64(e.mae_deg));
            report.set("median_ae_deg", MetricValue::from_f64(e.median_deg));
            report.set("hist_l1", MetricValue::from_f64(h));
            report.set("normal_loss", MetricValue::from_f64(nl));
            components.hist = Some(h);
            components.normal = Some(nl);
        }
        _ => report
            .notes
            .push("normal maps unavailable; normal metrics skipped".into()),
    }
    match total_loss(&components, &cfg.weights) {
        Ok(t) => {
            report.set("total_loss", MetricValue::from_f64(t.value));
            report.notes.extend(t.warnings);
        }
        Err(e) => report.notes.push(format!("total_loss unavailable: {e}")),
    }

    ensure_dir(out)?;
    write_json(&out.join(METRICS_JSON), &report.to_json())?;
    write_text(&out.join(METRICS_CSV), &report.to_csv())?;
    Ok(report)
}

// ------------------------------------------------------------------- split

/// Dataset split of a scene, from the hash of its name: 8 : 1 : 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

pub fn split_of(scene_name: &str) -> Split {
    let digest = Sha256::digest(scene_name.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 10;
    match bucket {
        0..=7 => Split::Train,
        8 => Split::Validation,
        _ => Split::Test,
    }
}

// ------------------------------------------------------------ multi-scene

/// Runs `f` on every item, on up to `jobs` threads. Each item is processed
/// independently, and results come back in input order.
pub fn run_jobs<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 && items.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_balanced() {
        assert_eq!(split_of("scene_001"), split_of("scene_001"));
        let mut counts = [0usize; 3];
        for k in 0..2000 {
            counts[split_of(&format!("scene_{k:04}")) as usize] += 1;
        }
        assert!(counts[0] > 1450 && counts[0] < 1750, "{counts:?}");
        assert!(counts[1] > 130 && counts[2] > 130, "{counts:?}");
    }

    #[test]
    fn run_jobs_preserves_order() {
        let items: Vec<usize> = (0..17).collect();
        assert_eq!(run_jobs(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(run_jobs(&items, 1, |x| x + 1)[16], 17);
    }

    #[test]
    fn fitted_spec_respects_frame() {
        let s = fitted_patch_spec(&PatchSpec::default(), (128, 96));
        assert_eq!((s.size, s.stride), (96, 96));
        let s = fitted_patch_spec(&PatchSpec::default(), (512, 512));
        assert_eq!((s.size, s.stride), (256, 128));
    }
}
