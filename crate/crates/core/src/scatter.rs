//! Forward simulation: analytic surfaces rendered to four-angle polarization
//! images under the Fresnel models, underwater backscatter composed by
//! Stokes addition (`S0 = T + B` on the intensity plane), sensor noise, and
//! the physical descattering baseline that inverts the backscatter term.
//!
//! Camera is orthographic looking down `−z`. Pixel `(row, col)` sits at
//! `x = col`, `y = row`.

use crate::error::{check_dims, Error, Result};
use crate::fresnel::{aop_from_azimuth, normal_angles, rho, ReflectionMode};
use crate::normal::NormalMap;
use crate::par;
use crate::polar::{
    aop_of, stack_from_stokes, Mask, Plane, PolarizationStack, StokesImage,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Analytic surface in the camera frame. Centers are `(x, y)` pixel
/// coordinates; `None` means the image center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Surface {
    /// Hemisphere facing the camera.
    Sphere {
        radius: f64,
        center: Option<(f64, f64)>,
    },
    /// Infinite plane with a fixed normal; every pixel is foreground.
    Plane { normal: [f64; 3] },
    /// `z = −(kx·dx² + ky·dy²)/2`, optionally cut to a disk of radius `aperture`.
    Paraboloid {
        kx: f64,
        ky: f64,
        center: Option<(f64, f64)>,
        aperture: Option<f64>,
    },
    /// Torus with its axis along the view direction.
    Torus {
        major: f64,
        minor: f64,
        center: Option<(f64, f64)>,
    },
}

impl Surface {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidValue(m.to_string()));
        match *self {
            Surface::Sphere { radius, .. } if !(radius > 0.0 && radius.is_finite()) => {
                bad("sphere radius must be positive")
            }
            Surface::Plane { normal } => {
                let len = crate::normal::norm3(normal);
                if !(len.is_finite() && len > 0.0 && normal[2] / len > 0.0) {
                    bad("plane normal must be finite with n_z > 0")
                } else {
                    Ok(())
                }
            }
            Surface::Paraboloid {
                kx, ky, aperture, ..
            } => {
                if !(kx.is_finite() && ky.is_finite()) {
                    bad("paraboloid curvatures must be finite")
                } else if aperture.is_some_and(|a| !(a > 0.0)) {
                    bad("paraboloid aperture must be positive")
                } else {
                    Ok(())
                }
            }
            Surface::Torus { major, minor, .. } if !(minor > 0.0 && major > minor) => {
                bad("torus radii must satisfy 0 < minor < major")
            }
            _ => Ok(()),
        }
    }

    fn center(&self, h: usize, w: usize) -> (f64, f64) {
        let default = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        match *self {
            Surface::Sphere { center, .. }
            | Surface::Paraboloid { center, .. }
            | Surface::Torus { center, .. } => center.unwrap_or(default),
            Surface::Plane { .. } => default,
        }
    }

    /// Unit normal and depth at pixel `(row, col)`, or `None` off the surface.
    pub fn sample(&self, h: usize, w: usize, row: usize, col: usize) -> Option<([f64; 3], f64)> {
        let (cx, cy) = self.center(h, w);
        let dx = col as f64 - cx;
        let dy = row as f64 - cy;
        match *self {
            Surface::Sphere { radius, .. } => {
                let d2 = dx * dx + dy * dy;
                let r2 = radius * radius;
                if d2 >= r2 {
                    return None;
                }
                let z = (r2 - d2).sqrt();
                Some(([dx / radius, dy / radius, z / radius], z))
            }
            Surface::Plane { normal } => {
                let len = crate::normal::norm3(normal);
                let n = normal.map(|v| v / len);
                Some((n, -(n[0] * dx + n[1] * dy) / n[2]))
            }
            Surface::Paraboloid {
                kx, ky, aperture, ..
            } => {
                if aperture.is_some_and(|a| dx * dx + dy * dy >= a * a) {
                    return None;
                }
                let v = [kx * dx, ky * dy, 1.0];
                let len = crate::normal::norm3(v);
                Some((v.map(|c| c / len), -(kx * dx * dx + ky * dy * dy) / 2.0))
            }
            Surface::Torus { major, minor, .. } => {
                let rd = (dx * dx + dy * dy).sqrt();
                let t = rd - major;
                if t * t >= minor * minor || rd == 0.0 {
                    return None;
                }
                let z = (minor * minor - t * t).sqrt();
                Some((
                    [t * dx / (rd * minor), t * dy / (rd * minor), z / minor],
                    z,
                ))
            }
        }
    }
}

/// Per-pixel albedo.
#[derive(Debug, Clone, PartialEq)]
pub enum Albedo {
    Constant(f64),
    Map(Plane),
}

impl Albedo {
    fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            Albedo::Constant(a) => *a,
            Albedo::Map(m) => m[[i, j]],
        }
    }
}

/// Scene to render.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub surface: Surface,
    pub height: usize,
    pub width: usize,
    pub mode: ReflectionMode,
    pub eta: f64,
    pub albedo: Albedo,
    pub illumination: f64,
}

impl SceneSpec {
    pub fn new(surface: Surface, height: usize, width: usize, mode: ReflectionMode) -> Self {
        Self {
            surface,
            height,
            width,
            mode,
            eta: 1.5,
            albedo: Albedo::Constant(1.0),
            illumination: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidValue("scene resolution must be positive".into()));
        }
        self.surface.validate()?;
        if !(self.eta > 1.0) {
            return Err(Error::OutOfDomain {
                what: "refractive index",
                value: self.eta,
                domain: "(1, ∞)",
            });
        }
        if !(self.illumination >= 0.0 && self.illumination.is_finite()) {
            return Err(Error::InvalidValue("illumination must be finite and ≥ 0".into()));
        }
        match &self.albedo {
            Albedo::Constant(a) if !(*a >= 0.0 && a.is_finite()) => {
                Err(Error::InvalidValue("albedo must be finite and ≥ 0".into()))
            }
            Albedo::Map(m) => {
                check_dims("albedo map", (self.height, self.width), m.dim())?;
                if m.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                    return Err(Error::InvalidValue("albedo must be finite and ≥ 0".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Analytic ground-truth normals and foreground mask.
pub fn render_ground_truth(scene: &SceneSpec) -> Result<NormalMap> {
    scene.validate()?;
    let (h, w) = (scene.height, scene.width);
    Ok(NormalMap::from_fn(h, w, |i, j| {
        scene.surface.sample(h, w, i, j).map(|(n, _)| n)
    }))
}

/// Analytic depth (toward the camera) and its mask.
pub fn analytic_depth(scene: &SceneSpec) -> Result<(Plane, Mask)> {
    scene.validate()?;
    let (h, w) = (scene.height, scene.width);
    let cells = par::grid(h, w, |i, j| scene.surface.sample(h, w, i, j).map(|(_, z)| z));
    Ok((cells.mapv(|c| c.unwrap_or(0.0)), cells.mapv(|c| c.is_some())))
}

/// Output of [`render_polarization`].
#[derive(Debug, Clone)]
pub struct Rendered {
    pub stack: PolarizationStack,
    pub stokes: StokesImage,
    pub normals: NormalMap,
    /// DoP used in synthesis.
    pub dop: Plane,
    /// AoP used in synthesis, in `[−π/2, π/2)`.
    pub aop: Plane,
}

/// Renders the clean (in-air) polarization observation of a scene.
///
/// Per foreground pixel: zenith and azimuth from the analytic normal, DoP from
/// the mode's Fresnel model, AoP from the mode's azimuth rule, `S0` from
/// Lambertian shading (diffuse) or constant albedo (specular). Background
/// pixels are zero.
pub fn render_polarization(scene: &SceneSpec) -> Result<Rendered> {
    let normals = render_ground_truth(scene)?;
    let (h, w) = (scene.height, scene.width);
    let cells = par::grid(h, w, |i, j| -> Result<[f64; 5]> {
        if !normals.mask[[i, j]] {
            return Ok([0.0; 5]);
        }
        let (theta, alpha) = normal_angles(normals.at(i, j));
        let r = rho(scene.mode, theta, scene.eta)?;
        let phi = aop_from_azimuth(alpha, scene.mode);
        let radiance = scene.albedo.at(i, j) * scene.illumination;
        let s0 = match scene.mode {
            ReflectionMode::Diffuse => radiance * theta.cos(),
            ReflectionMode::Specular => radiance,
        };
        let (sin2, cos2) = (2.0 * phi).sin_cos();
        Ok([s0, r * s0 * cos2, r * s0 * sin2, r, phi])
    });
    let mut flat = Vec::with_capacity(h * w);
    for c in cells.iter() {
        flat.push(c.as_ref().map_err(|e| Error::InvalidValue(e.to_string()))?);
    }
    let take = |k: usize| Plane::from_shape_vec((h, w), flat.iter().map(|c| c[k]).collect()).expect("shape");
    let stokes = StokesImage::new(take(0), take(1), take(2))?;
    let stack = stack_from_stokes(&stokes);
    Ok(Rendered {
        stack,
        dop: take(3),
        aop: take(4),
        stokes,
        normals,
    })
}

/// Backscatter veiling light with its own partial polarization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterField {
    pub b0: Plane,
    pub rho_b: Plane,
    pub phi_b: Plane,
}

impl ScatterField {
    pub fn new(b0: Plane, rho_b: Plane, phi_b: Plane) -> Result<Self> {
        check_dims("scatter rho_b", b0.dim(), rho_b.dim())?;
        check_dims("scatter phi_b", b0.dim(), phi_b.dim())?;
        if b0.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidValue("backscatter b0 must be finite and ≥ 0".into()));
        }
        if rho_b.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("backscatter DoP must lie in [0, 1]".into()));
        }
        Ok(Self { b0, rho_b, phi_b })
    }

    pub fn uniform(h: usize, w: usize, b0: f64, rho_b: f64, phi_b: f64) -> Result<Self> {
        Self::new(
            Plane::from_elem((h, w), b0),
            Plane::from_elem((h, w), rho_b),
            Plane::from_elem((h, w), phi_b),
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        self.b0.dim()
    }

    /// `S_B = (b0, ρ_b·b0·cos 2φ_b, ρ_b·b0·sin 2φ_b)`.
    pub fn stokes(&self) -> StokesImage {
        let (h, w) = self.dims();
        let comp = |k: usize| {
            par::grid(h, w, |i, j| {
                let b = self.b0[[i, j]];
                let (s, c) = (2.0 * self.phi_b[[i, j]]).sin_cos();
                match k {
                    0 => b,
                    1 => self.rho_b[[i, j]] * b * c,
                    _ => self.rho_b[[i, j]] * b * s,
                }
            })
        };
        StokesImage {
            s0: comp(0),
            s1: comp(1),
            s2: comp(2),
        }
    }
}

/// `S_total = S_target + S_B`.
pub fn add_backscatter(s: &StokesImage, field: &ScatterField) -> Result<StokesImage> {
    check_dims("scatter field", s.dims(), field.dims())?;
    let b = field.stokes();
    Ok(StokesImage {
        s0: &s.s0 + &b.s0,
        s1: &s.s1 + &b.s1,
        s2: &s.s2 + &b.s2,
    })
}

/// Result of [`descatter_subtract`].
#[derive(Debug, Clone)]
pub struct Descattered {
    pub stokes: StokesImage,
    /// `false` where the recovered `s0` is negative beyond tolerance.
    pub valid: Mask,
    pub negative_s0: usize,
}

/// `S_target = S_observed − S_B`.
pub fn descatter_subtract(
    observed: &StokesImage,
    estimate: &ScatterField,
    tolerance: f64,
) -> Result<Descattered> {
    check_dims("scatter estimate", observed.dims(), estimate.dims())?;
    let b = estimate.stokes();
    let stokes = StokesImage {
        s0: &observed.s0 - &b.s0,
        s1: &observed.s1 - &b.s1,
        s2: &observed.s2 - &b.s2,
    };
    let valid = stokes.s0.mapv(|v| v >= -tolerance);
    let negative_s0 = valid.iter().filter(|v| !**v).count();
    Ok(Descattered {
        stokes,
        valid,
        negative_s0,
    })
}

/// Spatially uniform field from the mean Stokes vector over `background`.
pub fn estimate_backscatter_uniform(observed: &StokesImage, background: &Mask) -> Result<ScatterField> {
    let (h, w) = observed.dims();
    check_dims("background mask", (h, w), background.dim())?;
    let idx: Vec<(usize, usize)> = background
        .indexed_iter()
        .filter_map(|(ij, m)| m.then_some(ij))
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask("background mask selects no pixels".into()));
    }
    let n = idx.len() as f64;
    let mean = |p: &Plane| par::sum_indexed(idx.len(), |k| p[idx[k]]) / n;
    let (m0, m1, m2) = (mean(&observed.s0), mean(&observed.s1), mean(&observed.s2));
    let b0 = m0.max(0.0);
    let rho_b = if b0 > 0.0 {
        (m1.hypot(m2) / b0).min(1.0)
    } else {
        0.0
    };
    let phi_b = aop_of(m1, m2).unwrap_or(0.0);
    ScatterField::uniform(h, w, b0, rho_b, phi_b)
}

/// Additive Gaussian sensor noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation relative to full scale 1.
    pub sigma: f64,
    pub seed: u64,
}

/// Gaussian draw number `index` of ChaCha8 stream `stream` under `seed`.
///
/// Each draw consumes four 32-bit words (two `u64`), so draw `k` starts at
/// word position `4k`: the generator is addressed by counter, and any subset
/// of draws can be produced independently. Box–Muller converts the pair.
pub fn gaussian_at(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(4 * index as u128);
    box_muller(&mut rng)
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Adds i.i.d. Gaussian noise per plane and clamps to `[0, 1]`.
///
/// Plane `k` (0°, 45°, 90°, 135°) uses stream `k`; pixel `(i, j)` uses draw
/// `i·W + j`, so results do not depend on evaluation order.
pub fn add_noise(stack: &PolarizationStack, noise: &NoiseSpec) -> Result<PolarizationStack> {
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(Error::InvalidValue("noise sigma must be finite and ≥ 0".into()));
    }
    if noise.sigma == 0.0 {
        return Ok(stack.clone());
    }
    let (h, w) = stack.dims();
    let noisy = |plane: &Plane, stream: u64| -> Plane {
        let rows = par::map_indexed(h, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(stream);
            rng.set_word_pos(4 * (i * w) as u128);
            (0..w)
                .map(|j| (plane[[i, j]] + noise.sigma * box_muller(&mut rng)).clamp(0.0, 1.0))
                .collect::<Vec<_>>()
        });
        Plane::from_shape_vec((h, w), rows.concat()).expect("shape")
    };
    let [p0, p45, p90, p135] = stack.planes();
    PolarizationStack::from_planes(noisy(p0, 0), noisy(p45, 1), noisy(p90, 2), noisy(p135, 3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polar::dop;
    use approx::assert_abs_diff_eq;

    fn sphere_scene(n: usize, r: f64, mode: ReflectionMode) -> SceneSpec {
        SceneSpec::new(
            Surface::Sphere {
                radius: r,
                center: None,
            },
            n,
            n,
            mode,
        )
    }

    #[test]
    fn plane_ground_truth() {
        let scene = SceneSpec::new(
            Surface::Plane {
                normal: [0.0, 0.0, 1.0],
            },
            5,
            7,
            ReflectionMode::Diffuse,
        );
        let n = render_ground_truth(&scene).unwrap();
        assert_eq!(n.foreground_count(), 35);
        assert!(n.nz.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sphere_center_and_thirty_degree_ring() {
        let n = render_ground_truth(&sphere_scene(41, 16.0, ReflectionMode::Diffuse)).unwrap();
        assert_eq!(n.at(20, 20), [0.0, 0.0, 1.0]);
        let off = n.at(20, 28);
        assert_abs_diff_eq!(off[2].acos().to_degrees(), 30.0, epsilon = 1e-12);
        assert!(!n.mask[[0, 0]]);
    }

    #[test]
    fn degenerate_surfaces_rejected() {
        for s in [
            Surface::Sphere {
                radius: 0.0,
                center: None,
            },
            Surface::Plane {
                normal: [1.0, 0.0, 0.0],
            },
            Surface::Torus {
                major: 2.0,
                minor: 3.0,
                center: None,
            },
        ] {
            assert!(render_ground_truth(&SceneSpec::new(s, 8, 8, ReflectionMode::Diffuse)).is_err());
        }
    }

    #[test]
    fn fronto_parallel_plane_is_unpolarized() {
        let scene = SceneSpec::new(
            Surface::Plane {
                normal: [0.0, 0.0, 1.0],
            },
            4,
            4,
            ReflectionMode::Diffuse,
        );
        let r = render_polarization(&scene).unwrap();
        assert!(r.dop.iter().all(|v| *v == 0.0));
        assert_eq!(r.stack.i0, r.stack.i45);
        assert_eq!(r.stack.i0, r.stack.i90);
        assert_eq!(r.stack.i0, r.stack.i135);
    }

    #[test]
    fn uniform_unpolarized_backscatter_raises_s0_only() {
        let r = render_polarization(&sphere_scene(16, 6.0, ReflectionMode::Diffuse)).unwrap();
        let f = ScatterField::uniform(16, 16, 0.2, 0.0, 0.0).unwrap();
        let out = add_backscatter(&r.stokes, &f).unwrap();
        for (a, b) in out.s0.iter().zip(&r.stokes.s0) {
            assert_abs_diff_eq!(*a, b + 0.2, epsilon = 1e-15);
        }
        assert_eq!(out.s1, r.stokes.s1);
        assert_eq!(out.s2, r.stokes.s2);
        let zero = ScatterField::uniform(16, 16, 0.0, 0.3, 0.0).unwrap();
        assert_eq!(add_backscatter(&r.stokes, &zero).unwrap(), r.stokes);
    }

    #[test]
    fn backscatter_reduces_contrast() {
        let r = render_polarization(&sphere_scene(32, 12.0, ReflectionMode::Specular)).unwrap();
        let contrast = |s: &StokesImage| {
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (v, m) in s.s0.iter().zip(&r.normals.mask) {
                if *m {
                    fg += v;
                    nf += 1.0;
                } else {
                    bg += v;
                    nb += 1.0;
                }
            }
            let (fg, bg) = (fg / nf, bg / nb);
            (fg - bg) / (fg + bg)
        };
        let before = contrast(&r.stokes);
        for b0 in [0.01, 0.2, 1.5] {
            let f = ScatterField::uniform(32, 32, b0, 0.3, 0.0).unwrap();
            assert!(contrast(&add_backscatter(&r.stokes, &f).unwrap()) < before);
        }
    }

    #[test]
    fn descatter_with_true_field_recovers_clean() {
        let r = render_polarization(&sphere_scene(24, 10.0, ReflectionMode::Diffuse)).unwrap();
        let f = ScatterField::uniform(24, 24, 0.3, 0.4, 0.7).unwrap();
        let observed = add_backscatter(&r.stokes, &f).unwrap();
        let back = descatter_subtract(&observed, &f, 1e-9).unwrap();
        assert_eq!(back.negative_s0, 0);
        for (a, b) in [
            (&back.stokes.s0, &r.stokes.s0),
            (&back.stokes.s1, &r.stokes.s1),
            (&back.stokes.s2, &r.stokes.s2),
        ] {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let zero = ScatterField::uniform(24, 24, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(descatter_subtract(&observed, &zero, 0.0).unwrap().stokes, observed);
    }

    #[test]
    fn oversubtraction_flags_negative_s0() {
        let s = StokesImage::uniform(2, 2, [0.1, 0.0, 0.0]);
        let f = ScatterField::uniform(2, 2, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(descatter_subtract(&s, &f, 1e-9).unwrap().negative_s0, 4);
    }

    #[test]
    fn uniform_estimate_recovers_field() {
        let r = render_polarization(&sphere_scene(32, 10.0, ReflectionMode::Diffuse)).unwrap();
        let f = ScatterField::uniform(32, 32, 0.25, 0.3, 0.4).unwrap();
        let observed = add_backscatter(&r.stokes, &f).unwrap();
        let bg = r.normals.mask.mapv(|m| !m);
        let est = estimate_backscatter_uniform(&observed, &bg).unwrap();
        assert_abs_diff_eq!(est.b0[[0, 0]], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(est.rho_b[[0, 0]], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(est.phi_b[[0, 0]], 0.4, epsilon = 1e-12);

        let clean = estimate_backscatter_uniform(&r.stokes, &bg).unwrap();
        assert_eq!(clean.b0[[0, 0]], 0.0);

        let empty = Mask::from_elem((32, 32), false);
        assert!(matches!(
            estimate_backscatter_uniform(&observed, &empty),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn backscatter_dilutes_dop() {
        let r = render_polarization(&sphere_scene(32, 14.0, ReflectionMode::Specular)).unwrap();
        let f = ScatterField::uniform(32, 32, 0.2, 0.1, 0.3).unwrap();
        let before = dop(&r.stokes, &Default::default()).unwrap();
        let after = dop(&add_backscatter(&r.stokes, &f).unwrap(), &Default::default()).unwrap();
        for ((b, a), m) in before.values.iter().zip(&after.values).zip(&r.normals.mask) {
            if *m && *b > 0.1 {
                assert!(a < b);
            }
        }
    }

    #[test]
    fn noise_identity_and_determinism() {
        let r = render_polarization(&sphere_scene(16, 6.0, ReflectionMode::Diffuse)).unwrap();
        let zero = NoiseSpec { sigma: 0.0, seed: 3 };
        assert_eq!(add_noise(&r.stack, &zero).unwrap(), r.stack);
        let spec = NoiseSpec {
            sigma: 0.05,
            seed: 3,
        };
        assert_eq!(add_noise(&r.stack, &spec).unwrap(), add_noise(&r.stack, &spec).unwrap());
        let other = NoiseSpec { seed: 4, ..spec };
        assert_ne!(add_noise(&r.stack, &spec).unwrap(), add_noise(&r.stack, &other).unwrap());
    }

    #[test]
    fn counter_addressing_matches_streamed_draws() {
        let stack = PolarizationStack::constant(3, 5, 0.5);
        let noisy = add_noise(&stack, &NoiseSpec { sigma: 0.01, seed: 11 }).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let expect = 0.5 + 0.01 * gaussian_at(11, 2, (i * 5 + j) as u64);
                assert_eq!(noisy.i90[[i, j]], expect);
            }
        }
    }

    #[test]
    fn noise_sample_std() {
        let stack = PolarizationStack::constant(256, 256, 0.5);
        let noisy = add_noise(&stack, &NoiseSpec { sigma: 0.01, seed: 7 }).unwrap();
        for (a, b) in noisy.planes().iter().zip(stack.planes()) {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let std = var.sqrt();
            assert!((std - 0.01).abs() < 0.15 * 0.01, "std {std}");
        }
    }
}
