use approx::assert_abs_diff_eq;
use polarsfp::fresnel::{
    aop_from_azimuth, assemble_normal, azimuth_candidates, invert_zenith, normal_angles, rho, rho_diffuse,
    rho_specular, brewster_angle, FresnelConfig, ReflectionMode,
};
use polarsfp::integrator::{integrate, GradientField, IntegratorConfig};
use polarsfp::metrics::{angular_error_map, hist_l1, normal_histogram, psnr, ssim, SsimParams};
use polarsfp::normal::{decode_normals, encode_normals};
use polarsfp::patchwork::{extract_tiles, stitch, tile_grid, BlendMode, PatchSpec};
use polarsfp::polar::{
    analyzer_intensity, aop_of, stack_from_stokes, stokes_from_stack, wrap_half_period,
};
use polarsfp::scatter::{add_backscatter, descatter_subtract, estimate_backscatter_uniform, gaussian_at, ScatterField};
use polarsfp::{Mask, NormalMap, Plane, StokesImage};
use proptest::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

fn stokes_vec() -> impl Strategy<Value = [f64; 3]> {
    (0.01f64..2.0, 0.0f64..1.0, -PI..PI).prop_map(|(s0, r, phi)| {
        [s0, r * s0 * (2.0 * phi).cos(), r * s0 * (2.0 * phi).sin()]
    })
}

proptest! {
    #[test]
    fn analyzer_law_matches_stack(s in stokes_vec()) {
        let img = StokesImage::uniform(1, 1, s);
        let st = stack_from_stokes(&img);
        for (k, p) in st.planes().iter().enumerate() {
            let psi = k as f64 * PI / 4.0;
            prop_assert!((p[[0, 0]] - analyzer_intensity(s, psi)).abs() < 1e-12, "psi={psi}");
        }
        let back = stokes_from_stack(&st).at(0, 0);
        for c in 0..3 {
            prop_assert!((back[c] - s[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn aop_stays_in_half_open_range(s1 in -1.0f64..1.0, s2 in -1.0f64..1.0) {
        prop_assume!(s1.hypot(s2) > 1e-9);
        let a = aop_of(s1, s2).unwrap();
        prop_assert!((-FRAC_PI_2..FRAC_PI_2).contains(&a));
        prop_assert!((wrap_half_period(a + PI) - a).abs() < 1e-12);
    }

    #[test]
    fn diffuse_zenith_roundtrip(theta in 0.0f64..1.5, eta in 1.1f64..2.5) {
        let cfg = FresnelConfig { eta, mode: ReflectionMode::Diffuse, ..Default::default() };
        let r = rho_diffuse(theta, eta).unwrap();
        let sol = invert_zenith(r, &cfg).unwrap();
        let t = sol.theta_low.unwrap();
        prop_assert!((rho_diffuse(t, eta).unwrap() - r).abs() < 1e-9);
        prop_assert!((t - theta).abs() < 1e-6 || theta < 1e-3);
    }

    #[test]
    fn specular_candidates_reproduce_dop(theta in 0.01f64..1.56, eta in 1.1f64..2.5) {
        let cfg = FresnelConfig { eta, mode: ReflectionMode::Specular, ..Default::default() };
        let r = rho_specular(theta, eta).unwrap();
        let sol = invert_zenith(r, &cfg).unwrap();
        let b = brewster_angle(eta).unwrap();
        let mut hit = false;
        for t in sol.candidates() {
            prop_assert!((rho_specular(t, eta).unwrap() - r).abs() < 1e-8);
            hit |= (t - theta).abs() < 1e-5;
        }
        // Near Brewster both branches merge onto the peak.
        prop_assert!(hit || (theta - b).abs() < 1e-2);
    }

    #[test]
    fn azimuth_candidates_map_back(phi in -FRAC_PI_2..FRAC_PI_2, spec in any::<bool>()) {
        let mode = if spec { ReflectionMode::Specular } else { ReflectionMode::Diffuse };
        for a in azimuth_candidates(phi, mode).both() {
            let d = wrap_half_period(aop_from_azimuth(a, mode) - phi);
            prop_assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn normal_angles_invert_assembly(theta in 0.0f64..FRAC_PI_2, alpha in 0.0f64..(2.0 * PI)) {
        let n = assemble_normal(theta, alpha);
        prop_assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) - 1.0).abs() < 1e-12);
        let (t, a) = normal_angles(n);
        prop_assert!((t - theta).abs() < 1e-7);
        if theta > 1e-6 {
            let da = (a - alpha).rem_euclid(2.0 * PI);
            prop_assert!(da.min(2.0 * PI - da) < 1e-7);
        }
    }

    #[test]
    fn backscatter_subtraction_is_exact(b0 in 0.0f64..0.5, rb in 0.0f64..1.0, pb in -1.5f64..1.5) {
        let base = StokesImage::uniform(4, 5, [0.4, 0.1, -0.05]);
        let field = ScatterField::uniform(4, 5, b0, rb, pb).unwrap();
        let obs = add_backscatter(&base, &field).unwrap();
        let d = descatter_subtract(&obs, &field, 1e-9).unwrap();
        prop_assert_eq!(d.negative_s0, 0);
        for (a, b) in d.stokes.s0.iter().zip(base.s0.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_estimate_recovers_field(b0 in 0.01f64..0.5, rb in 0.0f64..1.0, pb in -1.5f64..1.5) {
        let field = ScatterField::uniform(6, 6, b0, rb, pb).unwrap();
        let obs = add_backscatter(&StokesImage::zeros(6, 6), &field).unwrap();
        let est = estimate_backscatter_uniform(&obs, &Mask::from_elem((6, 6), true)).unwrap();
        let (a, b) = (est.stokes(), field.stokes());
        for (x, y) in [(&a.s0, &b.s0), (&a.s1, &b.s1), (&a.s2, &b.s2)] {
            prop_assert!((x[[2, 3]] - y[[2, 3]]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_draws_are_addressable(seed in any::<u64>(), stream in 0u64..4, idx in 0u64..10_000) {
        let a = gaussian_at(seed, stream, idx);
        prop_assert!(a.is_finite());
        prop_assert_eq!(a.to_bits(), gaussian_at(seed, stream, idx).to_bits());
    }

    #[test]
    fn psnr_and_ssim_symmetric(v in prop::collection::vec(0.0f64..1.0, 256), d in 0.001f64..0.2) {
        let a = Plane::from_shape_vec((16, 16), v).unwrap();
        let b = a.mapv(|x| (x + d).min(1.0));
        let p = SsimParams::default();
        let s_ab = ssim(&a, &b, &p).unwrap();
        prop_assert!((s_ab - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        prop_assert!(s_ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(psnr(&a, &a, None, 1.0).unwrap().is_infinite());
        prop_assert!((psnr(&a, &b, None, 1.0).unwrap() - psnr(&b, &a, None, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn histogram_is_a_distribution(thetas in prop::collection::vec((0.0f64..1.5, 0.0f64..TAU), 64)) {
        let n = NormalMap::from_fn(8, 8, |i, j| {
            let (t, a) = thetas[i * 8 + j];
            Some(assemble_normal(t, a))
        });
        let h = normal_histogram(&n).unwrap();
        let total: f64 = h.bins.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(hist_l1(&h, &h), 0.0);
    }

    #[test]
    fn angular_error_symmetric(t1 in 0.0f64..1.5, a1 in 0.0f64..TAU, t2 in 0.0f64..1.5, a2 in 0.0f64..TAU) {
        let p = NormalMap::constant(2, 2, assemble_normal(t1, a1));
        let g = NormalMap::constant(2, 2, assemble_normal(t2, a2));
        let e1 = angular_error_map(&p, &g).unwrap().mae_deg;
        let e2 = angular_error_map(&g, &p).unwrap().mae_deg;
        prop_assert!((e1 - e2).abs() < 1e-12);
        prop_assert!((0.0..=180.0).contains(&e1));
    }

    #[test]
    fn codec_roundtrip_within_quantization(t in 0.0f64..1.5, a in 0.0f64..TAU) {
        let n = NormalMap::constant(3, 3, assemble_normal(t, a));
        let img = encode_normals(&n, [0.5, 0.5, 1.0]).quantized(16);
        let (back, stats) = decode_normals(&img, &n.mask, false).unwrap();
        prop_assert_eq!(stats.zero_vectors, 0);
        let e = angular_error_map(&back, &n).unwrap().map.fold(0.0f64, |m, v| m.max(*v));
        prop_assert!(e < 0.01, "error {e}°");
    }

    #[test]
    fn tiles_cover_frame(h in 8usize..80, w in 8usize..80, size in 4usize..8, stride_frac in 0.3f64..1.0) {
        let stride = ((size as f64 * stride_frac) as usize).max(1);
        let spec = PatchSpec { size, stride, min_valid_fraction: 0.0, blend: BlendMode::Uniform };
        let origins = tile_grid((h, w), &spec).unwrap();
        let mut cov = vec![false; h * w];
        for (r, c) in origins {
            prop_assert!(r + size <= h && c + size <= w);
            for i in r..r + size { for j in c..c + size { cov[i * w + j] = true; } }
        }
        prop_assert!(cov.iter().all(|c| *c));
    }

    #[test]
    fn stitch_reproduces_source(v in prop::collection::vec(-1.0f64..1.0, 24 * 20), cosine in any::<bool>()) {
        let src = Plane::from_shape_vec((24, 20), v).unwrap();
        let blend = if cosine { BlendMode::Cosine } else { BlendMode::Uniform };
        let spec = PatchSpec { size: 8, stride: 5, min_valid_fraction: 0.0, blend };
        let set = extract_tiles(&[&src], &Mask::from_elem((24, 20), true), &spec).unwrap();
        let out = stitch(&set, blend).unwrap();
        for (a, b) in out[0].iter().zip(src.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn rho_dispatches_on_mode() {
    let eta = 1.5;
    for t in [0.1, 0.5, 1.0] {
        assert_eq!(rho(ReflectionMode::Diffuse, t, eta).unwrap(), rho_diffuse(t, eta).unwrap());
        assert_eq!(rho(ReflectionMode::Specular, t, eta).unwrap(), rho_specular(t, eta).unwrap());
    }
}

#[test]
fn integrator_recovers_quadratic() {
    let (h, w) = (40, 50);
    let f = |i: f64, j: f64| 0.01 * j * j - 0.02 * i * j + 0.03 * i;
    let z = Plane::from_shape_fn((h, w), |(i, j)| f(i as f64, j as f64));
    // Forward-difference targets are exact on edges; feeding central values
    // at pixels reproduces them under the trapezoid rule for quadratics.
    let p = Plane::from_shape_fn((h, w), |(i, j)| 0.02 * j as f64 - 0.02 * i as f64);
    let q = Plane::from_shape_fn((h, w), |(_, j)| -0.02 * j as f64 + 0.03);
    let g = GradientField::new(p, q, Mask::from_elem((h, w), true)).unwrap();
    let d = integrate(&g, &IntegratorConfig::default()).unwrap();
    let mean_z = z.mean().unwrap();
    let mean_d = d.z.mean().unwrap();
    let mut worst = 0.0f64;
    for (a, b) in d.z.iter().zip(z.iter()) {
        worst = worst.max(((a - mean_d) - (b - mean_z)).abs());
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn integrator_handles_two_components() {
    let (h, w) = (20, 21);
    let mask = Mask::from_shape_fn((h, w), |(_, j)| j != 10);
    let g = GradientField::new(Plane::from_elem((h, w), 0.5), Plane::zeros((h, w)), mask).unwrap();
    let d = integrate(&g, &IntegratorConfig::default()).unwrap();
    assert_eq!(d.components, 2);
    for half in [0..10usize, 11..21] {
        let vals: Vec<f64> = (0..h).flat_map(|i| half.clone().map(move |j| (i, j))).map(|ij| d.z[ij]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
    }
    assert_abs_diff_eq!(d.z[[3, 4]] - d.z[[3, 3]], 0.5, epsilon = 1e-8);
}
