//! Normal-field integration: gradients from normals, masked least-squares
//! depth recovery by preconditioned conjugate gradients, and mesh export.
//!
//! The discrete objective is `Σ_e (z[to(e)] − z[from(e)] − g_e)²` over
//! forward-difference edges whose two end pixels are both inside the mask,
//! with `g_e` the mean of the endpoint gradients. Each 4-connected component
//! has its own zero-mean gauge.

use crate::error::{check_dims, Error, Result};
use crate::normal::NormalMap;
use crate::par;
use crate::polar::{Mask, Plane};
use ndarray::Array2;
use std::fmt::Write as _;

/// `p = ∂z/∂x` (along columns), `q = ∂z/∂y` (along rows).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub p: Plane,
    pub q: Plane,
    pub mask: Mask,
}

impl GradientField {
    pub fn new(p: Plane, q: Plane, mask: Mask) -> Result<Self> {
        check_dims("gradient q", p.dim(), q.dim())?;
        check_dims("gradient mask", p.dim(), mask.dim())?;
        Ok(Self { p, q, mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.p.dim()
    }
}

/// Output of [`normals_to_gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub field: GradientField,
    /// Foreground pixels dropped because `n_z` was below the threshold.
    pub grazing: usize,
}

/// `p = −n_x/n_z`, `q = −n_y/n_z`; pixels with `n_z < grazing` are masked out.
pub fn normals_to_gradients(n: &NormalMap, grazing: f64) -> Result<Gradients> {
    let (h, w) = n.dims();
    let cells = par::grid(h, w, |i, j| {
        if !n.mask[[i, j]] {
            return None;
        }
        let nz = n.nz[[i, j]];
        if nz < grazing || nz <= 0.0 {
            return None;
        }
        Some((-n.nx[[i, j]] / nz, -n.ny[[i, j]] / nz))
    });
    let mask = cells.mapv(|c| c.is_some());
    let fg = n.foreground_count();
    let kept = mask.iter().filter(|m| **m).count();
    if kept == 0 {
        return Err(Error::EmptyMask(format!(
            "all {fg} foreground normals are below the grazing threshold {grazing}"
        )));
    }
    Ok(Gradients {
        field: GradientField {
            p: cells.mapv(|c| c.map_or(0.0, |g| g.0)),
            q: cells.mapv(|c| c.map_or(0.0, |g| g.1)),
            mask,
        },
        grazing: fg - kept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    /// Stop once `‖r‖/‖b‖` falls to this value.
    pub tolerance: f64,
    /// Iteration cap; `None` means ten times the unknown count.
    pub max_iterations: Option<usize>,
    /// Optional Tikhonov weight pulling depth toward zero; 0 disables screening.
    pub screening: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: None,
            screening: 0.0,
        }
    }
}

/// Integrated depth with solver diagnostics.
#[derive(Debug, Clone)]
pub struct DepthMap {
    /// Depth toward the camera; zero outside `mask`.
    pub z: Plane,
    pub mask: Mask,
    pub iterations: usize,
    /// Final `‖r‖/‖b‖` of the normal equations.
    pub relative_residual: f64,
    /// Least-squares objective at `z`.
    pub objective: f64,
    /// Per pixel, `√(r_right² + r_down²)` of its forward edges.
    pub residual_map: Plane,
    pub components: usize,
}

struct Edge {
    from: usize,
    to: usize,
    target: f64,
}

struct Problem {
    w: usize,
    pixels: Vec<(usize, usize)>,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<usize>>,
    component: Vec<usize>,
    component_sizes: Vec<usize>,
}

impl Problem {
    fn build(g: &GradientField) -> Self {
        let (h, w) = g.dims();
        let mut id = vec![usize::MAX; h * w];
        let mut pixels = Vec::new();
        for ((i, j), m) in g.mask.indexed_iter() {
            if *m {
                id[i * w + j] = pixels.len();
                pixels.push((i, j));
            }
        }
        let mut edges = Vec::new();
        let mut neighbors = vec![Vec::with_capacity(4); pixels.len()];
        for (k, &(i, j)) in pixels.iter().enumerate() {
            if j + 1 < w && id[i * w + j + 1] != usize::MAX {
                let t = id[i * w + j + 1];
                edges.push(Edge {
                    from: k,
                    to: t,
                    target: 0.5 * (g.p[[i, j]] + g.p[[i, j + 1]]),
                });
                neighbors[k].push(t);
                neighbors[t].push(k);
            }
            if i + 1 < h && id[(i + 1) * w + j] != usize::MAX {
                let t = id[(i + 1) * w + j];
                edges.push(Edge {
                    from: k,
                    to: t,
                    target: 0.5 * (g.q[[i, j]] + g.q[[i + 1, j]]),
                });
                neighbors[k].push(t);
                neighbors[t].push(k);
            }
        }
        let mut component = vec![usize::MAX; pixels.len()];
        let mut component_sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..pixels.len() {
            if component[start] != usize::MAX {
                continue;
            }
            let c = component_sizes.len();
            let mut size = 0;
            component[start] = c;
            stack.push(start);
            while let Some(k) = stack.pop() {
                size += 1;
                for &n in &neighbors[k] {
                    if component[n] == usize::MAX {
                        component[n] = c;
                        stack.push(n);
                    }
                }
            }
            component_sizes.push(size);
        }
        Problem {
            w,
            pixels,
            edges,
            neighbors,
            component,
            component_sizes,
        }
    }

    fn apply(&self, x: &[f64], screening: f64) -> Vec<f64> {
        par::map_indexed(x.len(), |k| {
            let nb = &self.neighbors[k];
            let mut s = (nb.len() as f64 + screening) * x[k];
            for &n in nb {
                s -= x[n];
            }
            s
        })
    }

    fn rhs(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.pixels.len()];
        for e in &self.edges {
            b[e.to] += e.target;
            b[e.from] -= e.target;
        }
        b
    }

    /// Removes the per-component mean.
    fn project(&self, x: &mut [f64]) {
        let mut sums = vec![0.0; self.component_sizes.len()];
        for (k, v) in x.iter().enumerate() {
            sums[self.component[k]] += v;
        }
        for (k, v) in x.iter_mut().enumerate() {
            let c = self.component[k];
            *v -= sums[c] / self.component_sizes[c] as f64;
        }
    }

    fn edge_residuals(&self, x: &[f64]) -> Vec<f64> {
        par::map_indexed(self.edges.len(), |e| {
            let e = &self.edges[e];
            x[e.to] - x[e.from] - e.target
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    par::dot(v, v).sqrt()
}

/// 4-connected components of `mask`: per-pixel label (`usize::MAX` off the
/// mask) and the component count. Matches the integrator's gauge grouping.
pub fn mask_components(mask: &Mask) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::from_elem((h, w), usize::MAX);
    let mut count = 0;
    let mut stack = Vec::new();
    for ((i, j), m) in mask.indexed_iter() {
        if !m || labels[[i, j]] != usize::MAX {
            continue;
        }
        labels[[i, j]] = count;
        stack.push((i, j));
        while let Some((a, b)) = stack.pop() {
            let up = a.checked_sub(1).map(|r| (r, b));
            let left = b.checked_sub(1).map(|c| (a, c));
            let down = (a + 1 < h).then_some((a + 1, b));
            let right = (b + 1 < w).then_some((a, b + 1));
            for (r, c) in [up, down, left, right].into_iter().flatten() {
                if mask[[r, c]] && labels[[r, c]] == usize::MAX {
                    labels[[r, c]] = count;
                    stack.push((r, c));
                }
            }
        }
        count += 1;
    }
    (labels, count)
}

/// RMSE of `d.z` against `reference` over the pixels in both masks, after
/// removing each 4-connected component's mean offset (depth is only known up
/// to one constant per component). Also returns the span of `reference` over
/// the same pixels; `None` when no pixel is shared.
pub fn analytic_rmse(d: &DepthMap, reference: &Plane, ref_mask: &Mask) -> Result<Option<(f64, f64)>> {
    check_dims("reference depth", d.z.dim(), reference.dim())?;
    check_dims("reference mask", d.z.dim(), ref_mask.dim())?;
    let shared = ndarray::Zip::from(&d.mask)
        .and(ref_mask)
        .map_collect(|a, b| *a && *b);
    let (labels, count) = mask_components(&shared);
    if count == 0 {
        return Ok(None);
    }
    let mut offset = vec![0.0; count];
    let mut size = vec![0usize; count];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((i, j), l) in labels.indexed_iter() {
        if *l != usize::MAX {
            offset[*l] += reference[[i, j]] - d.z[[i, j]];
            size[*l] += 1;
            lo = lo.min(reference[[i, j]]);
            hi = hi.max(reference[[i, j]]);
        }
    }
    for (o, n) in offset.iter_mut().zip(&size) {
        *o /= *n as f64;
    }
    let mut sq = 0.0;
    for ((i, j), l) in labels.indexed_iter() {
        if *l != usize::MAX {
            sq += (d.z[[i, j]] + offset[*l] - reference[[i, j]]).powi(2);
        }
    }
    let n: usize = size.iter().sum();
    Ok(Some(((sq / n as f64).sqrt(), hi - lo)))
}

/// Least-squares depth from a gradient field.
pub fn integrate(g: &GradientField, cfg: &IntegratorConfig) -> Result<DepthMap> {
    if !(cfg.tolerance > 0.0) || !(cfg.screening >= 0.0) {
        return Err(Error::InvalidValue(
            "integrator tolerance must be positive and screening non-negative".into(),
        ));
    }
    let (h, w) = g.dims();
    let prob = Problem::build(g);
    let n = prob.pixels.len();
    if n == 0 {
        return Err(Error::EmptyMask("integration mask is empty".into()));
    }
    let screened = cfg.screening > 0.0;
    let max_iter = cfg.max_iterations.unwrap_or(10 * n).max(1);
    let diag: Vec<f64> = prob
        .neighbors
        .iter()
        .map(|nb| {
            let d = nb.len() as f64 + cfg.screening;
            if d > 0.0 {
                d
            } else {
                1.0
            }
        })
        .collect();

    let mut b = prob.rhs();
    if !screened {
        prob.project(&mut b);
    }
    let b_norm = norm(&b);
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut rel = 0.0;

    if b_norm > 0.0 {
        let precondition = |r: &[f64]| -> Vec<f64> {
            let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
            if !screened {
                prob.project(&mut z);
            }
            z
        };
        let mut r = b.clone();
        let mut z = precondition(&r);
        let mut p = z.clone();
        let mut rz = par::dot(&r, &z);
        rel = 1.0;
        while iterations < max_iter {
            let ap = prob.apply(&p, cfg.screening);
            let pap = par::dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            iterations += 1;
            rel = norm(&r) / b_norm;
            history.push(rel);
            if rel <= cfg.tolerance {
                break;
            }
            z = precondition(&r);
            let rz_new = par::dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        if rel > cfg.tolerance {
            return Err(Error::IntegratorNonConvergence {
                iterations,
                last: rel,
                history,
            });
        }
    }
    // Zero-mean gauge per component.
    prob.project(&mut x);

    let res = prob.edge_residuals(&x);
    let objective = par::pairwise_sum(&res.iter().map(|r| r * r).collect::<Vec<_>>());
    let mut z = Plane::zeros((h, w));
    let mut residual_map = Plane::zeros((h, w));
    for (k, &(i, j)) in prob.pixels.iter().enumerate() {
        z[[i, j]] = x[k];
    }
    for (e, r) in prob.edges.iter().zip(&res) {
        let (i, j) = prob.pixels[e.from];
        residual_map[[i, j]] += r * r;
    }
    residual_map.mapv_inplace(f64::sqrt);
    debug_assert_eq!(prob.w, w);
    Ok(DepthMap {
        z,
        mask: g.mask.clone(),
        iterations,
        relative_residual: rel,
        objective,
        residual_map,
        components: prob.component_sizes.len(),
    })
}

/// Least-squares objective of an arbitrary depth against a gradient field,
/// evaluated edge by edge.
pub fn objective(g: &GradientField, z: &Plane) -> Result<f64> {
    check_dims("depth", g.dims(), z.dim())?;
    let (h, w) = g.dims();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            if !g.mask[[i, j]] {
                continue;
            }
            if j + 1 < w && g.mask[[i, j + 1]] {
                let r = z[[i, j + 1]] - z[[i, j]] - 0.5 * (g.p[[i, j]] + g.p[[i, j + 1]]);
                total += r * r;
            }
            if i + 1 < h && g.mask[[i + 1, j]] {
                let r = z[[i + 1, j]] - z[[i, j]] - 0.5 * (g.q[[i, j]] + g.q[[i + 1, j]]);
                total += r * r;
            }
        }
    }
    Ok(total)
}

/// Triangle mesh over masked pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// `(x, y, z)` with `x = col`, `y = −row`.
    pub vertices: Vec<[f64; 3]>,
    /// Zero-based, counter-clockwise seen from `+z`.
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 32 + self.faces.len() * 24);
        s.push_str("# polarsfp depth mesh\n");
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }
}

/// One vertex per masked pixel; two triangles per fully masked 2×2 quad.
pub fn depth_to_mesh(d: &DepthMap) -> Result<Mesh> {
    let (h, w) = d.z.dim();
    let mut id = vec![usize::MAX; h * w];
    let mut vertices = Vec::new();
    for ((i, j), m) in d.mask.indexed_iter() {
        if *m {
            id[i * w + j] = vertices.len();
            vertices.push([j as f64, -(i as f64), d.z[[i, j]]]);
        }
    }
    if vertices.is_empty() {
        return Err(Error::EmptyMask("mesh export: empty mask".into()));
    }
    let mut faces = Vec::new();
    for i in 0..h.saturating_sub(1) {
        for j in 0..w.saturating_sub(1) {
            let tl = id[i * w + j];
            let tr = id[i * w + j + 1];
            let bl = id[(i + 1) * w + j];
            let br = id[(i + 1) * w + j + 1];
            if [tl, tr, bl, br].contains(&usize::MAX) {
                continue;
            }
            faces.push([tl, bl, br]);
            faces.push([tl, br, tr]);
        }
    }
    Ok(Mesh { vertices, faces })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, p: f64, q: f64) -> GradientField {
        GradientField::new(
            Plane::from_elem((h, w), p),
            Plane::from_elem((h, w), q),
            Mask::from_elem((h, w), true),
        )
        .unwrap()
    }

    #[test]
    fn gradients_of_flat_and_tilted_planes() {
        let g = normals_to_gradients(&NormalMap::constant(3, 3, [0.0, 0.0, 1.0]), 1e-3).unwrap();
        assert!(g.field.p.iter().chain(g.field.q.iter()).all(|v| *v == 0.0));
        let beta: f64 = 0.4;
        let n = NormalMap::constant(3, 3, [-beta.sin(), 0.0, beta.cos()]);
        let g = normals_to_gradients(&n, 1e-3).unwrap();
        assert!(g.field.p.iter().all(|v| (v - beta.tan()).abs() < 1e-15));
    }

    #[test]
    fn grazing_pixels_masked() {
        let mut n = NormalMap::constant(2, 2, [0.0, 0.0, 1.0]);
        n.nx[[0, 1]] = 1.0;
        n.nz[[0, 1]] = 0.0;
        let g = normals_to_gradients(&n, 1e-3).unwrap();
        assert_eq!(g.grazing, 1);
        assert!(!g.field.mask[[0, 1]]);
        let all = NormalMap::constant(2, 2, [1.0, 0.0, 0.0]);
        assert!(normals_to_gradients(&all, 1e-3).is_err());
    }

    #[test]
    fn zero_gradients_integrate_to_zero() {
        let d = integrate(&field(8, 8, 0.0, 0.0), &IntegratorConfig::default()).unwrap();
        assert!(d.z.iter().all(|v| *v == 0.0));
        assert_eq!(d.components, 1);
    }

    #[test]
    fn disconnected_mask_gets_independent_gauges() {
        let mut g = field(6, 9, 0.5, 0.0);
        for i in 0..6 {
            g.mask[[i, 4]] = false;
        }
        let d = integrate(&g, &IntegratorConfig::default()).unwrap();
        assert_eq!(d.components, 2);
        let left: f64 = (0..6).flat_map(|i| (0..4).map(move |j| (i, j))).map(|ij| d.z[ij]).sum();
        let right: f64 = (0..6).flat_map(|i| (5..9).map(move |j| (i, j))).map(|ij| d.z[ij]).sum();
        assert!(left.abs() < 1e-9 && right.abs() < 1e-9);
    }

    #[test]
    fn non_convergence_carries_history() {
        let mut g = field(32, 32, 0.0, 0.0);
        g.p[[10, 10]] = 3.0;
        g.q[[20, 5]] = -2.0;
        let cfg = IntegratorConfig {
            max_iterations: Some(2),
            ..Default::default()
        };
        match integrate(&g, &cfg) {
            Err(Error::IntegratorNonConvergence { history, .. }) => assert_eq!(history.len(), 2),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn mesh_counts() {
        let d = integrate(&field(2, 2, 0.0, 0.0), &IntegratorConfig::default()).unwrap();
        let m = depth_to_mesh(&d).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces.len(), 2);
        let obj = m.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 2);
    }

    #[test]
    fn mesh_skips_hole() {
        let mut g = field(3, 3, 0.0, 0.0);
        g.mask[[1, 1]] = false;
        let d = integrate(&g, &IntegratorConfig::default()).unwrap();
        let m = depth_to_mesh(&d).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert!(m.faces.is_empty());
        let mut empty = d.clone();
        empty.mask.fill(false);
        assert!(depth_to_mesh(&empty).is_err());
    }
}
