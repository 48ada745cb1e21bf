//! Losses and image-quality metrics.
//!
//! All means are taken over masked pixels. Reductions go through
//! [`crate::par::pairwise_sum`] so results do not depend on thread count.

use crate::error::{check_dims, Error, Result};
use crate::fresnel::normal_angles;
use crate::normal::{angle3, dot3, NormalMap};
use crate::par;
use crate::polar::{Mask, Plane, PolarizationStack};
use std::f64::consts::{FRAC_PI_2, PI};

/// Flat indices selected by `mask` (all pixels when `None`).
fn selected(dims: (usize, usize), mask: Option<&Mask>, what: &str) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match mask {
        Some(m) => {
            check_dims(format!("{what} mask"), dims, m.dim())?;
            m.iter()
                .enumerate()
                .filter_map(|(k, v)| v.then_some(k))
                .collect()
        }
        None => (0..dims.0 * dims.1).collect(),
    };
    if idx.is_empty() {
        return Err(Error::EmptyMask(format!("{what}: no pixels selected")));
    }
    Ok(idx)
}

fn flat(p: &Plane) -> &[f64] {
    p.as_slice().expect("planes are standard-layout")
}

/// Mean absolute difference over masked pixels.
pub fn l1_loss(a: &Plane, b: &Plane, mask: Option<&Mask>) -> Result<f64> {
    check_dims("l1 operand", a.dim(), b.dim())?;
    let idx = selected(a.dim(), mask, "l1")?;
    let (a, b) = (flat(a), flat(b));
    Ok(par::sum_indexed(idx.len(), |k| (a[idx[k]] - b[idx[k]]).abs()) / idx.len() as f64)
}

/// Mean squared error pooled over several plane pairs.
pub fn mse_planes(pairs: &[(&Plane, &Plane)], mask: Option<&Mask>) -> Result<f64> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::InvalidValue("no planes to compare".into()));
    };
    let dims = first.dim();
    let idx = selected(dims, mask, "mse")?;
    let mut sums = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        check_dims("mse operand", dims, a.dim())?;
        check_dims("mse operand", dims, b.dim())?;
        let (a, b) = (flat(a), flat(b));
        sums.push(par::sum_indexed(idx.len(), |k| {
            let d = a[idx[k]] - b[idx[k]];
            d * d
        }));
    }
    Ok(par::pairwise_sum(&sums) / (idx.len() * pairs.len()) as f64)
}

/// `10·log10(peak²/MSE)`; `+∞` when the images agree exactly.
pub fn psnr(a: &Plane, b: &Plane, mask: Option<&Mask>, peak: f64) -> Result<f64> {
    psnr_planes(&[(a, b)], mask, peak)
}

/// PSNR with MSE pooled over all plane pairs.
pub fn psnr_planes(pairs: &[(&Plane, &Plane)], mask: Option<&Mask>, peak: f64) -> Result<f64> {
    let mse = mse_planes(pairs, mask)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// SSIM constants and Gaussian window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`.
    pub dynamic_range: f64,
    /// Window side length (odd).
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::InvalidValue("SSIM constants C1, C2 must be positive".into()));
        }
        if self.window == 0 || self.window.is_multiple_of(2) || !(self.sigma > 0.0) {
            return Err(Error::InvalidValue(
                "SSIM window must be odd and sigma positive".into(),
            ));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|k| (-(k as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-region separable filtering of `f(i, j)`.
fn filter_valid<F>(h: usize, w: usize, kernel: &[f64], f: F) -> Plane
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    let n = kernel.len();
    let src = par::grid(h, w, f);
    let rows = par::grid(h, w + 1 - n, |i, j| {
        kernel.iter().enumerate().map(|(k, g)| g * src[[i, j + k]]).sum::<f64>()
    });
    par::grid(h + 1 - n, w + 1 - n, |i, j| {
        kernel.iter().enumerate().map(|(k, g)| g * rows[[i + k, j]]).sum::<f64>()
    })
}

/// Local SSIM at every window position fully inside the image.
/// Entry `(i, j)` is centered on pixel `(i + r, j + r)` with `r = window/2`.
pub fn ssim_map(a: &Plane, b: &Plane, params: &SsimParams) -> Result<Plane> {
    params.validate()?;
    check_dims("ssim operand", a.dim(), b.dim())?;
    let (h, w) = a.dim();
    if h < params.window || w < params.window {
        return Err(Error::InvalidValue(format!(
            "image {h}×{w} is smaller than the {0}×{0} SSIM window",
            params.window
        )));
    }
    let k = params.kernel();
    let mx = filter_valid(h, w, &k, |i, j| a[[i, j]]);
    let my = filter_valid(h, w, &k, |i, j| b[[i, j]]);
    let mxx = filter_valid(h, w, &k, |i, j| a[[i, j]] * a[[i, j]]);
    let myy = filter_valid(h, w, &k, |i, j| b[[i, j]] * b[[i, j]]);
    let mxy = filter_valid(h, w, &k, |i, j| a[[i, j]] * b[[i, j]]);
    let (c1, c2) = (params.c1(), params.c2());
    let (oh, ow) = mx.dim();
    Ok(par::grid(oh, ow, |i, j| {
        let (ux, uy) = (mx[[i, j]], my[[i, j]]);
        let vx = mxx[[i, j]] - ux * ux;
        let vy = myy[[i, j]] - uy * uy;
        let cxy = mxy[[i, j]] - ux * uy;
        ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    }))
}

/// Mean local SSIM over all valid window centers.
pub fn ssim(a: &Plane, b: &Plane, params: &SsimParams) -> Result<f64> {
    ssim_masked(a, b, params, None)
}

/// Mean local SSIM over valid window centers that lie inside `mask`.
pub fn ssim_masked(a: &Plane, b: &Plane, params: &SsimParams, mask: Option<&Mask>) -> Result<f64> {
    let map = ssim_map(a, b, params)?;
    let r = params.window / 2;
    let centers = match mask {
        Some(m) => {
            check_dims("ssim mask", a.dim(), m.dim())?;
            Some(Mask::from_shape_fn(map.dim(), |(i, j)| m[[i + r, j + r]]))
        }
        None => None,
    };
    let idx = selected(map.dim(), centers.as_ref(), "ssim")?;
    let v = flat(&map);
    Ok(par::sum_indexed(idx.len(), |k| v[idx[k]]) / idx.len() as f64)
}

/// Mean SSIM across plane pairs.
pub fn ssim_planes(pairs: &[(&Plane, &Plane)], params: &SsimParams, mask: Option<&Mask>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidValue("no planes to compare".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += ssim_masked(a, b, params, mask)?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn ssim_loss(a: &Plane, b: &Plane, params: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim(a, b, params)?)
}

/// Anisotropic total variation `Σ |I[i+1,j] − I[i,j]| + |I[i,j+1] − I[i,j]|`
/// over the forward differences that exist (a raw sum).
pub fn tv_loss(img: &Plane) -> f64 {
    let (h, w) = img.dim();
    let per_row = par::map_indexed(h, |i| {
        let mut s = 0.0;
        for j in 0..w {
            if i + 1 < h {
                s += (img[[i + 1, j]] - img[[i, j]]).abs();
            }
            if j + 1 < w {
                s += (img[[i, j + 1]] - img[[i, j]]).abs();
            }
        }
        s
    });
    par::pairwise_sum(&per_row)
}

/// [`tv_loss`] divided by the pixel count.
pub fn tv_mean(img: &Plane) -> f64 {
    let n = img.len();
    if n == 0 {
        0.0
    } else {
        tv_loss(img) / n as f64
    }
}

/// Per-pixel angular errors and their summary.
#[derive(Debug, Clone)]
pub struct AngularErrors {
    /// Degrees; 0 outside `mask`.
    pub map: Plane,
    /// Pixels foreground in both maps.
    pub mask: Mask,
    pub mae_deg: f64,
    /// Lower median for even counts.
    pub median_deg: f64,
    pub count: usize,
}

fn shared_mask(pred: &NormalMap, gt: &NormalMap) -> Result<Mask> {
    check_dims("predicted normal map", gt.dims(), pred.dims())?;
    Ok(ndarray::Zip::from(&pred.mask)
        .and(&gt.mask)
        .map_collect(|a, b| *a && *b))
}

/// Angle between predicted and reference normals, in degrees, over the shared
/// foreground. Computed as `atan2(‖a×b‖, a·b)`, which equals `arccos(a·b)`
/// for unit vectors but stays accurate near 0°.
pub fn angular_error_map(pred: &NormalMap, gt: &NormalMap) -> Result<AngularErrors> {
    let mask = shared_mask(pred, gt)?;
    let (h, w) = gt.dims();
    let map = par::grid(h, w, |i, j| {
        if mask[[i, j]] {
            angle3(pred.at(i, j), gt.at(i, j)).to_degrees()
        } else {
            0.0
        }
    });
    let idx = selected((h, w), Some(&mask), "angular error")?;
    let v = flat(&map);
    let mae_deg = par::sum_indexed(idx.len(), |k| v[idx[k]]) / idx.len() as f64;
    let mut sorted: Vec<f64> = idx.iter().map(|k| v[*k]).collect();
    sorted.sort_by(f64::total_cmp);
    let median_deg = sorted[(sorted.len() - 1) / 2];
    Ok(AngularErrors {
        map,
        mask,
        mae_deg,
        median_deg,
        count: idx.len(),
    })
}

/// Masked mean of `1 − ⟨n_pred, n_gt⟩` over the shared foreground.
///
/// Equal to `[Σ_all (1 − ⟨·,·⟩) − m] / (W·H − m)` when the `m` background
/// pixels each contribute exactly 1, which is what the zero-vector
/// background encoding yields.
pub fn normal_cosine_loss(pred: &NormalMap, gt: &NormalMap) -> Result<f64> {
    let mask = shared_mask(pred, gt)?;
    let (_, w) = gt.dims();
    let idx = selected(gt.dims(), Some(&mask), "normal loss")?;
    Ok(par::sum_indexed(idx.len(), |k| {
        let (i, j) = (idx[k] / w, idx[k] % w);
        1.0 - dot3(pred.at(i, j), gt.at(i, j))
    }) / idx.len() as f64)
}

pub const HIST_ZENITH_BINS: usize = 8;
pub const HIST_AZIMUTH_BINS: usize = 8;
pub const HIST_BINS: usize = HIST_ZENITH_BINS * HIST_AZIMUTH_BINS;

/// Normalized 64-bin histogram of normal directions: 8 zenith bins over
/// `[0°, 90°]` × 8 azimuth bins over `[0°, 360°)`. Index is `zenith·8 + azimuth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalHistogram {
    pub bins: [f64; HIST_BINS],
}

impl NormalHistogram {
    pub fn one_hot(bin: usize) -> Self {
        let mut bins = [0.0; HIST_BINS];
        bins[bin] = 1.0;
        Self { bins }
    }
}

/// Histogram cell of one unit normal. Bins are right-exclusive except the
/// last zenith bin, which also holds 90°. Zenith bin 0 always uses azimuth bin 0.
pub fn histogram_bin(n: [f64; 3]) -> usize {
    let (theta, alpha) = normal_angles(n);
    let zb = ((theta / FRAC_PI_2 * HIST_ZENITH_BINS as f64).floor() as usize).min(HIST_ZENITH_BINS - 1);
    let ab = if zb == 0 {
        0
    } else {
        ((alpha / (2.0 * PI) * HIST_AZIMUTH_BINS as f64).floor() as usize).min(HIST_AZIMUTH_BINS - 1)
    };
    zb * HIST_AZIMUTH_BINS + ab
}

pub fn normal_histogram(n: &NormalMap) -> Result<NormalHistogram> {
    let mut counts = [0usize; HIST_BINS];
    let mut total = 0usize;
    for ((i, j), m) in n.mask.indexed_iter() {
        if *m {
            counts[histogram_bin(n.at(i, j))] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask("normal histogram: empty foreground".into()));
    }
    Ok(NormalHistogram {
        bins: counts.map(|c| c as f64 / total as f64),
    })
}

/// `‖a − b‖₁`.
pub fn hist_l1(a: &NormalHistogram, b: &NormalHistogram) -> f64 {
    a.bins.iter().zip(&b.bins).map(|(x, y)| (x - y).abs()).sum()
}

/// Weights of the six loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub hist: f64,
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub perceptual: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hist: 1.0,
            l1: 10.0,
            ssim: 1.0,
            tv: 10.0,
            perceptual: 2.0,
            normal: 30.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.hist, self.l1, self.ssim, self.tv, self.perceptual, self.normal]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidValue("loss weights must be finite and ≥ 0".into()))
        }
    }
}

/// Individual loss values; `None` marks a term that was not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub hist: Option<f64>,
    pub l1: Option<f64>,
    pub ssim_loss: Option<f64>,
    pub tv: Option<f64>,
    pub perceptual: Option<f64>,
    pub normal: Option<f64>,
}

impl LossComponents {
    pub fn all(v: f64) -> Self {
        Self {
            hist: Some(v),
            l1: Some(v),
            ssim_loss: Some(v),
            tv: Some(v),
            perceptual: Some(v),
            normal: Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// `λ1·hist + λ2·L1 + λ3·SSIMloss + λ4·TV + λ5·perceptual + λ6·normal`.
///
/// A missing term with positive weight is an error, except the perceptual
/// term, which is skipped with a warning.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<TotalLoss> {
    w.validate()?;
    let mut warnings = Vec::new();
    let terms = [
        ("hist", c.hist, w.hist),
        ("l1", c.l1, w.l1),
        ("ssim", c.ssim_loss, w.ssim),
        ("tv", c.tv, w.tv),
        ("perceptual", c.perceptual, w.perceptual),
        ("normal", c.normal, w.normal),
    ];
    let mut value = 0.0;
    for (name, v, weight) in terms {
        match v {
            Some(v) => value += weight * v,
            None if weight == 0.0 => {}
            None if name == "perceptual" => warnings.push(format!(
                "perceptual metric unavailable; its weight {weight} was not applied"
            )),
            None => {
                return Err(Error::InvalidValue(format!(
                    "loss term `{name}` is missing but weighted {weight}"
                )))
            }
        }
    }
    Ok(TotalLoss { value, warnings })
}

/// Pluggable perceptual distance on mean-intensity images.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Plane, b: &Plane) -> Result<f64>;
}

/// Mean absolute difference of the mean-intensity images.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanIntensityL1;

impl PerceptualMetric for MeanIntensityL1 {
    fn name(&self) -> &str {
        "mean-intensity-l1"
    }

    fn distance(&self, a: &Plane, b: &Plane) -> Result<f64> {
        l1_loss(a, b, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerceptualValue {
    Unavailable,
    Value(f64),
}

impl PerceptualValue {
    pub fn value(self) -> Option<f64> {
        match self {
            PerceptualValue::Value(v) => Some(v),
            PerceptualValue::Unavailable => None,
        }
    }
}

/// Reduces both stacks to mean intensity and applies `metric`, if plugged.
pub fn perceptual_hook(
    a: &PolarizationStack,
    b: &PolarizationStack,
    metric: Option<&dyn PerceptualMetric>,
) -> Result<PerceptualValue> {
    check_dims("perceptual operand", a.dims(), b.dims())?;
    match metric {
        None => Ok(PerceptualValue::Unavailable),
        Some(m) => Ok(PerceptualValue::Value(
            m.distance(&a.mean_intensity(), &b.mean_intensity())?,
        )),
    }
}

/// Value slot in a [`MetricsReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Finite(f64),
    /// Exact agreement (PSNR with zero MSE).
    Infinite,
    Unavailable,
}

impl MetricValue {
    pub fn from_f64(v: f64) -> Self {
        if v.is_finite() {
            MetricValue::Finite(v)
        } else if v == f64::INFINITY {
            MetricValue::Infinite
        } else {
            MetricValue::Unavailable
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            MetricValue::Finite(v) => Some(v),
            _ => None,
        }
    }
}

/// PSNR cap used when writing an infinite value to CSV.
pub const CSV_PSNR_CAP: f64 = 99.0;

/// Report keys, in canonical order.
pub const REPORT_KEYS: [&str; 9] = [
    "psnr",
    "ssim",
    "l1",
    "tv_mean",
    "mae_deg",
    "median_ae_deg",
    "hist_l1",
    "normal_loss",
    "total_loss",
];

/// Named scalar results with mask provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    values: [MetricValue; REPORT_KEYS.len()],
    pub mask_coverage: f64,
    pub notes: Vec<String>,
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self {
            values: [MetricValue::Unavailable; REPORT_KEYS.len()],
            mask_coverage: 0.0,
            notes: Vec::new(),
        }
    }
}

impl MetricsReport {
    fn slot(key: &str) -> usize {
        REPORT_KEYS
            .iter()
            .position(|k| *k == key)
            .unwrap_or_else(|| panic!("unknown report key {key}"))
    }

    pub fn set(&mut self, key: &str, v: MetricValue) {
        self.values[Self::slot(key)] = v;
    }

    pub fn get(&self, key: &str) -> MetricValue {
        self.values[Self::slot(key)]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, MetricValue)> + '_ {
        REPORT_KEYS.iter().copied().zip(self.values.iter().copied())
    }

    /// JSON with metric keys in canonical order; infinity is written as
    /// `"inf"` and missing values as `"unavailable"`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut metrics = serde_json::Map::new();
        for (k, v) in self.entries() {
            let j = match v {
                MetricValue::Finite(x) => serde_json::json!(x),
                MetricValue::Infinite => serde_json::json!("inf"),
                MetricValue::Unavailable => serde_json::json!("unavailable"),
            };
            metrics.insert(k.to_string(), j);
        }
        serde_json::json!({
            "metrics": metrics,
            "mask_coverage": self.mask_coverage,
            "notes": self.notes,
        })
    }

    /// `metric,value` rows; infinite values are capped at [`CSV_PSNR_CAP`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.entries() {
            let s = match v {
                MetricValue::Finite(x) => format!("{x}"),
                MetricValue::Infinite => format!("{CSV_PSNR_CAP}"),
                MetricValue::Unavailable => "unavailable".to_string(),
            };
            out.push_str(&format!("{k},{s}\n"));
        }
        out
    }
}
