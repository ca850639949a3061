//! PSNR and SSIM image quality metrics.
//!
//! Images arrive in the crate's internal `[0, 1]` convention (`3 x H x W`
//! or `H x W` tensors) and are converted to the 255-peak 8-bit convention
//! at this boundary. PSNR of identical images is reported as the `+inf`
//! sentinel. SSIM follows the standard single-scale formulation: 11x11
//! Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, L = 255, windows
//! slid over valid positions only.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which scalar field the metrics are computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ColorSpace {
    /// ITU-R BT.601 luma: `0.299 R + 0.587 G + 0.114 B`.
    #[default]
    Luminance,
    /// Treat all RGB samples as one field (PSNR) / average per-channel
    /// scores (SSIM).
    RgbMean,
}

impl ColorSpace {
    pub fn name(&self) -> &'static str {
        match self {
            ColorSpace::Luminance => "luminance",
            ColorSpace::RgbMean => "rgb_mean",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "luminance" => Ok(ColorSpace::Luminance),
            "rgb_mean" | "rgb-mean" => Ok(ColorSpace::RgbMean),
            other => Err(Error::invalid(format!(
                "unknown color space `{other}`; expected luminance or rgb_mean"
            ))),
        }
    }
}

/// PSNR/SSIM pair for one image comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub color_space: ColorSpace,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PEAK_8BIT: f64 = 255.0;

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "psnr needs equal nonempty buffers, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean local SSIM over all valid window positions of two equal planes
/// scaled to `[0, L]` with `L = 255`.
pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::shape(format!(
            "ssim planes {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.h, a.w
        )));
    }
    let c1 = (SSIM_K1 * PEAK_8BIT) * (SSIM_K1 * PEAK_8BIT);
    let c2 = (SSIM_K2 * PEAK_8BIT) * (SSIM_K2 * PEAK_8BIT);
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);

    // Separable Gaussian filtering of the five moment fields.
    let mu_a = filter_valid(a, &win);
    let mu_b = filter_valid(b, &win);
    let aa = filter_valid(&a.map2(a, |x, y| x * y), &win);
    let bb = filter_valid(&b.map2(b, |x, y| x * y), &win);
    let ab = filter_valid(&a.map2(b, |x, y| x * y), &win);

    let mut acc = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    Ok(acc / mu_a.data.len() as f64)
}

/// One scalar field with spatial extents.
#[derive(Clone)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(h * w, data.len());
        Plane { h, w, data }
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n as isize - 1) / 2;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Valid-mode separable filtering with the outer product of `taps`.
fn filter_valid(p: &Plane, taps: &[f64]) -> Plane {
    let k = taps.len();
    let wo = p.w - k + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; p.h * wo];
    for i in 0..p.h {
        let row = &p.data[i * p.w..][..p.w];
        let out = &mut tmp[i * wo..][..wo];
        for (j, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                acc += tap * row[j + t];
            }
            *slot = acc;
        }
    }
    // Vertical pass.
    let ho = p.h - k + 1;
    let mut data = vec![0.0; ho * wo];
    for i in 0..ho {
        let out = &mut data[i * wo..][..wo];
        for (t, &tap) in taps.iter().enumerate() {
            let row = &tmp[(i + t) * wo..][..wo];
            for (slot, &v) in out.iter_mut().zip(row) {
                *slot += tap * v;
            }
        }
    }
    Plane::new(ho, wo, data)
}

/// Extract the metric field(s) from a `3 x H x W` or `H x W` tensor in
/// `[0, 1]`, scaled to `[0, 255]`.
fn planes_of(image: &Tensor, cs: ColorSpace) -> Result<Vec<Plane>> {
    let s = image.shape();
    match s {
        [h, w] => Ok(vec![Plane::new(
            *h,
            *w,
            image.data().iter().map(|v| v * PEAK_8BIT).collect(),
        )]),
        [3, h, w] => {
            let (h, w) = (*h, *w);
            let d = image.data();
            match cs {
                ColorSpace::Luminance => {
                    let mut data = Vec::with_capacity(h * w);
                    for i in 0..h * w {
                        let y = 0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i];
                        data.push(y * PEAK_8BIT);
                    }
                    Ok(vec![Plane::new(h, w, data)])
                }
                ColorSpace::RgbMean => Ok((0..3)
                    .map(|c| {
                        Plane::new(
                            h,
                            w,
                            d[c * h * w..][..h * w].iter().map(|v| v * PEAK_8BIT).collect(),
                        )
                    })
                    .collect()),
            }
        }
        other => Err(Error::shape(format!(
            "metrics expect 3xHxW or HxW images, got {:?}",
            other
        ))),
    }
}

impl MetricReport {
    /// Compare two `[0, 1]` images.
    pub fn compare(a: &Tensor, b: &Tensor, cs: ColorSpace) -> Result<MetricReport> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "metric inputs {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let pa = planes_of(a, cs)?;
        let pb = planes_of(b, cs)?;
        let psnr_db = match cs {
            ColorSpace::Luminance => psnr(&pa[0].data, &pb[0].data, PEAK_8BIT)?,
            ColorSpace::RgbMean => {
                // One MSE over all samples.
                let all_a: Vec<f64> = pa.iter().flat_map(|p| p.data.iter().copied()).collect();
                let all_b: Vec<f64> = pb.iter().flat_map(|p| p.data.iter().copied()).collect();
                psnr(&all_a, &all_b, PEAK_8BIT)?
            }
        };
        let mut ssim_acc = 0.0;
        for (x, y) in pa.iter().zip(&pb) {
            ssim_acc += ssim_plane(x, y)?;
        }
        Ok(MetricReport {
            psnr_db,
            ssim: ssim_acc / pa.len() as f64,
            color_space: cs,
        })
    }
}

/// Render reports in the line-oriented `key=value` exchange format.
pub fn render_report(mean: &MetricReport, per_image: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "color_space={}", mean.color_space.name());
    let _ = writeln!(out, "count={}", per_image.len());
    let _ = writeln!(out, "psnr_db={}", mean.psnr_db);
    let _ = writeln!(out, "ssim={}", mean.ssim);
    for (id, r) in per_image {
        let _ = writeln!(out, "image.{id}.psnr_db={}", r.psnr_db);
        let _ = writeln!(out, "image.{id}.ssim={}", r.ssim);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_plane(seed: u64, h: usize, w: usize) -> Plane {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Plane::new(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect(),
        )
    }

    #[test]
    fn psnr_of_identical_images_is_inf() {
        let a = vec![10.0, 200.0, 37.5];
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_of_unit_offset_matches_closed_form() {
        let a = vec![10.0; 64];
        let b = vec![11.0; 64];
        let got = psnr(&a, &b, 255.0).unwrap();
        assert!((got - 48.130803608679103).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = rand_plane(1, 8, 8).data;
        let b = rand_plane(2, 8, 8).data;
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = rand_plane(3, 16, 16);
        let s = ssim_plane(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = rand_plane(4, 16, 16);
        let b = rand_plane(5, 16, 16);
        let ab = ssim_plane(&a, &b).unwrap();
        let ba = ssim_plane(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn anticorrelated_structure_scores_negative() {
        // Values far from mid-gray in two clusters; inverting flips the
        // structure term while keeping plenty of local variance.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..24 * 24)
            .map(|_| {
                if rng.random_range(0..2) == 0 {
                    rng.random_range(0.0..40.0)
                } else {
                    rng.random_range(215.0..255.0)
                }
            })
            .collect();
        let a = Plane::new(24, 24, data.clone());
        let b = Plane::new(24, 24, data.iter().map(|v| 255.0 - v).collect());
        let s = ssim_plane(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn constant_offset_ssim_reduces_to_luminance_term() {
        let a = Plane::new(12, 12, vec![100.0; 144]);
        let b = Plane::new(12, 12, vec![110.0; 144]);
        let got = ssim_plane(&a, &b).unwrap();
        // Zero variances: SSIM = (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1).
        let c1 = (SSIM_K1 * PEAK_8BIT) * (SSIM_K1 * PEAK_8BIT);
        let want = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn too_small_image_is_an_error() {
        let a = rand_plane(7, 10, 16);
        assert!(ssim_plane(&a, &a).is_err());
    }

    #[test]
    fn report_compares_color_spaces() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let a = Tensor::rand_uniform(&mut rng, vec![3, 16, 16], 0.0, 1.0);
        let b = Tensor::rand_uniform(&mut rng, vec![3, 16, 16], 0.0, 1.0);
        let lum = MetricReport::compare(&a, &b, ColorSpace::Luminance).unwrap();
        let rgb = MetricReport::compare(&a, &b, ColorSpace::RgbMean).unwrap();
        assert!(lum.psnr_db.is_finite() && rgb.psnr_db.is_finite());
        assert_ne!(lum.psnr_db, rgb.psnr_db);
    }

    #[test]
    fn render_uses_inf_sentinel() {
        let r = MetricReport {
            psnr_db: f64::INFINITY,
            ssim: 1.0,
            color_space: ColorSpace::Luminance,
        };
        let text = render_report(&r, &[("a".into(), r)]);
        assert!(text.contains("psnr_db=inf"));
        assert!(text.contains("image.a.ssim=1"));
    }
}
