//! Multi-scale, multi-orientation Gabor filter bank.
//!
//! Each kernel is a Gaussian envelope modulated by a cosine carrier,
//!
//! ```text
//! G(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)
//! x' =  x cos(theta) + y sin(theta)
//! y' = -x sin(theta) + y cos(theta)
//! ```
//!
//! evaluated at integer pixel offsets around the kernel center. Kernels are
//! raw values: no DC removal and no norm scaling, so the surrounding
//! learnable 1x1 convolutions absorb any gain. The default bank crosses four
//! wavelengths with four orientations (16 kernels); the bank response of an
//! image is the elementwise sum of all enabled kernels applied depthwise.

use crate::error::{Error, Result};
use crate::params::Forward;
use crate::tensor::{PaddingMode, Tape, Tensor, Var};

/// Default orientation set, in degrees. With a zero phase offset the 180°
/// entry coincides with 0°; the set is kept verbatim.
pub const DEFAULT_THETAS_DEG: [f64; 4] = [45.0, 90.0, 135.0, 180.0];

/// Default wavelength set, in pixels.
pub const DEFAULT_LAMBDAS: [f64; 4] = [1.0, 1.5, 2.0, 2.5];

/// Default Gaussian standard deviation (`2 pi`).
pub const DEFAULT_SIGMA: f64 = std::f64::consts::TAU;

/// Default spatial ellipticity.
pub const DEFAULT_GAMMA: f64 = 0.5;

/// Default odd kernel side length. Covers a full period of the largest
/// default wavelength; with sigma = 2 pi the envelope is nearly flat over it.
pub const DEFAULT_KSIZE: usize = 7;

/// The five kernel parameters plus the sampled extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborParams {
    /// Wavelength of the cosine carrier, in pixels.
    pub lambda: f64,
    /// Orientation, in radians.
    pub theta: f64,
    /// Phase offset, in radians.
    pub psi: f64,
    /// Gaussian standard deviation, in pixels.
    pub sigma: f64,
    /// Spatial ellipticity (1 = isotropic).
    pub gamma: f64,
    /// Odd kernel side length, in pixels.
    pub ksize: usize,
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.ksize < 3 || self.ksize % 2 == 0 {
            return Err(Error::invalid(format!(
                "ksize must be odd and >= 3, got {}",
                self.ksize
            )));
        }
        Ok(())
    }
}

/// Sample one Gabor kernel on its integer pixel grid.
///
/// Row index grows with `y`, column index with `x`; the center tap sits at
/// `((ksize-1)/2, (ksize-1)/2)` and equals `cos(psi)` exactly.
pub fn gabor_kernel(p: &GaborParams) -> Result<Tensor> {
    p.validate()?;
    let k = p.ksize;
    let half = (k as isize - 1) / 2;
    let (sin_t, cos_t) = (snap_trig(p.theta.sin()), snap_trig(p.theta.cos()));
    let mut data = Vec::with_capacity(k * k);
    for yy in -half..=half {
        for xx in -half..=half {
            let (x, y) = (xx as f64, yy as f64);
            let xp = x * cos_t + y * sin_t;
            let yp = -x * sin_t + y * cos_t;
            let envelope = (-(xp * xp + p.gamma * p.gamma * yp * yp) / (2.0 * p.sigma * p.sigma)).exp();
            let carrier = (std::f64::consts::TAU * xp / p.lambda + p.psi).cos();
            data.push(envelope * carrier);
        }
    }
    Tensor::new(vec![k, k], data)
}

/// A grid of precomputed Gabor kernels with a per-entry enable mask.
///
/// Entries are ordered lexicographically: wavelength index outer,
/// orientation index inner. Immutable apart from the mask; kernels are
/// recomputed whenever the parameter set changes.
#[derive(Clone, Debug)]
pub struct GaborBank {
    params: Vec<GaborParams>,
    kernels: Vec<Tensor>,
    enabled: Vec<bool>,
    n_lambda: usize,
    n_theta: usize,
}

impl GaborBank {
    /// Bank over the cartesian product of `lambdas` x `thetas` (radians).
    pub fn from_grid(lambdas: &[f64], thetas: &[f64], psi: f64, sigma: f64, gamma: f64, ksize: usize) -> Result<Self> {
        if lambdas.is_empty() || thetas.is_empty() {
            return Err(Error::invalid("bank needs at least one wavelength and one orientation"));
        }
        let mut params = Vec::with_capacity(lambdas.len() * thetas.len());
        for &lambda in lambdas {
            for &theta in thetas {
                params.push(GaborParams {
                    lambda,
                    theta,
                    psi,
                    sigma,
                    gamma,
                    ksize,
                });
            }
        }
        let kernels = params.iter().map(gabor_kernel).collect::<Result<Vec<_>>>()?;
        Ok(GaborBank {
            enabled: vec![true; params.len()],
            n_lambda: lambdas.len(),
            n_theta: thetas.len(),
            params,
            kernels,
        })
    }

    /// The 16-kernel bank: wavelengths {1.0, 1.5, 2.0, 2.5}, orientations
    /// {45°, 90°, 135°, 180°}, psi = 0, sigma = 2 pi, gamma = 0.5.
    pub fn default_bank() -> Self {
        Self::default_bank_with_ksize(DEFAULT_KSIZE)
    }

    pub fn default_bank_with_ksize(ksize: usize) -> Self {
        let thetas: Vec<f64> = DEFAULT_THETAS_DEG.iter().map(|d| d.to_radians()).collect();
        Self::from_grid(
            &DEFAULT_LAMBDAS,
            &thetas,
            0.0,
            DEFAULT_SIGMA,
            DEFAULT_GAMMA,
            ksize,
        )
        .expect("default parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn grid_extents(&self) -> (usize, usize) {
        (self.n_lambda, self.n_theta)
    }

    pub fn params(&self) -> &[GaborParams] {
        &self.params
    }

    pub fn kernel(&self, lambda_idx: usize, theta_idx: usize) -> &Tensor {
        &self.kernels[lambda_idx * self.n_theta + theta_idx]
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn ksize(&self) -> usize {
        self.params[0].ksize
    }

    pub fn is_enabled(&self, lambda_idx: usize, theta_idx: usize) -> bool {
        self.enabled[lambda_idx * self.n_theta + theta_idx]
    }

    pub fn set_enabled(&mut self, lambda_idx: usize, theta_idx: usize, on: bool) {
        self.enabled[lambda_idx * self.n_theta + theta_idx] = on;
    }

    /// Keep only the entries selected by `keep(lambda_idx, theta_idx)`.
    pub fn retain(&mut self, keep: impl Fn(usize, usize) -> bool) {
        for li in 0..self.n_lambda {
            for ti in 0..self.n_theta {
                self.enabled[li * self.n_theta + ti] = keep(li, ti);
            }
        }
    }

    pub fn enabled_count(&self) -> usize {
        self.enabled.iter().filter(|&&e| e).count()
    }

    /// Elementwise sum of all enabled kernels. Convolution is linear in the
    /// kernel, so one pass with this summed kernel equals the sum of the
    /// per-kernel responses.
    pub fn summed_kernel(&self) -> Result<Tensor> {
        if self.enabled_count() == 0 {
            return Err(Error::invalid(
                "all bank entries disabled; the query path would be identically zero",
            ));
        }
        let k = self.ksize();
        let mut acc = vec![0.0; k * k];
        for (kernel, &on) in self.kernels.iter().zip(&self.enabled) {
            if on {
                for (a, &v) in acc.iter_mut().zip(kernel.data()) {
                    *a += v;
                }
            }
        }
        Tensor::new(vec![k, k], acc)
    }
}

/// Apply every enabled kernel depthwise (same 2-D kernel on each channel,
/// reflect padding) and sum the responses. Differentiable with respect to
/// `x`; the kernels are constants.
pub fn apply_bank(fw: &mut Forward<'_>, x: Var, bank: &GaborBank) -> Result<Var> {
    let shape = fw.tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("apply_bank expects BCHW, got {:?}", shape)));
    }
    let c = shape[1];
    let weight = depthwise_weight(&bank.summed_kernel()?, c);
    let w = fw.tape.constant(&weight);
    fw.tape.conv2d(x, w, None, 1, PaddingMode::Reflect, c)
}

/// Non-differentiating convenience for image-space filtering (CLI, tests).
pub fn apply_bank_tensor(x: &Tensor, bank: &GaborBank) -> Result<Tensor> {
    let mut tape = Tape::new();
    let shape = x.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("apply_bank expects BCHW, got {:?}", shape)));
    }
    let c = shape[1];
    let xv = tape.constant(x);
    let weight = depthwise_weight(&bank.summed_kernel()?, c);
    let w = tape.constant(&weight);
    let y = tape.conv2d(xv, w, None, 1, PaddingMode::Reflect, c)?;
    Ok(tape.value(y))
}

/// Clamp a sine/cosine to its exact limit when within rounding distance.
///
/// `sin(pi)` evaluates to ~1.2e-16 rather than 0; without this, the
/// orientation set {45°, 90°, 135°, 180°} would lose the exact evenness of
/// the kernel in (x', y') that the 180° = 0° identity rests on.
fn snap_trig(v: f64) -> f64 {
    const TOL: f64 = 1e-15;
    if v.abs() < TOL {
        0.0
    } else if (v - 1.0).abs() < TOL {
        1.0
    } else if (v + 1.0).abs() < TOL {
        -1.0
    } else {
        v
    }
}

/// Replicate a `[k, k]` kernel into a depthwise `[c, 1, k, k]` weight.
fn depthwise_weight(kernel: &Tensor, c: usize) -> Tensor {
    let k = kernel.shape()[0];
    let mut data = Vec::with_capacity(c * k * k);
    for _ in 0..c {
        data.extend_from_slice(kernel.data());
    }
    Tensor::new(vec![c, 1, k, k], data).expect("consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_params(lambda: f64, theta_deg: f64) -> GaborParams {
        GaborParams {
            lambda,
            theta: theta_deg.to_radians(),
            psi: 0.0,
            sigma: DEFAULT_SIGMA,
            gamma: DEFAULT_GAMMA,
            ksize: 7,
        }
    }

    #[test]
    fn center_tap_is_exactly_one_for_zero_phase() {
        for &lambda in &DEFAULT_LAMBDAS {
            for &theta in &DEFAULT_THETAS_DEG {
                let k = gabor_kernel(&spec_params(lambda, theta)).unwrap();
                assert_eq!(k.at(&[3, 3]), 1.0);
            }
        }
    }

    #[test]
    fn frozen_tap_values_match_scalar_oracle() {
        // Evaluated independently with a 30-digit calculator.
        let k = gabor_kernel(&spec_params(2.0, 0.0)).unwrap();
        let tap = k.at(&[3, 4]); // offset (x=1, y=0)
        assert!((tap - (-0.98741471750621951)).abs() < 1e-15, "tap {tap}");

        let k90 = gabor_kernel(&spec_params(2.0, 90.0)).unwrap();
        let tap90 = k90.at(&[5, 3]); // offset (x=0, y=2)
        assert!((tap90 - 0.95060125762662670).abs() < 1e-15, "tap {tap90}");
    }

    #[test]
    fn even_ksize_is_rejected() {
        let mut p = spec_params(2.0, 0.0);
        p.ksize = 6;
        assert!(gabor_kernel(&p).is_err());
        p.ksize = 1;
        assert!(gabor_kernel(&p).is_err());
    }

    #[test]
    fn kernel_is_even_under_point_reflection_for_zero_phase() {
        for &lambda in &DEFAULT_LAMBDAS {
            let k = gabor_kernel(&spec_params(lambda, 45.0)).unwrap();
            for y in 0..7 {
                for x in 0..7 {
                    assert_eq!(k.at(&[y, x]), k.at(&[6 - y, 6 - x]));
                }
            }
        }
    }

    #[test]
    fn theta_180_equals_theta_0_bitwise() {
        for &lambda in &DEFAULT_LAMBDAS {
            let a = gabor_kernel(&spec_params(lambda, 180.0)).unwrap();
            let b = gabor_kernel(&spec_params(lambda, 0.0)).unwrap();
            assert_eq!(a, b, "lambda {lambda}");
        }
    }

    #[test]
    fn default_bank_has_sixteen_enabled_kernels() {
        let bank = GaborBank::default_bank();
        assert_eq!(bank.len(), 16);
        assert_eq!(bank.enabled_count(), 16);
        assert_eq!(bank.grid_extents(), (4, 4));
        // Lexicographic order: lambda outer, theta inner.
        assert_eq!(bank.params()[1].lambda, 1.0);
        assert_eq!(bank.params()[4].lambda, 1.5);
    }

    #[test]
    fn mask_reduces_to_single_kernel() {
        let mut bank = GaborBank::default_bank();
        bank.retain(|li, ti| li == 0 && ti == 0);
        assert_eq!(bank.enabled_count(), 1);
        let summed = bank.summed_kernel().unwrap();
        assert_eq!(summed, *bank.kernel(0, 0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut bank = GaborBank::default_bank();
        bank.retain(|_, _| false);
        assert!(bank.summed_kernel().is_err());
    }

    #[test]
    fn constant_input_yields_kernel_sum_everywhere() {
        // Reflect padding extends a constant field exactly, so every output
        // element is c * sum(K), borders included.
        let mut bank = GaborBank::default_bank();
        bank.retain(|li, ti| li == 2 && ti == 1);
        let ksum: f64 = bank.summed_kernel().unwrap().data().iter().sum();
        let c = 0.75;
        let x = Tensor::full(vec![1, 2, 8, 8], c);
        let y = apply_bank_tensor(&x, &bank).unwrap();
        for &v in y.data() {
            assert!((v - c * ksum).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_application_is_linear() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let bank = GaborBank::default_bank();
        let x = Tensor::rand_uniform(&mut rng, vec![1, 2, 8, 8], -1.0, 1.0);
        let y = Tensor::rand_uniform(&mut rng, vec![1, 2, 8, 8], -1.0, 1.0);
        let (a, b) = (1.75, -0.4);
        let mut mix = x.clone();
        for (m, (&xv, &yv)) in mix.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *m = a * xv + b * yv;
        }
        let fx = apply_bank_tensor(&x, &bank).unwrap();
        let fy = apply_bank_tensor(&y, &bank).unwrap();
        let fmix = apply_bank_tensor(&mix, &bank).unwrap();
        for ((&fm, &fxv), &fyv) in fmix.data().iter().zip(fx.data()).zip(fy.data()) {
            assert!((fm - (a * fxv + b * fyv)).abs() < 1e-12);
        }
    }
}
