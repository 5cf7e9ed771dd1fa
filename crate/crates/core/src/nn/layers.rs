//! Building blocks with explicit forward/backward passes.

use super::ops::{col2im, gemm, im2col};
use super::params::{Grads, Init, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::image::RotationSampler;

/// How a filter bank is turned to the off-identity group positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterBasis {
    /// Taps are pixels; rotation uses nearest-neighbour resampling.
    Nearest,
    /// Taps are pixels; rotation uses bilinear resampling.
    Bilinear,
    /// Taps are coefficients of Gaussian bumps centred on the pixel grid
    /// inside the kernel's inscribed disk. The bumps rotate exactly and stay
    /// inside the support, so rotated filters remain faithful at any angle.
    #[default]
    Gaussian,
}

/// Width of the Gaussian bumps, in pixels.
const BUMP_SIGMA: f64 = 0.5;

impl FilterBasis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
            Self::Gaussian => "gaussian",
        }
    }
}

impl std::fmt::Display for FilterBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FilterBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!(
                "unknown filter basis `{other}` (expected nearest, bilinear or gaussian)"
            ))),
        }
    }
}

/// Matrices mapping a k×k parameter bank to the filters used at each of the
/// K group positions.
///
/// `matrices[r]` is row-major (k², k²): entry (t, s) is the weight of
/// parameter `s` in filter tap `t`, using the same convention as image
/// rotation.
#[derive(Debug, Clone)]
pub(crate) struct FilterRotation {
    pub kernel: usize,
    pub matrices: Vec<Vec<f32>>,
}

impl FilterRotation {
    pub fn new(kernel: usize, group_order: usize, basis: FilterBasis) -> Self {
        let kk = kernel * kernel;
        let matrices = (0..group_order)
            .map(|r| {
                let degrees = 360.0 * r as f64 / group_order as f64;
                let sampler = RotationSampler::new(kernel, kernel, degrees);
                let mut m = vec![0.0f32; kk * kk];
                if basis == FilterBasis::Gaussian {
                    let centre = (kernel as f64 - 1.0) / 2.0;
                    for t in 0..kk {
                        let (sr, sc) = sampler.source_point(t / kernel, t % kernel);
                        for s in 0..kk {
                            // bumps outside the inscribed disk would rotate out of the support
                            let rs = ((s / kernel) as f64 - centre).hypot((s % kernel) as f64 - centre);
                            if rs > centre + 1e-9 {
                                continue;
                            }
                            let d2 = (sr - (s / kernel) as f64).powi(2) + (sc - (s % kernel) as f64).powi(2);
                            m[t * kk + s] = (-d2 / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp() as f32;
                        }
                    }
                    return m;
                }
                let mut unit = vec![0.0f32; kk];
                let mut rotated = vec![0.0f32; kk];
                for s in 0..kk {
                    unit.fill(0.0);
                    unit[s] = 1.0;
                    if basis == FilterBasis::Bilinear {
                        sampler.bilinear(&unit, &mut rotated);
                    } else {
                        sampler.nearest(&unit, &mut rotated);
                    }
                    for t in 0..kk {
                        m[t * kk + s] = rotated[t];
                    }
                }
                m
            })
            .collect();
        Self { kernel, matrices }
    }
}

/// Convolution whose filter bank is applied at every group position after
/// rotation by that position's angle.
///
/// A lifting layer reads a plain (C, H, W) input and produces (K, C', H, W);
/// a group layer reads (K, C, H, W), convolving position r with the filters
/// rotated to r.
#[derive(Debug, Clone)]
pub(crate) struct LiftedConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub lifting: bool,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LiftedConv {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        lifting: bool,
        seed: u64,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            Init::He(in_ch * kernel * kernel),
            seed,
        );
        let bias = params.add(format!("{name}.bias"), vec![out_ch], Init::Zeros, seed);
        Self {
            in_ch,
            out_ch,
            kernel,
            lifting,
            weight,
            bias,
        }
    }

    /// The filter bank rotated to every group position: K × (out, in·k²).
    pub fn rotate_filters(&self, params: &ParamSet, rot: &FilterRotation) -> Vec<Vec<f32>> {
        let kk = self.kernel * self.kernel;
        let rows = self.out_ch * self.in_ch;
        let w = params.get(self.weight);
        rot.matrices
            .iter()
            .map(|m| {
                let mut out = vec![0.0; rows * kk];
                gemm(rows, kk, kk, w, false, m, true, 0.0, &mut out);
                out
            })
            .collect()
    }

    /// Folds gradients of the rotated banks back onto the base filters.
    pub fn accumulate_filter_grads(&self, rotated: &[Vec<f32>], rot: &FilterRotation, grads: &mut Grads) {
        let kk = self.kernel * self.kernel;
        let rows = self.out_ch * self.in_ch;
        let dw = grads.get_mut(self.weight);
        for (g, m) in rotated.iter().zip(&rot.matrices) {
            gemm(rows, kk, kk, g, false, m, false, 1.0, dw);
        }
    }
}

/// Ordinary stride-1 "same" convolution.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(params: &mut ParamSet, name: &str, in_ch: usize, out_ch: usize, kernel: usize, seed: u64) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            Init::He(in_ch * kernel * kernel),
            seed,
        );
        let bias = params.add(format!("{name}.bias"), vec![out_ch], Init::Zeros, seed);
        Self {
            in_ch,
            out_ch,
            kernel,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let hw = h * w;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut col = vec![0.0; ckk * hw];
        im2col(x, self.in_ch, h, w, self.kernel, &mut col);
        let mut out = vec![0.0; self.out_ch * hw];
        for (o, &b) in params.get(self.bias).iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(b);
        }
        gemm(self.out_ch, ckk, hw, params.get(self.weight), false, &col, false, 1.0, &mut out);
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, params: &ParamSet, x: &[f32], h: usize, w: usize, dout: &[f32], grads: &mut Grads) -> Vec<f32> {
        let hw = h * w;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut col = vec![0.0; ckk * hw];
        im2col(x, self.in_ch, h, w, self.kernel, &mut col);
        let db = grads.get_mut(self.bias);
        for (o, g) in db.iter_mut().enumerate() {
            *g += dout[o * hw..(o + 1) * hw].iter().sum::<f32>();
        }
        gemm(self.out_ch, hw, ckk, dout, false, &col, true, 1.0, grads.get_mut(self.weight));
        let mut dcol = vec![0.0; ckk * hw];
        gemm(ckk, self.out_ch, hw, params.get(self.weight), true, dout, false, 0.0, &mut dcol);
        let mut dx = vec![0.0; self.in_ch * hw];
        col2im(&dcol, self.in_ch, h, w, self.kernel, &mut dx);
        dx
    }
}

/// Fully connected layer, weight (out, in).
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, inp: usize, out: usize, seed: u64) -> Self {
        Self::with_bias(params, name, inp, out, Init::Zeros, seed)
    }

    pub fn with_bias(params: &mut ParamSet, name: &str, inp: usize, out: usize, bias: Init, seed: u64) -> Self {
        let weight = params.add(format!("{name}.weight"), vec![out, inp], Init::He(inp), seed);
        let bias = params.add(format!("{name}.bias"), vec![out], bias, seed);
        Self { inp, out, weight, bias }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f32]) -> Vec<f32> {
        let mut y = params.get(self.bias).to_vec();
        gemm(self.out, self.inp, 1, params.get(self.weight), false, x, false, 1.0, &mut y);
        y
    }

    pub fn backward(&self, params: &ParamSet, x: &[f32], dy: &[f32], grads: &mut Grads) -> Vec<f32> {
        for (g, d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        gemm(self.out, 1, self.inp, dy, false, x, false, 1.0, grads.get_mut(self.weight));
        let mut dx = vec![0.0; self.inp];
        gemm(self.inp, self.out, 1, params.get(self.weight), true, dy, false, 0.0, &mut dx);
        dx
    }
}
