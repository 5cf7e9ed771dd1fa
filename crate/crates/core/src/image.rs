//! Raster images and the rotation action on them.
//!
//! Rotation is counterclockwise for positive angles (as displayed, with rows
//! growing downward) about the pixel-grid center ((H-1)/2, (W-1)/2). Samples
//! falling outside the source grid read as 0.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::group::SO2Element;

/// A channel-major (C, H, W) image with `f32` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v as f64));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a single-channel image from `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Mean squared difference over all pixels and channels.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.shape(), other.shape(), "mse of differently shaped images");
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Mean absolute difference restricted to pixels within `radius` of the center.
    pub fn interior_mae(&self, other: &Image, radius: f64) -> f64 {
        assert_eq!(self.shape(), other.shape(), "mae of differently shaped images");
        let (cy, cx) = self.center();
        let mut total = 0.0;
        let mut count = 0usize;
        for ch in 0..self.channels {
            for r in 0..self.height {
                for c in 0..self.width {
                    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                    if dy.hypot(dx) <= radius {
                        total += (self.get(ch, r, c) as f64 - other.get(ch, r, c) as f64).abs();
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.height as f64 - 1.0) / 2.0,
            (self.width as f64 - 1.0) / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            other => Err(Error::UnknownInterpolation(other.to_string())),
        }
    }
}

/// Rotates `img` counterclockwise by `g`.
pub fn rotate_image(img: &Image, g: SO2Element, interpolation: Interpolation) -> Result<Image> {
    if img.is_empty() {
        return Err(Error::Empty("image"));
    }
    let sampler = RotationSampler::new(img.height, img.width, g.degrees());
    let plane = img.height * img.width;
    let mut out = vec![0.0f32; img.data.len()];
    for ch in 0..img.channels {
        let src = &img.data[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        match interpolation {
            Interpolation::Bilinear => sampler.bilinear(src, dst),
            Interpolation::Nearest => sampler.nearest(src, dst),
        }
    }
    Ok(Image {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: out,
    })
}

/// Elementwise [`rotate_image`].
pub fn rotate_batch(
    imgs: &[Image],
    angles: &[SO2Element],
    interpolation: Interpolation,
) -> Result<Vec<Image>> {
    if imgs.len() != angles.len() {
        return Err(Error::LengthMismatch {
            expected: imgs.len(),
            actual: angles.len(),
        });
    }
    imgs.iter()
        .zip(angles)
        .map(|(img, &g)| rotate_image(img, g, interpolation))
        .collect()
}

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Precomputed inverse mapping of output pixels to source coordinates for a
/// single-plane rotation. Shared by forward and backward passes.
pub(crate) struct RotationSampler {
    height: usize,
    width: usize,
    cos: f64,
    sin: f64,
}

/// Bilinear footprint of one output pixel.
#[derive(Clone, Copy)]
struct Footprint {
    r0: isize,
    c0: isize,
    fr: f64,
    fc: f64,
    /// Source offsets from the center in the y-up frame, kept for the angle derivative.
    sx: f64,
    sy: f64,
}

impl RotationSampler {
    pub(crate) fn new(height: usize, width: usize, degrees: f64) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        Self {
            height,
            width,
            cos: snap(cos),
            sin: snap(sin),
        }
    }

    fn source(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let x = col as f64 - cx;
        let y = cy - row as f64;
        // inverse rotation maps the output location back into the source
        let sx = x * self.cos + y * self.sin;
        let sy = -x * self.sin + y * self.cos;
        (snap(cy - sy), snap(cx + sx), sx, sy)
    }

    /// Source (row, col) read by output pixel (row, col).
    pub(crate) fn source_point(&self, row: usize, col: usize) -> (f64, f64) {
        let (sr, sc, _, _) = self.source(row, col);
        (sr, sc)
    }

    fn footprint(&self, row: usize, col: usize) -> Footprint {
        let (sr, sc, sx, sy) = self.source(row, col);
        let r0 = sr.floor();
        let c0 = sc.floor();
        Footprint {
            r0: r0 as isize,
            c0: c0 as isize,
            fr: sr - r0,
            fc: sc - c0,
            sx,
            sy,
        }
    }

    #[inline]
    fn at(&self, src: &[f32], r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            0.0
        } else {
            src[r as usize * self.width + c as usize] as f64
        }
    }

    pub(crate) fn nearest(&self, src: &[f32], dst: &mut [f32]) {
        for row in 0..self.height {
            for col in 0..self.width {
                let (sr, sc, _, _) = self.source(row, col);
                dst[row * self.width + col] =
                    self.at(src, sr.round() as isize, sc.round() as isize) as f32;
            }
        }
    }

    pub(crate) fn bilinear(&self, src: &[f32], dst: &mut [f32]) {
        for row in 0..self.height {
            for col in 0..self.width {
                let f = self.footprint(row, col);
                dst[row * self.width + col] = self.sample(src, &f) as f32;
            }
        }
    }

    #[inline]
    fn sample(&self, src: &[f32], f: &Footprint) -> f64 {
        let a = self.at(src, f.r0, f.c0);
        if f.fr == 0.0 && f.fc == 0.0 {
            return a;
        }
        let b = self.at(src, f.r0, f.c0 + 1);
        let c = self.at(src, f.r0 + 1, f.c0);
        let d = self.at(src, f.r0 + 1, f.c0 + 1);
        (1.0 - f.fr) * ((1.0 - f.fc) * a + f.fc * b) + f.fr * ((1.0 - f.fc) * c + f.fc * d)
    }

    /// Backward pass of [`Self::bilinear`]: accumulates the source gradient into
    /// `dsrc` and returns the derivative with respect to the angle in degrees.
    pub(crate) fn bilinear_backward(&self, src: &[f32], dout: &[f32], dsrc: &mut [f32]) -> f64 {
        let mut dangle = 0.0;
        let h = self.height as isize;
        let w = self.width as isize;
        let mut scatter = |r: isize, c: isize, v: f64| {
            if r >= 0 && c >= 0 && r < h && c < w {
                dsrc[r as usize * self.width + c as usize] += v as f32;
            }
        };
        for row in 0..self.height {
            for col in 0..self.width {
                let g = dout[row * self.width + col] as f64;
                if g == 0.0 {
                    continue;
                }
                let f = self.footprint(row, col);
                let a = self.at(src, f.r0, f.c0);
                let b = self.at(src, f.r0, f.c0 + 1);
                let c = self.at(src, f.r0 + 1, f.c0);
                let d = self.at(src, f.r0 + 1, f.c0 + 1);
                scatter(f.r0, f.c0, g * (1.0 - f.fr) * (1.0 - f.fc));
                scatter(f.r0, f.c0 + 1, g * (1.0 - f.fr) * f.fc);
                scatter(f.r0 + 1, f.c0, g * f.fr * (1.0 - f.fc));
                scatter(f.r0 + 1, f.c0 + 1, g * f.fr * f.fc);
                let dv_dcol = (1.0 - f.fr) * (b - a) + f.fr * (d - c);
                let dv_drow = (1.0 - f.fc) * (c - a) + f.fc * (d - b);
                // d(col)/dα = sy, d(row)/dα = sx, per radian
                dangle += g * (dv_dcol * f.sy + dv_drow * f.sx);
            }
        }
        dangle * PI / 180.0
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::group::SO2Element;

    pub(crate) fn smooth_image(n: usize) -> Image {
        let c = (n as f64 - 1.0) / 2.0;
        Image::from_fn(n, n, |r, col| {
            let (y, x) = ((r as f64 - c) / n as f64, (col as f64 - c) / n as f64);
            let blob = |cy: f64, cx: f64, s: f64| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp();
            (0.8 * blob(0.12, -0.05, 0.09) + 0.6 * blob(-0.1, 0.14, 0.07) + 0.4 * blob(0.0, 0.0, 0.15)) as f32
        })
    }

    fn random_image(n: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = crate::seed::rng_from_seed(seed);
        Image::from_fn(n, n, |_, _| rng.random::<f32>())
    }

    fn deg(a: f64) -> SO2Element {
        SO2Element::from_degrees(a).unwrap()
    }

    #[test]
    fn identity_rotation_is_exact() {
        let img = random_image(9, 1);
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            assert_eq!(rotate_image(&img, SO2Element::IDENTITY, interp).unwrap(), img);
        }
    }

    #[test]
    fn constant_image_interior_is_preserved() {
        let img = Image::filled(21, 21, 1, 0.37);
        for a in [13.0, 45.0, 101.0, -77.0] {
            let out = rotate_image(&img, deg(a), Interpolation::Bilinear).unwrap();
            for r in 0..21 {
                for c in 0..21 {
                    if ((r as f64 - 10.0).powi(2) + (c as f64 - 10.0).powi(2)).sqrt() <= 9.0 {
                        assert!((out.get(0, r, c) - 0.37).abs() < 1e-6);
                    }
                }
            }
        }
    }

    /// Index-permutation oracle for quarter turns: out[r][c] = in[c][n-1-r].
    fn rot90_oracle(img: &Image) -> Image {
        let n = img.height();
        Image::from_fn(n, n, |r, c| img.get(0, c, n - 1 - r))
    }

    #[test]
    fn quarter_turns_match_permutation_oracle() {
        for n in [6, 7, 8] {
            let img = random_image(n, n as u64);
            let mut expect = img.clone();
            for k in 1..4 {
                expect = rot90_oracle(&expect);
                for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
                    let got = rotate_image(&img, deg(90.0 * k as f64), interp).unwrap();
                    assert_eq!(got, expect, "n={n} k={k} {interp:?}");
                    assert!((got.sum() - img.sum()).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn round_trip_interior_error() {
        let n = 32;
        let img = smooth_image(n);
        for a in [15.0, 47.0, 90.0, 133.0] {
            let g = deg(a);
            let there = rotate_image(&img, g, Interpolation::Bilinear).unwrap();
            let back = rotate_image(&there, g.inverse(), Interpolation::Bilinear).unwrap();
            let mae = back.interior_mae(&img, 0.7 * n as f64 / 2.0);
            assert!(mae <= 0.02, "angle {a}: mae {mae}");
        }
    }

    fn mse_loss_and_grad(img: &Image, target: &Image, angle: f64) -> (f64, f64, Vec<f32>) {
        let sampler = RotationSampler::new(img.height(), img.width(), angle);
        let mut out = vec![0.0; img.data().len()];
        sampler.bilinear(img.data(), &mut out);
        let n = out.len() as f64;
        let loss = out
            .iter()
            .zip(target.data())
            .map(|(&o, &t)| (o as f64 - t as f64).powi(2))
            .sum::<f64>()
            / n;
        let dout: Vec<f32> = out
            .iter()
            .zip(target.data())
            .map(|(&o, &t)| (2.0 * (o as f64 - t as f64) / n) as f32)
            .collect();
        let mut dsrc = vec![0.0; img.data().len()];
        let dangle = sampler.bilinear_backward(img.data(), &dout, &mut dsrc);
        (loss, dangle, dsrc)
    }

    #[test]
    fn angle_gradient_matches_finite_differences() {
        let img = smooth_image(24);
        let target = rotate_image(&img, deg(20.0), Interpolation::Bilinear).unwrap();
        for alpha in [3.0, 11.0, 31.5, 47.0] {
            let (_, analytic, _) = mse_loss_and_grad(&img, &target, alpha);
            let h = 0.1;
            let (lp, _, _) = mse_loss_and_grad(&img, &target, alpha + h);
            let (lm, _, _) = mse_loss_and_grad(&img, &target, alpha - h);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 0.05, "alpha {alpha}: analytic {analytic} fd {fd}");
        }
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let img = smooth_image(10);
        let target = random_image(10, 3);
        let alpha = 27.0;
        let (_, _, dsrc) = mse_loss_and_grad(&img, &target, alpha);
        for idx in [11, 34, 45, 56, 78] {
            let h = 1e-2f32;
            let mut p = img.clone();
            p.data_mut()[idx] += h;
            let mut m = img.clone();
            m.data_mut()[idx] -= h;
            let fd = (mse_loss_and_grad(&p, &target, alpha).0 - mse_loss_and_grad(&m, &target, alpha).0)
                / (2.0 * h as f64);
            assert!((dsrc[idx] as f64 - fd).abs() < 1e-4 + 0.01 * fd.abs(), "idx {idx}");
        }
    }

    #[test]
    fn batch_rotation() {
        assert!(rotate_batch(&[], &[], Interpolation::Bilinear).unwrap().is_empty());
        let img = random_image(5, 4);
        let single = rotate_batch(std::slice::from_ref(&img), &[deg(30.0)], Interpolation::Bilinear).unwrap();
        assert_eq!(single[0], rotate_image(&img, deg(30.0), Interpolation::Bilinear).unwrap());
        let imgs = vec![img.clone(), random_image(5, 5)];
        let same = rotate_batch(&imgs, &[SO2Element::IDENTITY; 2], Interpolation::Bilinear).unwrap();
        assert_eq!(same, imgs);
        assert!(matches!(
            rotate_batch(&imgs, &[SO2Element::IDENTITY], Interpolation::Nearest),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn interpolation_parsing() {
        assert_eq!("nearest".parse::<Interpolation>().unwrap(), Interpolation::Nearest);
        assert!(matches!("bicubic".parse::<Interpolation>(), Err(Error::UnknownInterpolation(_))));
    }

    #[test]
    fn empty_image_rejected() {
        assert!(rotate_image(&Image::zeros(0, 0, 1), SO2Element::IDENTITY, Interpolation::Bilinear).is_err());
    }
}
