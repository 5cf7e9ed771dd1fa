//! The C_K-equivariant convolutional trunk shared by the encoder, the
//! group-action estimator and the boundary network.

use std::fmt;
use std::str::FromStr;

use super::layers::{FilterBasis, FilterRotation, LiftedConv};
use super::ops::{avg_pool2, avg_pool2_backward, col2im, gemm, im2col, relu_backward_inplace, relu_inplace};
use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};

/// One lifted stage: `channels` filters of size `kernel`, optionally followed
/// by 2×2 average pooling. Written as `16x5p` (16 channels, 5×5, pooled).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}{}", self.channels, self.kernel, if self.pool { "p" } else { "" })
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (body, pool) = match s.strip_suffix('p') {
            Some(b) => (b, true),
            None => (s, false),
        };
        let bad = || Error::Config(format!("bad stage `{s}`, expected e.g. 32x3 or 16x5p"));
        let (c, k) = body.split_once('x').ok_or_else(bad)?;
        let channels: usize = c.parse().map_err(|_| bad())?;
        let kernel: usize = k.parse().map_err(|_| bad())?;
        if channels == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("stage `{s}` needs channels > 0 and an odd kernel")));
        }
        Ok(Self { channels, kernel, pool })
    }
}

pub fn format_stages(stages: &[StageSpec]) -> String {
    stages.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_stages(s: &str) -> Result<Vec<StageSpec>> {
    let stages = s.split(',').map(str::parse).collect::<Result<Vec<StageSpec>>>()?;
    if stages.is_empty() {
        return Err(Error::Config("at least one stage is required".into()));
    }
    Ok(stages)
}

#[derive(Debug, Clone)]
struct Stage {
    conv: LiftedConv,
    pool: bool,
    /// Spatial size at the stage input (square).
    size: usize,
    rotation: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    pub group_order: usize,
    stages: Vec<Stage>,
    rotations: Vec<FilterRotation>,
    out_size: usize,
    rings: usize,
    /// Ring index of every output pixel, and the pixel count of every ring.
    ring_of: Vec<usize>,
    ring_sizes: Vec<f32>,
}

/// Assigns each pixel of an n×n map to one of `rings` concentric annuli of
/// equal width around the map centre; pixels beyond the inscribed circle fall
/// in the outermost ring. Distances are preserved by quarter turns about the
/// centre, so ring membership is too.
fn ring_layout(n: usize, rings: usize) -> (Vec<usize>, Vec<f32>) {
    // Integer arithmetic on doubled offsets keeps the layout exactly symmetric:
    // pixel (i, j) lies in ring b when (2d)²·R² < n²·(b + 1)².
    let offset = |x: usize| (2 * x) as i64 - n as i64 + 1;
    let mut sizes = vec![0.0f32; rings];
    let ring_of = (0..n * n)
        .map(|i| {
            let d2 = offset(i / n).pow(2) + offset(i % n).pow(2);
            let b = (0..rings)
                .find(|&b| d2 * ((rings * rings) as i64) < ((n * (b + 1)) as i64).pow(2))
                .unwrap_or(rings - 1);
            sizes[b] += 1.0;
            b
        })
        .collect();
    (ring_of, sizes)
}

impl Backbone {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        image_size: usize,
        group_order: usize,
        specs: &[StageSpec],
        basis: FilterBasis,
        seed: u64,
    ) -> Self {
        let mut rotations: Vec<FilterRotation> = Vec::new();
        let mut stages = Vec::with_capacity(specs.len());
        let mut c = in_ch;
        let mut size = image_size;
        for (i, spec) in specs.iter().enumerate() {
            let rotation = match rotations.iter().position(|r| r.kernel == spec.kernel) {
                Some(p) => p,
                None => {
                    rotations.push(FilterRotation::new(spec.kernel, group_order, basis));
                    rotations.len() - 1
                }
            };
            let conv = LiftedConv::new(params, &format!("{prefix}.stage{i}"), c, spec.channels, spec.kernel, i == 0, seed);
            stages.push(Stage {
                conv,
                pool: spec.pool,
                size,
                rotation,
            });
            c = spec.channels;
            if spec.pool {
                size /= 2;
            }
        }
        let (ring_of, ring_sizes) = ring_layout(size, 1);
        Self {
            group_order,
            stages,
            rotations,
            out_size: size,
            rings: 1,
            ring_of,
            ring_sizes,
        }
    }

    /// Pools each output plane over `rings` concentric annuli instead of the
    /// whole map. Rings that would be empty at the output size are dropped.
    pub fn with_rings(mut self, rings: usize) -> Self {
        let rings = rings.clamp(1, self.out_size.div_ceil(2).max(1));
        let (ring_of, ring_sizes) = ring_layout(self.out_size, rings);
        assert!(ring_sizes.iter().all(|&c| c > 0.0), "every ring holds at least one pixel");
        self.rings = rings;
        self.ring_of = ring_of;
        self.ring_sizes = ring_sizes;
        self
    }

    /// Length of the pooled descriptor of one group position.
    pub fn pooled_width(&self) -> usize {
        self.out_channels() * self.rings
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.conv.out_ch).unwrap_or(0)
    }

    pub fn prepare(&self, params: &ParamSet) -> PreparedBackbone {
        PreparedBackbone {
            filters: self
                .stages
                .iter()
                .map(|s| s.conv.rotate_filters(params, &self.rotations[s.rotation]))
                .collect(),
            biases: self.stages.iter().map(|s| params.get(s.conv.bias).to_vec()).collect(),
        }
    }

    pub fn new_acc(&self) -> BackboneAcc {
        BackboneAcc {
            filters: self
                .stages
                .iter()
                .map(|s| {
                    let len = s.conv.out_ch * s.conv.in_ch * s.conv.kernel * s.conv.kernel;
                    vec![vec![0.0; len]; self.group_order]
                })
                .collect(),
            biases: self.stages.iter().map(|s| vec![0.0; s.conv.out_ch]).collect(),
        }
    }

    /// Adds accumulated gradients into parameter-shaped buffers.
    pub fn finish_acc(&self, acc: &BackboneAcc, grads: &mut Grads) {
        for ((stage, filters), biases) in self.stages.iter().zip(&acc.filters).zip(&acc.biases) {
            stage
                .conv
                .accumulate_filter_grads(filters, &self.rotations[stage.rotation], grads);
            for (g, b) in grads.get_mut(stage.conv.bias).iter_mut().zip(biases) {
                *g += b;
            }
        }
    }

    /// Runs the trunk on one (C, H, W) input, returning features laid out as
    /// (K, C', h, w) together with what the backward pass needs.
    pub fn forward(&self, prep: &PreparedBackbone, x: &[f32]) -> (Vec<f32>, BackboneCache) {
        let k_ord = self.group_order;
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut activations = Vec::with_capacity(self.stages.len());
        let mut current = x.to_vec();
        for (si, stage) in self.stages.iter().enumerate() {
            let conv = &stage.conv;
            let hw = stage.size * stage.size;
            let ckk = conv.in_ch * conv.kernel * conv.kernel;
            let mut col = vec![0.0; ckk * hw];
            let mut act = vec![0.0; k_ord * conv.out_ch * hw];
            if conv.lifting {
                im2col(&current, conv.in_ch, stage.size, stage.size, conv.kernel, &mut col);
            }
            for r in 0..k_ord {
                if !conv.lifting {
                    let plane = conv.in_ch * hw;
                    im2col(&current[r * plane..(r + 1) * plane], conv.in_ch, stage.size, stage.size, conv.kernel, &mut col);
                }
                let out = &mut act[r * conv.out_ch * hw..(r + 1) * conv.out_ch * hw];
                for (o, &b) in prep.biases[si].iter().enumerate() {
                    out[o * hw..(o + 1) * hw].fill(b);
                }
                gemm(conv.out_ch, ckk, hw, &prep.filters[si][r], false, &col, false, 1.0, out);
            }
            relu_inplace(&mut act);
            let next = if stage.pool {
                avg_pool2(&act, k_ord * conv.out_ch, stage.size, stage.size)
            } else {
                act.clone()
            };
            inputs.push(std::mem::replace(&mut current, next));
            activations.push(act);
        }
        (current, BackboneCache { inputs, activations })
    }

    /// Backpropagates `dout` (shaped like the forward output) into `acc`.
    /// The image gradient is not needed and not computed.
    pub fn backward(&self, prep: &PreparedBackbone, cache: &BackboneCache, dout: Vec<f32>, acc: &mut BackboneAcc) {
        let k_ord = self.group_order;
        let mut grad = dout;
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let conv = &stage.conv;
            let hw = stage.size * stage.size;
            let ckk = conv.in_ch * conv.kernel * conv.kernel;
            let mut dact = if stage.pool {
                avg_pool2_backward(&grad, k_ord * conv.out_ch, stage.size, stage.size)
            } else {
                grad
            };
            relu_backward_inplace(&cache.activations[si], &mut dact);
            for (o, g) in acc.biases[si].iter_mut().enumerate() {
                for r in 0..k_ord {
                    let base = (r * conv.out_ch + o) * hw;
                    *g += dact[base..base + hw].iter().sum::<f32>();
                }
            }
            let input = &cache.inputs[si];
            let mut col = vec![0.0; ckk * hw];
            let mut dcol = vec![0.0; ckk * hw];
            let need_dx = !conv.lifting;
            let mut dx = if need_dx { vec![0.0; k_ord * conv.in_ch * hw] } else { Vec::new() };
            if conv.lifting {
                im2col(input, conv.in_ch, stage.size, stage.size, conv.kernel, &mut col);
            }
            for r in 0..k_ord {
                let plane = conv.in_ch * hw;
                if !conv.lifting {
                    im2col(&input[r * plane..(r + 1) * plane], conv.in_ch, stage.size, stage.size, conv.kernel, &mut col);
                }
                let dr = &dact[r * conv.out_ch * hw..(r + 1) * conv.out_ch * hw];
                gemm(conv.out_ch, hw, ckk, dr, false, &col, true, 1.0, &mut acc.filters[si][r]);
                if need_dx {
                    gemm(ckk, conv.out_ch, hw, &prep.filters[si][r], true, dr, false, 0.0, &mut dcol);
                    col2im(&dcol, conv.in_ch, stage.size, stage.size, conv.kernel, &mut dx[r * plane..(r + 1) * plane]);
                }
            }
            grad = dx;
        }
    }

    /// Ring means of each (group position, channel) plane: (K, C', rings).
    pub fn pool_spatial(&self, features: &[f32]) -> Vec<f32> {
        let hw = self.out_size * self.out_size;
        let mut out = Vec::with_capacity(features.len() / hw * self.rings);
        for plane in features.chunks_exact(hw) {
            let mut sums = vec![0.0f32; self.rings];
            for (v, &b) in plane.iter().zip(&self.ring_of) {
                sums[b] += v;
            }
            out.extend(sums.iter().zip(&self.ring_sizes).map(|(s, n)| s / n));
        }
        out
    }

    /// Adjoint of [`Self::pool_spatial`].
    pub fn pool_spatial_backward(&self, dpooled: &[f32]) -> Vec<f32> {
        let hw = self.out_size * self.out_size;
        let mut out = Vec::with_capacity(dpooled.len() / self.rings * hw);
        for d in dpooled.chunks_exact(self.rings) {
            out.extend(self.ring_of.iter().map(|&b| d[b] / self.ring_sizes[b]));
        }
        out
    }
}

/// Filter banks rotated to every group position, computed once per parameter update.
#[derive(Debug, Clone)]
pub(crate) struct PreparedBackbone {
    filters: Vec<Vec<Vec<f32>>>,
    biases: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BackboneCache {
    inputs: Vec<Vec<f32>>,
    activations: Vec<Vec<f32>>,
}

impl BackboneCache {
    pub fn empty() -> Self {
        Self {
            inputs: Vec::new(),
            activations: Vec::new(),
        }
    }
}

/// Gradients with respect to the rotated banks, summed over samples.
#[derive(Debug, Clone)]
pub(crate) struct BackboneAcc {
    filters: Vec<Vec<Vec<f32>>>,
    biases: Vec<Vec<f32>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::SO2Element;
    use crate::image::{rotate_image, Image, Interpolation};
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = crate::seed::rng_from_seed(seed);
        Image::from_fn(n, n, |_, _| rng.random::<f32>())
    }

    fn backbone(k: usize, stages: &str, size: usize, basis: FilterBasis) -> (Backbone, ParamSet) {
        let mut params = ParamSet::default();
        let b = Backbone::new(&mut params, "b", 1, size, k, &parse_stages(stages).unwrap(), basis, 3);
        (b, params)
    }

    fn turn(img: &Image, degrees: f64, interp: Interpolation) -> Image {
        rotate_image(img, SO2Element::from_degrees(degrees).unwrap(), interp).unwrap()
    }

    /// Relative L2 error between the features of a rotated input and the
    /// group-shifted, spatially rotated features of the original.
    fn shift_error(b: &Backbone, params: &ParamSet, img: &Image, steps: usize) -> f64 {
        let k = b.group_order;
        let n = b.out_size;
        let c = b.out_channels();
        let degrees = 360.0 * steps as f64 / k as f64;
        let prep = b.prepare(params);
        let (f, _) = b.forward(&prep, img.data());
        let (g, _) = b.forward(&prep, turn(img, degrees, Interpolation::Bilinear).data());
        let (mut num, mut den) = (0.0f64, 0.0f64);
        let margin = n / 6;
        for r in 0..k {
            let src = (r + k - steps % k) % k;
            for ch in 0..c {
                let plane = |v: &[f32], pos: usize| {
                    let o = (pos * c + ch) * n * n;
                    Image::new(n, n, 1, v[o..o + n * n].to_vec()).unwrap()
                };
                let expect = turn(&plane(&f, src), degrees, Interpolation::Bilinear);
                let got = plane(&g, r);
                // borders see zero padding and corner fill, which no rotation preserves
                for row in margin..n - margin {
                    for col in margin..n - margin {
                        let e = expect.get(0, row, col) as f64;
                        num += (got.get(0, row, col) as f64 - e).powi(2);
                        den += e * e;
                    }
                }
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn quarter_turn_equivariance_is_exact() {
        for basis in [FilterBasis::Nearest, FilterBasis::Gaussian] {
            let (b, params) = backbone(4, "4x3,5x3", 8, basis);
            let prep = b.prepare(&params);
            for seed in 0..3 {
                let img = random_image(8, seed);
                let (f, _) = b.forward(&prep, img.data());
                let (g, _) = b.forward(&prep, turn(&img, 90.0, Interpolation::Nearest).data());
                let c = b.out_channels();
                for r in 0..4 {
                    let src = (r + 3) % 4;
                    for ch in 0..c {
                        let plane = |v: &[f32], pos: usize| {
                            Image::new(8, 8, 1, v[(pos * c + ch) * 64..(pos * c + ch + 1) * 64].to_vec()).unwrap()
                        };
                        let expect = turn(&plane(&f, src), 90.0, Interpolation::Nearest);
                        for (a, e) in plane(&g, r).data().iter().zip(expect.data()) {
                            assert!((a - e).abs() <= 1e-5 * (1.0 + e.abs()), "{basis}: r {r} ch {ch}: {a} vs {e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn off_grid_lifting_equivariance_is_approximate() {
        let (b, params) = backbone(16, "8x5", 28, FilterBasis::Gaussian);
        for i in 0..4 {
            let img = turn(&crate::image::tests::smooth_image(28), i as f64 * 31.0, Interpolation::Bilinear);
            let err = shift_error(&b, &params, &img, 1);
            assert!(err <= 5e-2, "relative shift error {err}");
        }
        // pixel taps resampled bilinearly are far less faithful
        let (b, params) = backbone(16, "8x5", 28, FilterBasis::Bilinear);
        assert!(shift_error(&b, &params, &crate::image::tests::smooth_image(28), 1) > 0.1);
    }

    #[test]
    fn off_grid_equivariance_survives_depth() {
        let (b, params) = backbone(16, "8x5,8x3", 28, FilterBasis::Gaussian);
        for i in 0..2 {
            let img = turn(&crate::image::tests::smooth_image(28), i as f64 * 31.0, Interpolation::Bilinear);
            let err = shift_error(&b, &params, &img, 1);
            assert!(err <= 5e-2, "relative shift error {err}");
        }
    }

    #[test]
    fn zero_input_gives_group_constant_features() {
        let (b, mut params) = backbone(8, "3x3", 8, FilterBasis::Gaussian);
        params.data_mut(1).copy_from_slice(&[0.1, -0.2, 0.3]);
        let prep = b.prepare(&params);
        let (f, _) = b.forward(&prep, &[0.0; 64]);
        for (i, v) in f.iter().enumerate() {
            let ch = (i / 64) % 3;
            assert_eq!(*v, [0.1f32, 0.0, 0.3][ch]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (b, mut params) = backbone(4, "3x3p,2x3", 8, FilterBasis::Gaussian);
        // keep units away from the ReLU kink
        params.data_mut(1).copy_from_slice(&[0.3, 0.2, 0.25]);
        params.data_mut(3).copy_from_slice(&[0.4, 0.3]);
        let img = random_image(8, 9);
        let weights = |i: usize| ((i % 7) as f64 - 3.0) * 0.1;
        let loss = |p: &ParamSet| -> f64 {
            let prep = b.prepare(p);
            let (f, _) = b.forward(&prep, img.data());
            f.iter().enumerate().map(|(i, &v)| weights(i) * v as f64).sum()
        };
        let prep = b.prepare(&params);
        let (f, cache) = b.forward(&prep, img.data());
        let dout: Vec<f32> = (0..f.len()).map(|i| weights(i) as f32).collect();
        let mut acc = b.new_acc();
        b.backward(&prep, &cache, dout, &mut acc);
        let mut grads = Grads::zeros_like(&params);
        b.finish_acc(&acc, &mut grads);
        let mut worst = 0.0f64;
        for (pi, idx) in [(0usize, 1usize), (0, 4), (0, 13), (1, 2), (2, 7), (2, 40), (3, 1)] {
            let h = 1e-2f32;
            let mut p = params.clone();
            p.data_mut(pi)[idx] += h;
            let mut m = params.clone();
            m.data_mut(pi)[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h as f64);
            let an = grads.values[pi][idx] as f64;
            worst = worst.max((an - fd).abs() / (1e-2 + fd.abs()));
        }
        assert!(worst <= 2e-2, "worst relative gradient error {worst}");
    }

    #[test]
    fn stage_spec_parsing() {
        let s = parse_stages("16x5p, 32x3").unwrap();
        assert_eq!(
            s[0],
            StageSpec {
                channels: 16,
                kernel: 5,
                pool: true
            }
        );
        assert_eq!(format_stages(&s), "16x5p,32x3");
        assert!(parse_stages("16x4").is_err());
        assert!(parse_stages("abc").is_err());
    }
}
