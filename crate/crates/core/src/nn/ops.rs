//! Dense kernels shared by the layers: GEMM, im2col, pooling and activations.
//! Tensors are plain row-major `f32` slices; shapes travel alongside.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(x)` is `x` or its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major (or transposed) views of those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a (C, H, W) map into columns of shape (C·k·k, H·W) for a
/// stride-1 convolution with zero "same" padding (odd `k`).
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a (C, H, W) gradient.
pub(crate) fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + ddx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling over each (H, W) plane of `planes` stacked planes.
pub(crate) fn avg_pool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                dst[y * wo + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dout: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let g = 0.25 * src[y * wo + xo];
                let i = 2 * y * w + 2 * xo;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling of stacked planes.
pub(crate) fn upsample2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                dst[y * wo + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                dst[(y / 2) * w + xo / 2] += src[y * wo + xo];
            }
        }
    }
    dx
}

pub(crate) fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward activation was clamped.
pub(crate) fn relu_backward_inplace(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T (3x2) * a (2x3)
        let mut c = [0.0; 9];
        gemm(3, 2, 3, &a, true, &a, false, 0.0, &mut c);
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        // a (2x3) * a^T (3x2), accumulated
        let mut c = [1.0; 4];
        gemm(2, 3, 2, &a, false, &a, true, 1.0, &mut c);
        assert_eq!(c, [15.0, 33.0, 33.0, 78.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..c * k * k * h * w).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(&a, &b)| a as f64 * b as f64).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn pooling_adjoints() {
        let (p, h, w) = (2, 4, 6);
        let x: Vec<f32> = (0..p * h * w).map(|i| i as f32).collect();
        let pooled = avg_pool2(&x, p, h, w);
        assert_eq!(pooled[0], (0.0 + 1.0 + 6.0 + 7.0) / 4.0);
        let g: Vec<f32> = (0..pooled.len()).map(|i| (i as f32).sin()).collect();
        let lhs: f32 = pooled.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f32 = avg_pool2_backward(&g, p, h, w).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3);

        let up = upsample2(&pooled, p, h / 2, w / 2);
        let g: Vec<f32> = (0..up.len()).map(|i| (i as f32).cos()).collect();
        let lhs: f32 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f32 = upsample2_backward(&g, p, h / 2, w / 2)
            .iter()
            .zip(&pooled)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}
