//! Forward and backward loops for the spatial primitives, NCHW layout.
//!
//! All spatial ops use "same" padding: `pad = dilation * (k - 1) / 2` with odd
//! kernels, so the output extent is `input / stride` for extents divisible by
//! the stride.

use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn out_width(&self) -> usize {
        self.width / self.stride
    }
}

/// Output positions `o` in `0..out_len` for which `o * stride + offset` lands
/// inside `0..in_len`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Accumulates `out[oy, ox] += w * x[oy*s + dy, ox*s + dx]` over one plane.
#[inline]
#[allow(clippy::too_many_arguments)]
fn plane_axpy(
    out: &mut [Float],
    x: &[Float],
    wv: Float,
    c: &Conv,
    ky: usize,
    kx: usize,
    ho: usize,
    wo: usize,
) {
    let pad = c.pad() as isize;
    let dy = (ky * c.dilation) as isize - pad;
    let dx = (kx * c.dilation) as isize - pad;
    let (y0, y1) = valid_range(dy, c.stride, c.height, ho);
    let (x0, x1) = valid_range(dx, c.stride, c.width, wo);
    if x0 == x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = (oy * c.stride) as isize + dy;
        let row = iy as usize * c.width;
        let orow = &mut out[oy * wo..(oy + 1) * wo];
        if c.stride == 1 {
            let start = (row as isize + x0 as isize + dx) as usize;
            let src = &x[start..start + (x1 - x0)];
            for (o, &v) in orow[x0..x1].iter_mut().zip(src) {
                *o += wv * v;
            }
        } else {
            for ox in x0..x1 {
                let ix = ((ox * c.stride) as isize + dx) as usize;
                orow[ox] += wv * x[row + ix];
            }
        }
    }
}

/// Adjoint of [`plane_axpy`] with respect to `x`: `dx[...] += w * dout[oy, ox]`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn plane_axpy_transposed(
    dx_plane: &mut [Float],
    dout: &[Float],
    wv: Float,
    c: &Conv,
    ky: usize,
    kx: usize,
    ho: usize,
    wo: usize,
) {
    let pad = c.pad() as isize;
    let dy = (ky * c.dilation) as isize - pad;
    let dxo = (kx * c.dilation) as isize - pad;
    let (y0, y1) = valid_range(dy, c.stride, c.height, ho);
    let (x0, x1) = valid_range(dxo, c.stride, c.width, wo);
    if x0 == x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = (oy * c.stride) as isize + dy;
        let row = iy as usize * c.width;
        let grow = &dout[oy * wo..(oy + 1) * wo];
        if c.stride == 1 {
            let start = (row as isize + x0 as isize + dxo) as usize;
            let dst = &mut dx_plane[start..start + (x1 - x0)];
            for (d, &g) in dst.iter_mut().zip(&grow[x0..x1]) {
                *d += wv * g;
            }
        } else {
            for ox in x0..x1 {
                let ix = ((ox * c.stride) as isize + dxo) as usize;
                dx_plane[row + ix] += wv * grow[ox];
            }
        }
    }
}

/// Correlation `sum_{oy,ox} dout[oy, ox] * x[oy*s + dy, ox*s + dx]`.
#[inline]
fn plane_dot(x: &[Float], dout: &[Float], c: &Conv, ky: usize, kx: usize, ho: usize, wo: usize) -> Float {
    let pad = c.pad() as isize;
    let dy = (ky * c.dilation) as isize - pad;
    let dx = (kx * c.dilation) as isize - pad;
    let (y0, y1) = valid_range(dy, c.stride, c.height, ho);
    let (x0, x1) = valid_range(dx, c.stride, c.width, wo);
    let mut acc = 0.0;
    if x0 == x1 {
        return acc;
    }
    for oy in y0..y1 {
        let iy = (oy * c.stride) as isize + dy;
        let row = iy as usize * c.width;
        let grow = &dout[oy * wo..(oy + 1) * wo];
        if c.stride == 1 {
            let start = (row as isize + x0 as isize + dx) as usize;
            let src = &x[start..start + (x1 - x0)];
            for (&g, &v) in grow[x0..x1].iter().zip(src) {
                acc += g * v;
            }
        } else {
            for ox in x0..x1 {
                let ix = ((ox * c.stride) as isize + dx) as usize;
                acc += grow[ox] * x[row + ix];
            }
        }
    }
    acc
}

pub fn conv2d_forward(x: &[Float], w: &[Float], c: &Conv) -> Vec<Float> {
    let (ho, wo) = (c.out_height(), c.out_width());
    let (hw, ohw, kk) = (c.height * c.width, ho * wo, c.kernel * c.kernel);
    let mut out = vec![0.0; c.batch * c.out_channels * ohw];
    for n in 0..c.batch {
        for co in 0..c.out_channels {
            let oplane = &mut out[(n * c.out_channels + co) * ohw..][..ohw];
            for ci in 0..c.in_channels {
                let xplane = &x[(n * c.in_channels + ci) * hw..][..hw];
                let wbase = (co * c.in_channels + ci) * kk;
                for ky in 0..c.kernel {
                    for kx in 0..c.kernel {
                        let wv = w[wbase + ky * c.kernel + kx];
                        if wv != 0.0 {
                            plane_axpy(oplane, xplane, wv, c, ky, kx, ho, wo);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped when not needed.
pub fn conv2d_backward(
    x: &[Float],
    w: &[Float],
    dout: &[Float],
    c: &Conv,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<Float>>, Option<Vec<Float>>) {
    let (ho, wo) = (c.out_height(), c.out_width());
    let (hw, ohw, kk) = (c.height * c.width, ho * wo, c.kernel * c.kernel);
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    for n in 0..c.batch {
        for co in 0..c.out_channels {
            let gplane = &dout[(n * c.out_channels + co) * ohw..][..ohw];
            for ci in 0..c.in_channels {
                let xoff = (n * c.in_channels + ci) * hw;
                let wbase = (co * c.in_channels + ci) * kk;
                for ky in 0..c.kernel {
                    for kx in 0..c.kernel {
                        let widx = wbase + ky * c.kernel + kx;
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += plane_dot(&x[xoff..xoff + hw], gplane, c, ky, kx, ho, wo);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = w[widx];
                            if wv != 0.0 {
                                plane_axpy_transposed(&mut dx[xoff..xoff + hw], gplane, wv, c, ky, kx, ho, wo);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Depthwise convolution: `in_channels == out_channels`, weight `[C, 1, k, k]`.
pub fn depthwise_forward(x: &[Float], w: &[Float], c: &Conv) -> Vec<Float> {
    let (ho, wo) = (c.out_height(), c.out_width());
    let (hw, ohw, kk) = (c.height * c.width, ho * wo, c.kernel * c.kernel);
    let mut out = vec![0.0; c.batch * c.out_channels * ohw];
    for n in 0..c.batch {
        for ch in 0..c.out_channels {
            let plane = n * c.out_channels + ch;
            let oplane = &mut out[plane * ohw..][..ohw];
            let xplane = &x[plane * hw..][..hw];
            for ky in 0..c.kernel {
                for kx in 0..c.kernel {
                    let wv = w[ch * kk + ky * c.kernel + kx];
                    if wv != 0.0 {
                        plane_axpy(oplane, xplane, wv, c, ky, kx, ho, wo);
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &[Float],
    w: &[Float],
    dout: &[Float],
    c: &Conv,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<Float>>, Option<Vec<Float>>) {
    let (ho, wo) = (c.out_height(), c.out_width());
    let (hw, ohw, kk) = (c.height * c.width, ho * wo, c.kernel * c.kernel);
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    for n in 0..c.batch {
        for ch in 0..c.out_channels {
            let plane = n * c.out_channels + ch;
            let gplane = &dout[plane * ohw..][..ohw];
            for ky in 0..c.kernel {
                for kx in 0..c.kernel {
                    let widx = ch * kk + ky * c.kernel + kx;
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += plane_dot(&x[plane * hw..][..hw], gplane, c, ky, kx, ho, wo);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w[widx];
                        if wv != 0.0 {
                            plane_axpy_transposed(&mut dx[plane * hw..][..hw], gplane, wv, c, ky, kx, ho, wo);
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// 3x3 pooling window geometry: same padding (1), padded taps excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Pool {
    fn out_dims(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    /// Inclusive-exclusive input window for output coordinate `o`.
    #[inline]
    fn window(o: usize, stride: usize, len: usize) -> (usize, usize) {
        let centre = o * stride;
        (centre.saturating_sub(1), (centre + 2).min(len))
    }
}

/// Max pooling; returns the output and the flat input index of each maximum.
pub fn max_pool_forward(x: &[Float], p: &Pool) -> (Vec<Float>, Vec<usize>) {
    let (ho, wo) = p.out_dims();
    let hw = p.height * p.width;
    let mut out = Vec::with_capacity(p.planes * ho * wo);
    let mut argmax = Vec::with_capacity(p.planes * ho * wo);
    for plane in 0..p.planes {
        let base = plane * hw;
        for oy in 0..ho {
            let (y0, y1) = Pool::window(oy, p.stride, p.height);
            for ox in 0..wo {
                let (x0, x1) = Pool::window(ox, p.stride, p.width);
                let mut best = base + y0 * p.width + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * p.width + ix;
                        // first maximum wins, so ties resolve deterministically
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(dout: &[Float], argmax: &[usize], input_len: usize) -> Vec<Float> {
    let mut dx = vec![0.0; input_len];
    for (&g, &idx) in dout.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

/// Average pooling over the in-bounds taps of each window.
pub fn avg_pool_forward(x: &[Float], p: &Pool) -> Vec<Float> {
    let (ho, wo) = p.out_dims();
    let hw = p.height * p.width;
    let mut out = Vec::with_capacity(p.planes * ho * wo);
    for plane in 0..p.planes {
        let base = plane * hw;
        for oy in 0..ho {
            let (y0, y1) = Pool::window(oy, p.stride, p.height);
            for ox in 0..wo {
                let (x0, x1) = Pool::window(ox, p.stride, p.width);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[base + iy * p.width + ix];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as Float);
            }
        }
    }
    out
}

pub fn avg_pool_backward(dout: &[Float], p: &Pool) -> Vec<Float> {
    let (ho, wo) = p.out_dims();
    let hw = p.height * p.width;
    let mut dx = vec![0.0; p.planes * hw];
    for plane in 0..p.planes {
        let base = plane * hw;
        for oy in 0..ho {
            let (y0, y1) = Pool::window(oy, p.stride, p.height);
            for ox in 0..wo {
                let (x0, x1) = Pool::window(ox, p.stride, p.width);
                let share = dout[(plane * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as Float;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[base + iy * p.width + ix] += share;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments(x: &[Float], batch: usize, channels: usize, plane: usize) -> (Vec<Float>, Vec<Float>) {
    let count = (batch * plane) as Float;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for (ch, m) in mean.iter_mut().enumerate() {
        let mut acc = 0.0;
        for n in 0..batch {
            acc += x[(n * channels + ch) * plane..][..plane].iter().sum::<Float>();
        }
        *m = acc / count;
    }
    for (ch, v) in var.iter_mut().enumerate() {
        let mut acc = 0.0;
        for n in 0..batch {
            for &val in &x[(n * channels + ch) * plane..][..plane] {
                let d = val - mean[ch];
                acc += d * d;
            }
        }
        *v = acc / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of same-padded convolution used as an oracle.
    fn conv_reference(x: &[Float], w: &[Float], c: &Conv) -> Vec<Float> {
        let (ho, wo) = (c.out_height(), c.out_width());
        let pad = c.pad() as isize;
        let mut out = vec![0.0; c.batch * c.out_channels * ho * wo];
        for n in 0..c.batch {
            for co in 0..c.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c.in_channels {
                            for ky in 0..c.kernel {
                                for kx in 0..c.kernel {
                                    let iy = (oy * c.stride + ky * c.dilation) as isize - pad;
                                    let ix = (ox * c.stride + kx * c.dilation) as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= c.height as isize || ix >= c.width as isize {
                                        continue;
                                    }
                                    let xv = x[((n * c.in_channels + ci) * c.height + iy as usize) * c.width
                                        + ix as usize];
                                    let wv = w[((co * c.in_channels + ci) * c.kernel + ky) * c.kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * c.out_channels + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: Float) -> Vec<Float> {
        (0..len).map(|i| ((i * 7919 % 23) as Float - 11.0) * scale).collect()
    }

    #[test]
    fn kernel_wider_than_plane() {
        let c = Conv { batch: 1, in_channels: 1, out_channels: 1, height: 2, width: 2, kernel: 5, stride: 1, dilation: 2 };
        let x = ramp(4, 0.1);
        let w = ramp(25, 0.05);
        let fast = conv2d_forward(&x, &w, &c);
        let slow = conv_reference(&x, &w, &c);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        let (dx, dw) = conv2d_backward(&x, &w, &[1.0; 4], &c, true, true);
        assert!(dx.unwrap().iter().chain(&dw.unwrap()).all(|v| v.is_finite()));
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(kernel, stride, dilation) in &[(1, 1, 1), (3, 1, 1), (3, 2, 1), (5, 1, 2), (3, 2, 2), (1, 2, 1)] {
            let c = Conv {
                batch: 2,
                in_channels: 3,
                out_channels: 2,
                height: 6,
                width: 8,
                kernel,
                stride,
                dilation,
            };
            let x = ramp(2 * 3 * 6 * 8, 0.1);
            let w = ramp(2 * 3 * kernel * kernel, 0.05);
            let fast = conv2d_forward(&x, &w, &c);
            let slow = conv_reference(&x, &w, &c);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k{kernel} s{stride} d{dilation}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn valid_range_clips_to_input() {
        assert_eq!(valid_range(-1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(1, 1, 4, 4), (0, 3));
        assert_eq!(valid_range(-2, 2, 8, 4), (1, 4));
        assert_eq!(valid_range(2, 2, 8, 4), (0, 3));
        assert_eq!(valid_range(9, 1, 4, 4), (0, 0));
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let p = Pool { planes: 2, height: 4, width: 4, stride: 1 };
        let out = avg_pool_forward(&[3.5; 32], &p);
        assert!(out.iter().all(|&v| (v - 3.5).abs() < 1e-15));
        let p2 = Pool { stride: 2, ..p };
        assert_eq!(avg_pool_forward(&[3.5; 32], &p2).len(), 8);
    }
}
