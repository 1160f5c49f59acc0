//! Forward and backward kernels for the spatial primitives.

use crate::error::{LgError, Result};
use crate::geometry::BBox;

use super::tensor::{ConvSpec, Tensor};

/// Output positions `o` in `0..n_out` whose input index `o*stride + offset` lies in `0..n_in`.
fn valid_range(offset: isize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = n_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub(crate) struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGeometry> {
    spec.validate()?;
    input.expect_rank(3, "conv2d")?;
    kernels.expect_rank(4, "conv2d")?;
    bias.expect_rank(1, "conv2d")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernels.shape();
    if ks != [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w] {
        return Err(LgError::shape(
            "conv2d",
            format!("kernel shape {:?} does not match {:?}", ks, spec),
        ));
    }
    if c != spec.in_channels {
        return Err(LgError::shape(
            "conv2d",
            format!("input has {} channels, spec expects {}", c, spec.in_channels),
        ));
    }
    if bias.len() != spec.out_channels {
        return Err(LgError::shape(
            "conv2d",
            format!("bias has {} entries, expected {}", bias.len(), spec.out_channels),
        ));
    }
    let (oh, ow) = spec.output_hw(h, w).ok_or_else(|| {
        LgError::shape(
            "conv2d",
            format!("non-positive output extent for {}x{} input with {:?}", h, w, spec),
        )
    })?;
    Ok(ConvGeometry {
        c,
        h,
        w,
        k: spec.out_channels,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        oh,
        ow,
    })
}

/// Direct-loop convolution, kept as an oracle for the im2col kernels.
#[cfg(test)]
pub(crate) fn conv2d_forward_direct(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, spec)?;
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding as isize);
    let x = input.data();
    let wts = kernels.data();
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.k * plane_out];
    for k in 0..g.k {
        let out_plane = &mut out[k * plane_out..(k + 1) * plane_out];
        out_plane.fill(bias.data()[k]);
        for c in 0..g.c {
            let in_plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let oy_off = (ky * d) as isize - p;
                let (oy_lo, oy_hi) = valid_range(oy_off, s, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = wts[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox_off = (kx * d) as isize - p;
                    let (ox_lo, ox_hi) = valid_range(ox_off, s, g.w, g.ow);
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s) as isize + oy_off;
                        let row_in = &in_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let row_out = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * s) as isize + ox_off) as usize;
                            row_out[ox] += wv * row_in[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.k, g.oh, g.ow], out)
}

#[cfg(test)]
pub(crate) fn conv2d_backward_direct(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
    want: [bool; 3],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let g = conv_geometry(input, kernels, bias, spec)?;
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding as isize);
    let x = input.data();
    let wts = kernels.data();
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut gx = want[0].then(|| vec![0.0; x.len()]);
    let mut gw = want[1].then(|| vec![0.0; wts.len()]);
    let gb = want[2].then(|| {
        (0..g.k)
            .map(|k| grad_out[k * plane_out..(k + 1) * plane_out].iter().sum())
            .collect::<Vec<f64>>()
    });
    if gx.is_none() && gw.is_none() {
        return Ok((None, None, gb));
    }
    for k in 0..g.k {
        let go = &grad_out[k * plane_out..(k + 1) * plane_out];
        for c in 0..g.c {
            let in_off = c * plane_in;
            for ky in 0..g.kh {
                let oy_off = (ky * d) as isize - p;
                let (oy_lo, oy_hi) = valid_range(oy_off, s, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                    let wv = wts[widx];
                    let ox_off = (kx * d) as isize - p;
                    let (ox_lo, ox_hi) = valid_range(ox_off, s, g.w, g.ow);
                    let mut acc_w = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * s) as isize + oy_off) as usize;
                        let row_go = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row_start = in_off + iy * g.w;
                        if let Some(gx) = gx.as_mut() {
                            let row_gx = &mut gx[row_start..row_start + g.w];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + ox_off) as usize;
                                row_gx[ix] += wv * row_go[ox];
                            }
                        }
                        if gw.is_some() {
                            let row_in = &x[row_start..row_start + g.w];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + ox_off) as usize;
                                acc_w += row_go[ox] * row_in[ix];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc_w;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Receptive-field rows: `patches[o, (c, ky, kx)]`, zero where the tap falls in padding.
fn im2col(x: &[f64], g: &ConvGeometry, spec: &ConvSpec) -> Vec<f64> {
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding as isize);
    let cols = g.c * g.kh * g.kw;
    let mut patches = vec![0.0; g.oh * g.ow * cols];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oy_off = (ky * d) as isize - p;
            let (oy_lo, oy_hi) = valid_range(oy_off, s, g.h, g.oh);
            for kx in 0..g.kw {
                let col = (c * g.kh + ky) * g.kw + kx;
                let ox_off = (kx * d) as isize - p;
                let (ox_lo, ox_hi) = valid_range(ox_off, s, g.w, g.ow);
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let row_in = &plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        let ix = ((ox * s) as isize + ox_off) as usize;
                        patches[(oy * g.ow + ox) * cols + col] = row_in[ix];
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(gpatches: &[f64], g: &ConvGeometry, spec: &ConvSpec) -> Vec<f64> {
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding as isize);
    let cols = g.c * g.kh * g.kw;
    let mut gx = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oy_off = (ky * d) as isize - p;
            let (oy_lo, oy_hi) = valid_range(oy_off, s, g.h, g.oh);
            for kx in 0..g.kw {
                let col = (c * g.kh + ky) * g.kw + kx;
                let ox_off = (kx * d) as isize - p;
                let (ox_lo, ox_hi) = valid_range(ox_off, s, g.w, g.ow);
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    for ox in ox_lo..ox_hi {
                        let ix = ((ox * s) as isize + ox_off) as usize;
                        plane[iy * g.w + ix] += gpatches[(oy * g.ow + ox) * cols + col];
                    }
                }
            }
        }
    }
    gx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, spec)?;
    let patches = im2col(input.data(), &g, spec);
    let cols = g.c * g.kh * g.kw;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.k * plane_out];
    for k in 0..g.k {
        let wk = &kernels.data()[k * cols..(k + 1) * cols];
        let b = bias.data()[k];
        for (o, v) in out[k * plane_out..(k + 1) * plane_out].iter_mut().enumerate() {
            *v = b + dot(wk, &patches[o * cols..(o + 1) * cols]);
        }
    }
    Tensor::new(vec![g.k, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to input, kernels and bias.
///
/// Any of the three outputs may be skipped by passing `false` in `want`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
    want: [bool; 3],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let g = conv_geometry(input, kernels, bias, spec)?;
    let plane_out = g.oh * g.ow;
    let cols = g.c * g.kh * g.kw;
    let gb = want[2].then(|| {
        (0..g.k)
            .map(|k| grad_out[k * plane_out..(k + 1) * plane_out].iter().sum())
            .collect::<Vec<f64>>()
    });
    if !want[0] && !want[1] {
        return Ok((None, None, gb));
    }
    let wts = kernels.data();
    let gw = want[1].then(|| {
        let patches = im2col(input.data(), &g, spec);
        let mut gw = vec![0.0; wts.len()];
        for k in 0..g.k {
            let gwk = &mut gw[k * cols..(k + 1) * cols];
            for o in 0..plane_out {
                let go = grad_out[k * plane_out + o];
                if go == 0.0 {
                    continue;
                }
                for (a, x) in gwk.iter_mut().zip(&patches[o * cols..(o + 1) * cols]) {
                    *a += go * x;
                }
            }
        }
        gw
    });
    let gx = want[0].then(|| {
        let mut gp = vec![0.0; plane_out * cols];
        for k in 0..g.k {
            let wk = &wts[k * cols..(k + 1) * cols];
            for o in 0..plane_out {
                let go = grad_out[k * plane_out + o];
                if go == 0.0 {
                    continue;
                }
                for (a, w) in gp[o * cols..(o + 1) * cols].iter_mut().zip(wk) {
                    *a += go * w;
                }
            }
        }
        col2im(&gp, &g, spec)
    });
    Ok((gx, gw, gb))
}

/// Half-open cell ranges of every pooling bin along one axis.
pub(crate) fn bin_ranges(start: usize, len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|b| {
            let lo = start + (b * len) / bins;
            let hi = start + ((b + 1) * len).div_ceil(bins);
            (lo, hi.max(lo + 1))
        })
        .collect()
}

/// Scale `[lo, hi]` by `scale`, round to the nearest cell edge and clamp to `0..=n`.
/// Empty spans are repaired to a single cell.
pub(crate) fn quantize_span(lo: f64, hi: f64, scale: f64, n: usize) -> (usize, usize) {
    let q = |v: f64| ((v * scale).round().max(0.0) as usize).min(n);
    let (mut a, mut b) = (q(lo), q(hi));
    if b <= a {
        a = a.min(n - 1);
        b = a + 1;
    }
    (a, b)
}

pub(crate) struct RoiGrid {
    pub ys: Vec<(usize, usize)>,
    pub xs: Vec<(usize, usize)>,
}

pub(crate) fn roi_grid(
    bbox: &BBox,
    fh: usize,
    fw: usize,
    out_h: usize,
    out_w: usize,
    image_w: usize,
    image_h: usize,
) -> RoiGrid {
    let (x0, x1) = quantize_span(bbox.x_min, bbox.x_max, fw as f64 / image_w as f64, fw);
    let (y0, y1) = quantize_span(bbox.y_min, bbox.y_max, fh as f64 / image_h as f64, fh);
    RoiGrid {
        ys: bin_ranges(y0, y1 - y0, out_h),
        xs: bin_ranges(x0, x1 - x0, out_w),
    }
}

/// Quantized ROI max pooling. Returns the pooled tensor and, for every output
/// entry, the flat input index that produced it (first maximum in row-major order).
pub(crate) fn roi_max_pool_forward(
    input: &Tensor,
    bbox: &BBox,
    out_h: usize,
    out_w: usize,
    image_w: usize,
    image_h: usize,
) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank(3, "roi_max_pool")?;
    if out_h == 0 || out_w == 0 || image_w == 0 || image_h == 0 {
        return Err(LgError::shape(
            "roi_max_pool",
            "output grid and image extents must be positive",
        ));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h == 0 || w == 0 {
        return Err(LgError::shape("roi_max_pool", "empty feature map"));
    }
    let grid = roi_grid(bbox, h, w, out_h, out_w, image_w, image_h);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut argmax = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for &(ylo, yhi) in &grid.ys {
            for &(xlo, xhi) in &grid.xs {
                let mut best = base + ylo * w + xlo;
                for y in ylo..yhi {
                    for xx in xlo..xhi {
                        let idx = base + y * w + xx;
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
    Ok((Tensor::new(vec![c, out_h, out_w], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_kernels_match_direct_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let spec = ConvSpec {
                in_channels: rng.gen_range(1..4),
                out_channels: rng.gen_range(1..4),
                kernel_h: rng.gen_range(1..4),
                kernel_w: rng.gen_range(1..4),
                stride: rng.gen_range(1..3),
                dilation: rng.gen_range(1..3),
                padding: rng.gen_range(0..3),
            };
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            if spec.output_hw(h, w).is_none() {
                continue;
            }
            let mut rand_t = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let x = rand_t(&[spec.in_channels, h, w]);
            let k = rand_t(&[spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w]);
            let b = rand_t(&[spec.out_channels]);
            let fast = conv2d_forward(&x, &k, &b, &spec).unwrap();
            let slow = conv2d_forward_direct(&x, &k, &b, &spec).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (p, q) in fast.data().iter().zip(slow.data()) {
                assert!((p - q).abs() < 1e-12);
            }
            let go = rand_t(fast.shape());
            let f = conv2d_backward(&x, &k, &b, &spec, go.data(), [true; 3]).unwrap();
            let s = conv2d_backward_direct(&x, &k, &b, &spec, go.data(), [true; 3]).unwrap();
            for (p, q) in [(f.0, s.0), (f.1, s.1), (f.2, s.2)] {
                for (a, c) in p.unwrap().iter().zip(&q.unwrap()) {
                    assert!((a - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for n_in in 1..9 {
                for n_out in 1..9 {
                    for offset in -5..5isize {
                        let (lo, hi) = valid_range(offset, stride, n_in, n_out);
                        let expect: Vec<usize> = (0..n_out)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < n_in as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "s={stride} in={n_in} out={n_out} off={offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn bins_cover_region_and_are_non_empty() {
        for len in 1..10 {
            for bins in 1..6 {
                let r = bin_ranges(2, len, bins);
                assert_eq!(r.first().unwrap().0, 2);
                assert_eq!(r.last().unwrap().1, 2 + len);
                assert!(r.iter().all(|&(a, b)| b > a));
            }
        }
    }

    #[test]
    fn empty_span_is_repaired() {
        assert_eq!(quantize_span(3.2, 3.3, 1.0, 8), (3, 4));
        assert_eq!(quantize_span(7.9, 8.0, 1.0, 8), (7, 8));
        assert_eq!(quantize_span(0.0, 64.0, 0.125, 8), (0, 8));
    }
}
