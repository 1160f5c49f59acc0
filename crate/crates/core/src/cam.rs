//! Class activation maps and the activation box of each attribute.
//!
//! The CAM generator is a fixed 1x1 convolution whose kernel is the global
//! head's weight matrix, so `mean(CAM_i) == logit_i - bias_i` by linearity of
//! global average pooling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};
use crate::geometry::BBox;
use crate::tensor_autodiff::Tensor;

/// `CAM_i(y, x) = sum_ch w_fc[i, ch] * featmap[ch, y, x]` for every attribute.
pub fn class_activation_maps(featmap: &Tensor, w_fc: &Tensor) -> Result<Tensor> {
    featmap.expect_rank(3, "class_activation_maps")?;
    w_fc.expect_rank(2, "class_activation_maps")?;
    let (k, h, w) = (featmap.shape()[0], featmap.shape()[1], featmap.shape()[2]);
    let (a, kw) = (w_fc.shape()[0], w_fc.shape()[1]);
    if kw != k {
        return Err(LgError::shape(
            "class_activation_maps",
            format!("feature map has {k} channels, weights expect {kw}"),
        ));
    }
    let plane = h * w;
    let mut out = vec![0.0; a * plane];
    for i in 0..a {
        let dst = &mut out[i * plane..(i + 1) * plane];
        for ch in 0..k {
            let wv = w_fc.data()[i * k + ch];
            if wv == 0.0 {
                continue;
            }
            for (o, f) in dst.iter_mut().zip(featmap.channel(ch)) {
                *o += wv * f;
            }
        }
    }
    Tensor::new(vec![a, h, w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationBox {
    pub bbox: BBox,
    /// The map was constant or never positive; `bbox` is the whole image.
    pub degenerate: bool,
}

/// Bounding box of the largest 4-connected component of cells whose value is
/// strictly greater than `tau * max`. Component-size ties go to the component
/// holding the global maximum, then to the first found in row-major order.
/// Cells map to pixels by uniform scaling `(image_w / w, image_h / h)`.
pub fn activation_box(
    cam: &[f64],
    h: usize,
    w: usize,
    tau: f64,
    image_w: usize,
    image_h: usize,
) -> Result<ActivationBox> {
    if cam.len() != h * w || h == 0 || w == 0 {
        return Err(LgError::shape(
            "activation_box",
            format!("map of {} values is not {h}x{w}", cam.len()),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LgError::InvalidArgument(format!("tau {tau} outside (0, 1)")));
    }
    if cam.iter().any(|v| !v.is_finite()) {
        return Err(LgError::NonFinite { op: "activation_box" });
    }
    let full = ActivationBox {
        bbox: BBox::full_image(image_w, image_h),
        degenerate: true,
    };
    let (mut argmax, mut max, mut min) = (0usize, f64::NEG_INFINITY, f64::INFINITY);
    for (i, &v) in cam.iter().enumerate() {
        if v > max {
            max = v;
            argmax = i;
        }
        min = min.min(v);
    }
    if max == min || max <= 0.0 {
        return Ok(full);
    }
    let threshold = tau * max;
    let active: Vec<bool> = cam.iter().map(|&v| v > threshold).collect();

    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, bool, [usize; 4])> = None;
    let mut queue = VecDeque::new();
    let mut next_label = 0;
    for start in 0..h * w {
        if !active[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next_label;
        queue.push_back(start);
        let (mut size, mut has_max) = (0usize, false);
        let mut ext = [w, h, 0, 0]; // x0, y0, x1, y1 (inclusive)
        while let Some(cell) = queue.pop_front() {
            size += 1;
            has_max |= cell == argmax;
            let (y, x) = (cell / w, cell % w);
            ext = [ext[0].min(x), ext[1].min(y), ext[2].max(x), ext[3].max(y)];
            let neighbors = [
                (y > 0).then(|| cell - w),
                (y + 1 < h).then(|| cell + w),
                (x > 0).then(|| cell - 1),
                (x + 1 < w).then(|| cell + 1),
            ];
            for n in neighbors.into_iter().flatten() {
                if active[n] && label[n] == usize::MAX {
                    label[n] = next_label;
                    queue.push_back(n);
                }
            }
        }
        next_label += 1;
        let better = match best {
            None => true,
            Some((bs, bmax, _)) => size > bs || (size == bs && has_max && !bmax),
        };
        if better {
            best = Some((size, has_max, ext));
        }
    }
    let (_, _, [x0, y0, x1, y1]) = best.expect("the maximum cell is always active");
    let sx = image_w as f64 / w as f64;
    let sy = image_h as f64 / h as f64;
    Ok(ActivationBox {
        bbox: BBox::raw(
            x0 as f64 * sx,
            y0 as f64 * sy,
            (x1 + 1) as f64 * sx,
            (y1 + 1) as f64 * sy,
        ),
        degenerate: false,
    })
}

/// Activation box of every attribute map in `cams[a, h, w]`.
pub fn activation_boxes(
    cams: &Tensor,
    tau: f64,
    image_w: usize,
    image_h: usize,
) -> Result<Vec<ActivationBox>> {
    cams.expect_rank(3, "activation_boxes")?;
    let (a, h, w) = (cams.shape()[0], cams.shape()[1], cams.shape()[2]);
    (0..a)
        .map(|i| activation_box(cams.channel(i), h, w, tau, image_w, image_h))
        .collect()
}
