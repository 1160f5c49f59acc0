//! Class-agnostic region proposals ("EdgeBoxes-lite").
//!
//! Sliding-window candidates over a geometric scale pyramid are scored by how
//! much Sobel edge mass hugs their border relative to the edge mass crossing
//! their interior, then reduced by greedy NMS and truncated to a fixed count.
//! Externally computed proposals can be dropped in through the text format
//! handled by [`write_proposals`] / [`read_proposals`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};
use crate::geometry::BBox;
use crate::guidance::iou;
use crate::tensor_autodiff::Tensor;

/// File extension of per-image proposal files.
pub const PROPOSAL_EXT: &str = "proposals";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub min_side: f64,
    pub scale_ratio: f64,
    pub aspect_ratios: Vec<f64>,
    /// Window step as a fraction of the window side.
    pub stride_fraction: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            min_side: 16.0,
            scale_ratio: 1.5,
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub candidates: CandidateConfig,
    pub band_width: usize,
    pub interior_penalty: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            candidates: CandidateConfig::default(),
            band_width: 2,
            interior_penalty: 0.5,
            nms_threshold: 0.7,
            top_k: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Generated,
    Loaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub source: ProposalSource,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Sobel gradient magnitude of the channel-mean grayscale image; border pixels are 0.
pub fn edge_map(image: &Tensor) -> Result<Tensor> {
    image.expect_rank(3, "edge_map")?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h < 3 || w < 3 || c == 0 {
        return Err(LgError::shape("edge_map", format!("image {}x{} is below 3x3", h, w)));
    }
    let mut gray = vec![0.0; h * w];
    for ch in 0..c {
        for (g, v) in gray.iter_mut().zip(image.channel(ch)) {
            *g += v / c as f64;
        }
    }
    let px = |y: usize, x: usize| gray[y * w + x];
    let mut out = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Summed-area table with a zero top row and left column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], h: usize, w: usize) -> Self {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w: w + 1, sums }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = |x: usize, y: usize| self.sums[y * self.w + x];
        s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0)
    }
}

fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let q = |v: f64| (v.round().max(0.0) as usize).min(n);
    (q(lo), q(hi))
}

/// Border-band score of each candidate with `band = 2`, `lambda = 0.5`.
pub fn score_windows(edges: &Tensor, candidates: &[BBox]) -> Result<Vec<BBox>> {
    score_windows_with(edges, candidates, 2, 0.5)
}

/// `band_mass / perimeter - lambda * interior_mass / interior_area`, where
/// the band is the `band`-pixel inner border of the box. Boxes under
/// `2 * band + 1` pixels on a side score 0.
pub fn score_windows_with(
    edges: &Tensor,
    candidates: &[BBox],
    band: usize,
    lambda: f64,
) -> Result<Vec<BBox>> {
    edges.expect_rank(2, "score_windows")?;
    let (h, w) = (edges.shape()[0], edges.shape()[1]);
    let integral = Integral::new(edges.data(), h, w);
    let min_side = 2 * band + 1;
    Ok(candidates
        .iter()
        .map(|b| {
            let (x0, x1) = pixel_span(b.x_min, b.x_max, w);
            let (y0, y1) = pixel_span(b.y_min, b.y_max, h);
            let (bw, bh) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
            if bw < min_side || bh < min_side {
                return b.with_score(0.0);
            }
            let total = integral.rect(x0, y0, x1, y1);
            let inner = integral.rect(x0 + band, y0 + band, x1 - band, y1 - band);
            let inner_area = ((bw - 2 * band) * (bh - 2 * band)) as f64;
            let perimeter = (2 * (bw + bh)) as f64;
            b.with_score((total - inner) / perimeter - lambda * inner / inner_area)
        })
        .collect())
}

/// Deterministic sliding-window pyramid, deduplicated, in generation order.
/// The full-image box is always the first candidate.
pub fn generate_candidates(width: usize, height: usize, config: &CandidateConfig) -> Vec<BBox> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |x: usize, y: usize, bw: usize, bh: usize, out: &mut Vec<BBox>| {
        if seen.insert((x, y, bw, bh)) {
            out.push(BBox::raw(
                x as f64,
                y as f64,
                (x + bw) as f64,
                (y + bh) as f64,
            ));
        }
    };
    if width == 0 || height == 0 {
        return out;
    }
    push(0, 0, width, height, &mut out);
    let limit = width.min(height) as f64;
    let mut side = config.min_side;
    while side <= limit && config.scale_ratio > 1.0 {
        for &ar in &config.aspect_ratios {
            let bw = (side * ar.sqrt()).round() as usize;
            let bh = (side / ar.sqrt()).round() as usize;
            if bw == 0 || bh == 0 || bw > width || bh > height {
                continue;
            }
            let sx = ((config.stride_fraction * bw as f64).round() as usize).max(1);
            let sy = ((config.stride_fraction * bh as f64).round() as usize).max(1);
            let mut y = 0;
            while y + bh <= height {
                let mut x = 0;
                while x + bw <= width {
                    push(x, y, bw, bh, &mut out);
                    x += sx;
                }
                y += sy;
            }
        }
        side *= config.scale_ratio;
    }
    out
}

/// Indices sorted by score descending, ties broken by lower index.
fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score_or_zero()
            .total_cmp(&boxes[a].score_or_zero())
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS: keep the best remaining box, drop every box with IoU above
/// `iou_threshold` against it, repeat. Output is in keep order.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let order = score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(boxes[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// The `k` highest-scoring boxes. Short lists are padded with the full-image
/// box so every image has exactly `k` proposals; pads score 0, or the lowest
/// kept score when that is negative, so scores stay non-increasing.
pub fn top_k(boxes: &[BBox], k: usize, image_w: usize, image_h: usize) -> ProposalSet {
    let order = score_order(boxes);
    let mut out: Vec<BBox> = order.iter().take(k).map(|&i| boxes[i]).collect();
    let pad_score = out.last().map_or(0.0, |b| b.score_or_zero().min(0.0));
    while out.len() < k {
        out.push(BBox::full_image(image_w, image_h).with_score(pad_score));
    }
    ProposalSet {
        boxes: out,
        source: ProposalSource::Generated,
    }
}

/// Full pipeline for one image: edges, candidates, scores, NMS, top-k.
pub fn propose(image: &Tensor, config: &ProposalConfig) -> Result<ProposalSet> {
    if config.top_k == 0 {
        return Err(LgError::Config("top_k must be >= 1".into()));
    }
    if !(config.nms_threshold > 0.0 && config.nms_threshold < 1.0) {
        return Err(LgError::Config(format!(
            "nms threshold {} outside (0, 1)",
            config.nms_threshold
        )));
    }
    let edges = edge_map(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let candidates = generate_candidates(w, h, &config.candidates);
    let scored = score_windows_with(&edges, &candidates, config.band_width, config.interior_penalty)?;
    let kept = nms(&scored, config.nms_threshold);
    Ok(top_k(&kept, config.top_k, w, h))
}

/// One `x_min y_min x_max y_max score` line per box, six decimals.
pub fn format_proposals(set: &ProposalSet) -> String {
    let mut s = String::new();
    for b in &set.boxes {
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max,
            b.score_or_zero()
        );
    }
    s
}

pub fn parse_proposals(text: &str, origin: &Path) -> Result<ProposalSet> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LgError::corrupt(origin, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 5 {
            return Err(LgError::corrupt(
                origin,
                format!("line {}: expected 5 fields, got {}", n + 1, vals.len()),
            ));
        }
        let b = BBox::new(vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| LgError::corrupt(origin, format!("line {}: {e}", n + 1)))?;
        boxes.push(b.with_score(vals[4]));
    }
    Ok(ProposalSet {
        boxes,
        source: ProposalSource::Loaded,
    })
}

pub fn write_proposals(path: &Path, set: &ProposalSet) -> Result<()> {
    std::fs::write(path, format_proposals(set)).map_err(|e| LgError::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    let text = std::fs::read_to_string(path).map_err(|e| LgError::io(path, e))?;
    parse_proposals(&text, path)
}
