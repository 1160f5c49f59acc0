//! Procedural attribute dataset with known object locations.
//!
//! Each attribute is a colored shape. Positive attributes are rendered once
//! per image at a location drawn from the attribute's placement region, on a
//! noisy gray background with distractor shapes in non-attribute colors.
//!
//! On disk:
//!
//! ```text
//! spec.json
//! {split}/labels.csv          image_id,<attr names...>
//! {split}/images/{id}.ppm     binary P6, 8-bit
//! {split}/gt_boxes/{id}.txt   attr_id x_min y_min x_max y_max
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};
use crate::geometry::BBox;
use crate::tensor_autodiff::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Per-channel tolerance around an attribute color that counts as "in band".
pub const COLOR_BAND: f64 = 0.15;

const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Bar,
    Cross,
    Ring,
    Diamond,
}

impl ShapeKind {
    const ALL: [ShapeKind; 7] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Bar,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
    ];

    /// Bounding extent `(w, h)` of a shape of nominal size `s`.
    fn extent(self, s: usize) -> (usize, usize) {
        match self {
            ShapeKind::Bar => (s, (s / 3).max(2)),
            _ => (s, s),
        }
    }

    /// Whether pixel offset `(dx, dy)` within a `w x h` extent is covered.
    fn covers(self, dx: usize, dy: usize, w: usize, h: usize) -> bool {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (px, py) = (dx as f64 + 0.5 - cx, dy as f64 + 0.5 - cy);
        let r = cx.min(cy);
        match self {
            ShapeKind::Square | ShapeKind::Bar => true,
            ShapeKind::Disk => px * px + py * py <= r * r,
            ShapeKind::Ring => {
                let d2 = px * px + py * py;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Triangle => {
                // apex at top center, base along the bottom edge
                let frac = (dy as f64 + 0.5) / h as f64;
                px.abs() <= frac * cx
            }
            ShapeKind::Cross => {
                let arm = (w.min(h) as f64 / 6.0).max(1.0);
                px.abs() <= arm || py.abs() <= arm
            }
            ShapeKind::Diamond => px.abs() / cx + py.abs() / cy <= 1.0,
        }
    }
}

/// Where an object's bounding box may be placed; region bounds are in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Placement {
    Free,
    Region {
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
    },
}

impl Placement {
    pub fn is_free(&self) -> bool {
        matches!(self, Placement::Free)
    }

    fn bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        match *self {
            Placement::Free => (0, 0, width, height),
            Placement::Region {
                x_min,
                y_min,
                x_max,
                y_max,
            } => (x_min, y_min, x_max, y_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTemplate {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub size_min: usize,
    pub size_max: usize,
    pub placement: Placement,
    pub positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub attributes: Vec<AttributeTemplate>,
    pub clutter_colors: Vec<[f64; 3]>,
    /// Distractor shapes per image are drawn uniformly from `0..=clutter_max`.
    pub clutter_max: usize,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::with_attributes(8)
    }
}

impl SynthSpec {
    /// The default 64x64 spec restricted to its first `n` attributes (`n <= 8`).
    /// Attributes alternate between a fixed band of the image and free placement.
    pub fn with_attributes(n: usize) -> Self {
        let (w, h) = (64, 64);
        let band = 28;
        let top = Placement::Region { x_min: 0, y_min: 0, x_max: w, y_max: band };
        let bottom = Placement::Region { x_min: 0, y_min: h - band, x_max: w, y_max: h };
        let left = Placement::Region { x_min: 0, y_min: 0, x_max: band, y_max: h };
        let right = Placement::Region { x_min: w - band, y_min: 0, x_max: w, y_max: h };
        let table: [(&str, ShapeKind, [f64; 3], Placement); 8] = [
            ("red_square_top", ShapeKind::Square, [0.9, 0.1, 0.1], top),
            ("magenta_cross_free", ShapeKind::Cross, [0.9, 0.1, 0.9], Placement::Free),
            ("green_disk_bottom", ShapeKind::Disk, [0.1, 0.8, 0.1], bottom),
            ("cyan_ring_free", ShapeKind::Ring, [0.1, 0.9, 0.9], Placement::Free),
            ("blue_triangle_left", ShapeKind::Triangle, [0.1, 0.2, 0.9], left),
            ("orange_diamond_free", ShapeKind::Diamond, [1.0, 0.55, 0.0], Placement::Free),
            ("yellow_bar_right", ShapeKind::Bar, [0.9, 0.9, 0.1], right),
            ("white_square_free", ShapeKind::Square, [0.95, 0.95, 0.95], Placement::Free),
        ];
        let attributes = table
            .iter()
            .take(n)
            .map(|&(name, shape, color, placement)| AttributeTemplate {
                name: name.to_string(),
                shape,
                color,
                size_min: 16,
                size_max: 22,
                placement,
                positive_rate: 0.3,
            })
            .collect();
        SynthSpec {
            width: w,
            height: h,
            background: 0.15,
            attributes,
            clutter_colors: vec![[0.5, 0.5, 0.5], [0.45, 0.28, 0.1], [0.1, 0.35, 0.35], [0.35, 0.1, 0.45]],
            clutter_max: 3,
            noise_std: 0.03,
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LgError::Config(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("image {}x{} below 8x8", self.width, self.height));
        }
        if self.attributes.is_empty() {
            return bad("no attributes".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(0.0..=1.0).contains(&self.background) || !self.clutter_colors.iter().all(in_unit) {
            return bad("colors must lie in [0, 1]".into());
        }
        if self.clutter_max > 0 && self.clutter_colors.is_empty() {
            return bad("clutter requested without clutter colors".into());
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate attribute name {}", a.name));
            }
            if a.name.is_empty() || a.name.contains([',', '\n', '"']) {
                return bad(format!("attribute name {:?} is not CSV-safe", a.name));
            }
            if !(a.positive_rate > 0.0 && a.positive_rate < 1.0) {
                return bad(format!("{}: positive rate {} outside (0, 1)", a.name, a.positive_rate));
            }
            if !in_unit(&a.color) {
                return bad(format!("{}: color outside [0, 1]", a.name));
            }
            if a.size_min < 3 || a.size_min > a.size_max {
                return bad(format!("{}: size range {}..={}", a.name, a.size_min, a.size_max));
            }
            let (x0, y0, x1, y1) = a.placement.bounds(self.width, self.height);
            if x1 > self.width || y1 > self.height || x0 >= x1 || y0 >= y1 {
                return bad(format!("{}: placement region outside the image", a.name));
            }
            let (ew, eh) = a.shape.extent(a.size_max);
            if ew > x1 - x0 || eh > y1 - y0 {
                return bad(format!(
                    "{}: object up to {ew}x{eh} cannot fit region {}x{}",
                    a.name,
                    x1 - x0,
                    y1 - y0
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<u8>,
    /// `(attribute id, box)` for each positive attribute that has a known location.
    pub gt_boxes: Vec<(usize, BBox)>,
}

impl Sample {
    pub fn gt_box(&self, attribute: usize) -> Option<&BBox> {
        self.gt_boxes.iter().find(|(a, _)| *a == attribute).map(|(_, b)| b)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub name: String,
    pub attribute_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn split_index(split: &str) -> u64 {
    SPLITS.iter().position(|s| *s == split).map_or(SPLITS.len() as u64, |i| i as u64)
}

/// Independent stream per (split, index) so samples do not depend on each other.
fn sample_rng(seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_index(split) << 40) | index as u64);
    rng
}

pub fn sample_id(split: &str, index: usize) -> String {
    format!("{split}_{index:05}")
}

fn overlaps(a: &(usize, usize, usize, usize), b: &(usize, usize, usize, usize)) -> bool {
    // one pixel of margin so shapes never touch
    a.0 < b.2 + 1 && b.0 < a.2 + 1 && a.1 < b.3 + 1 && b.1 < a.3 + 1
}

fn place<R: Rng>(
    rng: &mut R,
    extent: (usize, usize),
    bounds: (usize, usize, usize, usize),
    taken: &[(usize, usize, usize, usize)],
) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = extent;
    let (x0, y0, x1, y1) = bounds;
    for _ in 0..PLACEMENT_TRIES {
        let x = rng.gen_range(x0..=x1 - w);
        let y = rng.gen_range(y0..=y1 - h);
        let cand = (x, y, x + w, y + h);
        if !taken.iter().any(|t| overlaps(t, &cand)) {
            return Some(cand);
        }
    }
    None
}

fn paint(img: &mut [f64], width: usize, height: usize, shape: ShapeKind, rect: (usize, usize, usize, usize), color: [f64; 3]) {
    let (x0, y0, x1, y1) = rect;
    let plane = width * height;
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.covers(x - x0, y - y0, x1 - x0, y1 - y0) {
                for (c, v) in color.iter().enumerate() {
                    img[c * plane + y * width + x] = *v;
                }
            }
        }
    }
}

/// Quantizes like the on-disk format so in-memory and loaded samples agree.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic in `(spec, seed, split, index)`.
pub fn generate_sample(spec: &SynthSpec, seed: u64, split: &str, index: usize) -> Sample {
    let mut rng = sample_rng(seed, split, index);
    let (w, h) = (spec.width, spec.height);
    let mut img = vec![spec.background; 3 * w * h];
    let mut taken = Vec::new();
    let mut labels = vec![0u8; spec.num_attributes()];
    let mut gt_boxes = Vec::new();

    let wants: Vec<bool> = spec.attributes.iter().map(|a| rng.gen_bool(a.positive_rate)).collect();
    for (i, a) in spec.attributes.iter().enumerate() {
        if !wants[i] {
            continue;
        }
        let size = rng.gen_range(a.size_min..=a.size_max);
        let extent = a.shape.extent(size);
        // a crowded image drops the attribute rather than overlapping objects
        if let Some(rect) = place(&mut rng, extent, a.placement.bounds(w, h), &taken) {
            paint(&mut img, w, h, a.shape, rect, a.color);
            taken.push(rect);
            labels[i] = 1;
            gt_boxes.push((
                i,
                BBox::raw(rect.0 as f64, rect.1 as f64, rect.2 as f64, rect.3 as f64),
            ));
        }
    }
    if !spec.clutter_colors.is_empty() {
        let n_clutter = rng.gen_range(0..=spec.clutter_max);
        for _ in 0..n_clutter {
            let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            let color = spec.clutter_colors[rng.gen_range(0..spec.clutter_colors.len())];
            let size = rng.gen_range(6..=14).min(w.min(h));
            if let Some(rect) = place(&mut rng, shape.extent(size), (0, 0, w, h), &taken) {
                paint(&mut img, w, h, shape, rect, color);
                taken.push(rect);
            }
        }
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in img.iter_mut() {
        *v = quantize(*v);
    }
    Sample {
        id: sample_id(split, index),
        image: Tensor::new(vec![3, h, w], img).expect("sized above"),
        labels,
        gt_boxes,
    }
}

pub fn generate_split(spec: &SynthSpec, seed: u64, split: &str, n: usize) -> Split {
    Split {
        name: split.to_string(),
        attribute_names: spec.attribute_names(),
        samples: (0..n).map(|i| generate_sample(spec, seed, split, i)).collect(),
    }
}

/// Writes `spec.json` and the three splits under `root`.
pub fn generate_dataset(spec: &SynthSpec, seed: u64, counts: [usize; 3], root: &Path) -> Result<()> {
    spec.validate()?;
    if counts.iter().any(|&n| n == 0) {
        return Err(LgError::Config(format!("split sizes must be >= 1, got {counts:?}")));
    }
    fs::create_dir_all(root).map_err(|e| LgError::io(root, e))?;
    let spec_path = root.join("spec.json");
    let meta = DatasetMeta {
        seed,
        counts,
        spec: spec.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    fs::write(&spec_path, json).map_err(|e| LgError::io(&spec_path, e))?;
    for (split, &n) in SPLITS.iter().zip(&counts) {
        write_split(&generate_split(spec, seed, split, n), &root.join(split))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub counts: [usize; 3],
    pub spec: SynthSpec,
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("spec.json");
    let text = fs::read_to_string(&path).map_err(|e| LgError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LgError::corrupt(&path, e.to_string()))
}

pub fn write_split(split: &Split, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let boxes = dir.join("gt_boxes");
    for d in [&images, &boxes] {
        fs::create_dir_all(d).map_err(|e| LgError::io(d, e))?;
    }
    let mut csv = String::from("image_id");
    for n in &split.attribute_names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for s in &split.samples {
        write_ppm(&images.join(format!("{}.ppm", s.id)), &s.image)?;
        let mut txt = String::new();
        for (a, b) in &s.gt_boxes {
            let _ = writeln!(txt, "{a} {:.6} {:.6} {:.6} {:.6}", b.x_min, b.y_min, b.x_max, b.y_max);
        }
        let p = boxes.join(format!("{}.txt", s.id));
        fs::write(&p, txt).map_err(|e| LgError::io(&p, e))?;
        csv.push_str(&s.id);
        for l in &s.labels {
            csv.push(',');
            csv.push(if *l == 1 { '1' } else { '0' });
        }
        csv.push('\n');
    }
    let p = dir.join("labels.csv");
    fs::write(&p, csv).map_err(|e| LgError::io(&p, e))
}

/// Loads `root/{split}`. Ground-truth box files are optional.
pub fn load_split(root: &Path, split: &str) -> Result<Split> {
    let dir = root.join(split);
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path).map_err(|e| LgError::io(&labels_path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LgError::corrupt(&labels_path, "empty label file"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("image_id") {
        return Err(LgError::corrupt(&labels_path, "first column must be image_id"));
    }
    let attribute_names: Vec<String> = cols.map(str::to_string).collect();
    let a = attribute_names.len();
    if a == 0 {
        return Err(LgError::corrupt(&labels_path, "no attribute columns"));
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != a + 1 {
            return Err(LgError::corrupt(
                &labels_path,
                format!("line {}: {} fields, expected {}", n + 2, fields.len(), a + 1),
            ));
        }
        let id = fields[0].to_string();
        let labels = fields[1..]
            .iter()
            .map(|f| match *f {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(LgError::corrupt(
                    &labels_path,
                    format!("line {}: label {other:?} is not 0/1", n + 2),
                )),
            })
            .collect::<Result<Vec<u8>>>()?;
        let image = read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
        let box_path = dir.join("gt_boxes").join(format!("{id}.txt"));
        let gt_boxes = if box_path.exists() {
            read_gt_boxes(&box_path, &labels)?
        } else {
            Vec::new()
        };
        samples.push(Sample {
            id,
            image,
            labels,
            gt_boxes,
        });
    }
    if let Some(first) = samples.first() {
        let shape = first.image.shape().to_vec();
        if let Some(s) = samples.iter().find(|s| s.image.shape() != shape.as_slice()) {
            return Err(LgError::corrupt(
                dir.join("images").join(format!("{}.ppm", s.id)),
                format!("shape {:?} differs from {:?}", s.image.shape(), shape),
            ));
        }
    }
    Ok(Split {
        name: split.to_string(),
        attribute_names,
        samples,
    })
}

fn read_gt_boxes(path: &Path, labels: &[u8]) -> Result<Vec<(usize, BBox)>> {
    let text = fs::read_to_string(path).map_err(|e| LgError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = (|| -> Option<(usize, [f64; 4])> {
            if f.len() != 5 {
                return None;
            }
            let a = f[0].parse().ok()?;
            let mut c = [0.0; 4];
            for (slot, t) in c.iter_mut().zip(&f[1..]) {
                *slot = t.parse().ok()?;
            }
            Some((a, c))
        })();
        let (a, c) = parsed.ok_or_else(|| LgError::corrupt(path, format!("line {}: malformed", n + 1)))?;
        if labels.get(a) != Some(&1) {
            return Err(LgError::corrupt(
                path,
                format!("line {}: box for attribute {a}, which is not labeled positive", n + 1),
            ));
        }
        let b = BBox::new(c[0], c[1], c[2], c[3])
            .map_err(|e| LgError::corrupt(path, format!("line {}: {e}", n + 1)))?;
        out.push((a, b));
    }
    Ok(out)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank(3, "encode_ppm")?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(LgError::shape("encode_ppm", format!("{c} channels, PPM needs 3")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            let v = image.data()[ch * plane + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |d: &str| LgError::corrupt(origin, d.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| bad("bad header number"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit, non-empty PPM is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let plane = w * h;
    if bytes.len() != start + 3 * plane {
        return Err(bad(&format!(
            "raster has {} bytes, expected {}",
            bytes.len().saturating_sub(start),
            3 * plane
        )));
    }
    let raster = &bytes[start..];
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = raster[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| LgError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| LgError::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Fraction of pixels whose every channel is within [`COLOR_BAND`] of `color`,
/// over the pixel rectangle `[x0, x1) x [y0, y1)`.
pub fn color_band_fraction(image: &Tensor, color: [f64; 3], rect: (usize, usize, usize, usize)) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (x0, y0, x1, y1) = (rect.0.min(w), rect.1.min(h), rect.2.min(w), rect.3.min(h));
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let plane = h * w;
    let mut hits = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * w + x;
            if (0..3).all(|c| (image.data()[c * plane + p] - color[c]).abs() <= COLOR_BAND) {
                hits += 1;
            }
        }
    }
    hits as f64 / ((x1 - x0) * (y1 - y0)) as f64
}

/// Directory of a split under a dataset root.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}
