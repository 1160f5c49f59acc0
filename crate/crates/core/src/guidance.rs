//! CAM-box / proposal affinity and guided fusion of local and global evidence.
//!
//! `G = A X` aggregates proposal features per attribute, `P[i] . G[i] + b[i]`
//! projects each to a local logit, and the frozen global logit is added on top.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};
use crate::geometry::BBox;
use crate::tensor_autodiff::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityMode {
    #[default]
    Iou,
    OverlapArea,
}

/// Intersection over union on real-valued coordinates; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn overlap_area(a: &BBox, b: &BBox) -> f64 {
    a.intersection_area(b)
}

/// Row-major `c x d` matrix; rows are attributes, columns proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub mode: AffinityMode,
}

impl AffinityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Every entry `1 / d`: all proposals weighted evenly (the no-guidance arm).
    pub fn uniform(rows: usize, cols: usize, mode: AffinityMode) -> Self {
        AffinityMatrix {
            rows,
            cols,
            values: vec![1.0 / cols as f64; rows * cols],
            mode,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.values.clone())
            .expect("affinity storage matches its shape")
    }

    /// One comma-separated line per attribute.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn affinity_map(cam_boxes: &[BBox], proposals: &[BBox], mode: AffinityMode) -> Result<AffinityMatrix> {
    if cam_boxes.is_empty() || proposals.is_empty() {
        return Err(LgError::InvalidArgument(format!(
            "affinity needs at least one CAM box and one proposal (got {} and {})",
            cam_boxes.len(),
            proposals.len()
        )));
    }
    let f = match mode {
        AffinityMode::Iou => iou,
        AffinityMode::OverlapArea => overlap_area,
    };
    let values = cam_boxes
        .iter()
        .flat_map(|c| proposals.iter().map(move |d| f(c, d)))
        .collect();
    Ok(AffinityMatrix {
        rows: cam_boxes.len(),
        cols: proposals.len(),
        values,
        mode,
    })
}

/// Divides each row by its sum; all-zero rows stay zero.
pub fn normalize_affinity(raw: &AffinityMatrix) -> Result<AffinityMatrix> {
    if let Some(v) = raw.values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(LgError::InvalidArgument(format!(
            "affinity entries must be finite and >= 0, found {v}"
        )));
    }
    let mut out = raw.clone();
    for i in 0..raw.rows {
        let row = &mut out.values[i * raw.cols..(i + 1) * raw.cols];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

/// Per-attribute projection `P [c, k]` and bias `[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceHead {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl GuidanceHead {
    pub fn zeros(num_attributes: usize, k: usize) -> Self {
        GuidanceHead {
            proj_w: Tensor::zeros(&[num_attributes, k]),
            proj_b: Tensor::zeros(&[num_attributes]),
        }
    }

    pub fn random<R: Rng>(num_attributes: usize, k: usize, std: f64, rng: &mut R) -> Self {
        let w = (0..num_attributes * k)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        GuidanceHead {
            proj_w: Tensor::matrix(num_attributes, k, w).expect("sized above"),
            proj_b: Tensor::zeros(&[num_attributes]),
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.proj_w.shape()[0]
    }

    pub fn check_shapes(&self, num_attributes: usize, k: usize) -> Result<()> {
        if self.proj_w.shape() != [num_attributes, k] || self.proj_b.shape() != [num_attributes] {
            return Err(LgError::shape(
                "guidance_head",
                format!(
                    "expected P [{num_attributes}, {k}] and bias [{num_attributes}], got {:?} and {:?}",
                    self.proj_w.shape(),
                    self.proj_b.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<GuidanceNodes> {
        Ok(GuidanceNodes {
            proj_w: g.leaf(self.proj_w.clone(), trainable)?,
            proj_b: g.leaf(self.proj_b.clone(), trainable)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceNodes {
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

pub struct FusionNodes {
    /// Fused logits `[c]`.
    pub fused: NodeId,
    /// Local logits `[c]`.
    pub local: NodeId,
}

/// Graph form: `A` and the global logits are constants; gradients flow to `X`, `P`, bias.
pub fn guided_fusion_graph(
    g: &mut Graph,
    affinity: &AffinityMatrix,
    local_feats: NodeId,
    head: GuidanceNodes,
    global_logits: &[f64],
) -> Result<FusionNodes> {
    let xs = g.value(local_feats).shape().to_vec();
    if xs.len() != 2 || xs[0] != affinity.cols {
        return Err(LgError::shape(
            "guided_fusion",
            format!("affinity {}x{} vs features {:?}", affinity.rows, affinity.cols, xs),
        ));
    }
    if global_logits.len() != affinity.rows {
        return Err(LgError::shape(
            "guided_fusion",
            format!("{} global logits for {} attributes", global_logits.len(), affinity.rows),
        ));
    }
    let agg = g.const_matmul(affinity.to_tensor(), local_feats)?;
    let local = g.row_dot(head.proj_w, agg, head.proj_b)?;
    let fused = g.add_const(local, &Tensor::vector(global_logits.to_vec()))?;
    Ok(FusionNodes { fused, local })
}

/// Value form of [`guided_fusion_graph`]: returns `(fused, local)` logits.
pub fn guided_fusion(
    affinity: &AffinityMatrix,
    local_feats: &Tensor,
    head: &GuidanceHead,
    global_logits: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(local_feats.clone())?;
    let h = head.register(&mut g, false)?;
    let out = guided_fusion_graph(&mut g, affinity, x, h, global_logits)?;
    Ok((
        g.value(out.fused).data().to_vec(),
        g.value(out.local).data().to_vec(),
    ))
}
