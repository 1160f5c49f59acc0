//! Axis-aligned boxes in image pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};

/// An axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]`, optionally scored.
///
/// Used both for class activation boxes and for region proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
            score: None,
        };
        if !(x_min < x_max && y_min < y_max) || ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(LgError::InvalidArgument(format!("degenerate box {:?}", b)));
        }
        Ok(b)
    }

    /// Constructor for coordinates already known to be ordered.
    pub(crate) fn raw(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_min < x_max && y_min < y_max);
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
            score: None,
        }
    }

    pub fn full_image(width: usize, height: usize) -> Self {
        BBox::raw(0.0, 0.0, width as f64, height as f64)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Closed-interval containment.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }

    /// Same coordinates, ignoring score.
    pub fn same_region(&self, other: &BBox) -> bool {
        self.x_min == other.x_min
            && self.y_min == other.y_min
            && self.x_max == other.x_max
            && self.y_max == other.y_max
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}
