use serde::{Deserialize, Serialize};

use crate::raster::Mask;

/// Splice footprint in pixel coordinates. A pixel `(y, x)` is inside when its
/// center `(y + 0.5, x + 0.5)` is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Rect {
        top: i64,
        left: i64,
        height: i64,
        width: i64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    /// Vertices as `(y, x)`; even-odd fill rule.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Region {
    pub fn contains(&self, py: f64, px: f64) -> bool {
        match self {
            Region::Rect {
                top,
                left,
                height,
                width,
            } => {
                py >= *top as f64
                    && py < (*top + *height) as f64
                    && px >= *left as f64
                    && px < (*left + *width) as f64
            }
            Region::Ellipse { cy, cx, ry, rx } => {
                if *ry <= 0.0 || *rx <= 0.0 {
                    return false;
                }
                let dy = (py - cy) / ry;
                let dx = (px - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Region::Polygon { vertices } => {
                let n = vertices.len();
                if n < 3 {
                    return false;
                }
                let mut inside = false;
                let mut j = n - 1;
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[j];
                    if (yi > py) != (yj > py) {
                        let x_cross = xi + (py - yi) / (yj - yi) * (xj - xi);
                        if px < x_cross {
                            inside = !inside;
                        }
                    }
                    j = i;
                }
                inside
            }
        }
    }

    /// Indicator mask clipped to the `height x width` canvas.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    m.data[y * width + x] = 1;
                }
            }
        }
        m
    }
}
