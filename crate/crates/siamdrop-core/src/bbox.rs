//! Axis-aligned boxes in pixel coordinates and the overlap/distance measures
//! the evaluation is built on. All derived quantities are computed in f64 so
//! metric fixtures can be pinned tightly.

/// Top-left corner plus size, in pixels. `x` grows right, `y` grows down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    /// Zero for boxes with non-positive extent.
    pub fn area(&self) -> f64 {
        (self.w as f64).max(0.0) * (self.h as f64).max(0.0)
    }

    /// Intersection over union; 0 when either box is degenerate or the
    /// boxes do not overlap.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ax1 = self.x as f64;
        let ay1 = self.y as f64;
        let ax2 = ax1 + (self.w as f64).max(0.0);
        let ay2 = ay1 + (self.h as f64).max(0.0);
        let bx1 = other.x as f64;
        let by1 = other.y as f64;
        let bx2 = bx1 + (other.w as f64).max(0.0);
        let by2 = by1 + (other.h as f64).max(0.0);
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Euclidean distance between the two centers.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        let dx = ax - bx;
        let dy = ay - by;
        libm::sqrt(dx * dx + dy * dy)
    }
}
