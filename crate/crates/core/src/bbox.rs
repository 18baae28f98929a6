//! Axis-aligned boxes in pixel coordinates, shared by detection,
//! association and evaluation.

/// Box given by left/top/right/bottom edges, `r > l`, `b > t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl BBox {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        BBox { l, t, r, b }
    }

    /// From MOTChallenge-style `(left, top, width, height)`.
    pub fn from_ltwh(l: f64, t: f64, w: f64, h: f64) -> Self {
        BBox {
            l,
            t,
            r: l + w,
            b: t + h,
        }
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }

    pub fn height(&self) -> f64 {
        self.b - self.t
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.l + self.r) / 2.0, (self.t + self.b) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.r > self.l && self.b > self.t
    }

    /// Intersection-over-union; 0 when either box is degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.r.min(other.r) - self.l.max(other.l)).max(0.0);
        let ih = (self.b.min(other.b) - self.t.max(other.t)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}
