//! Axis-aligned boxes and the standard center/size delta encoding.

/// Box with continuous corner coordinates; width is `x1 - x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn scale(&self, k: f64) -> BBox {
        BBox::new(self.x0 * k, self.y0 * k, self.x1 * k, self.y1 * k)
    }

    /// Deltas `(dx/w, dy/h, ln(w'/w), ln(h'/h))` that move `self` onto `target`.
    pub fn encode(&self, target: &BBox) -> [f64; 4] {
        let (cx, cy) = self.center();
        let (tx, ty) = target.center();
        let (w, h) = (self.width(), self.height());
        [
            (tx - cx) / w,
            (ty - cy) / h,
            (target.width() / w).ln(),
            (target.height() / h).ln(),
        ]
    }

    /// Inverse of [`BBox::encode`].
    pub fn decode(&self, deltas: &[f64; 4]) -> BBox {
        let (cx, cy) = self.center();
        let (w, h) = (self.width(), self.height());
        BBox::from_center(
            cx + deltas[0] * w,
            cy + deltas[1] * h,
            w * deltas[2].exp(),
            h * deltas[3].exp(),
        )
    }
}
