use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest width/height a box keeps after clamping to an image.
pub const MIN_BOX_SIZE: f64 = 1.0;

/// Center-form axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from its top-left corner and size.
    pub fn from_top_left(left: f64, top: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if finite && self.w > 0.0 && self.h > 0.0 {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid box {self:?}")))
        }
    }

    pub fn left(&self) -> f64 {
        self.x - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.y - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.left().max(other.left());
        let ih = self.bottom().min(other.bottom()) - self.top().max(other.top());
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.left() && x <= self.right() && y >= self.top() && y <= self.bottom()
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.left() >= self.left()
            && other.right() <= self.right()
            && other.top() >= self.top()
            && other.bottom() <= self.bottom()
    }

    /// Clamps the box to `[0, width] × [0, height]`, keeping at least
    /// [`MIN_BOX_SIZE`] pixels on each side.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        if self.left() >= 0.0
            && self.top() >= 0.0
            && self.right() <= width
            && self.bottom() <= height
            && self.w >= MIN_BOX_SIZE.min(width)
            && self.h >= MIN_BOX_SIZE.min(height)
        {
            return *self;
        }
        let (x0, x1) = clamp_span(self.left(), self.right(), width);
        let (y0, y1) = clamp_span(self.top(), self.bottom(), height);
        BBox {
            x: (x0 + x1) / 2.0,
            y: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Divides every field by `factor`.
    pub fn scaled_down(&self, factor: f64) -> BBox {
        BBox {
            x: self.x / factor,
            y: self.y / factor,
            w: self.w / factor,
            h: self.h / factor,
        }
    }
}

fn clamp_span(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let min = MIN_BOX_SIZE.min(limit);
    let lo = lo.clamp(0.0, limit - min);
    let hi = hi.clamp(lo + min, limit);
    (lo, hi)
}

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts cells of a fine grid whose centers fall inside each box.
    fn raster_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
        let x0 = a.left().min(b.left());
        let x1 = a.right().max(b.right());
        let y0 = a.top().min(b.top());
        let y1 = a.bottom().max(b.bottom());
        let (mut inter, mut uni) = (0u64, 0u64);
        let mut y = y0 + step / 2.0;
        while y < y1 {
            let mut x = x0 + step / 2.0;
            while x < x1 {
                let ia = a.contains_point(x, y);
                let ib = b.contains_point(x, y);
                inter += (ia && ib) as u64;
                uni += (ia || ib) as u64;
                x += step;
            }
            y += step;
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        let b = BBox::new(2.0, 1.0, 2.0, 2.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((raster_iou(&a, &b, 0.01) - 1.0 / 3.0).abs() < 1e-3);
        let far = BBox::new(10.0, 10.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn top_left_conversion() {
        let b = BBox::from_top_left(60.0, 27.0, 325.0, 304.0).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (222.5, 179.0, 325.0, 304.0));
    }

    #[test]
    fn clamping_keeps_positive_size() {
        let b = BBox::new(-50.0, 10.0, 20.0, 20.0).unwrap().clamp_to(100.0, 100.0);
        assert!(b.w >= MIN_BOX_SIZE && b.h > 0.0);
        assert!(b.left() >= 0.0);
        let inside = BBox::new(50.0, 50.0, 10.0, 10.0).unwrap();
        assert_eq!(inside.clamp_to(100.0, 100.0), inside);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-20.0..20.0f64, -20.0..20.0f64, 0.1..15.0f64, 0.1..15.0f64).prop_map(|(x, y, w, h)| BBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn clamp_result_is_valid(b in arb_box()) {
            let c = b.clamp_to(10.0, 10.0);
            prop_assert!(c.validate().is_ok());
            prop_assert!(c.left() >= 0.0 && c.right() <= 10.0);
            prop_assert!(c.top() >= 0.0 && c.bottom() <= 10.0);
        }
    }
}
