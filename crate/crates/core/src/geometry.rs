//! Normalized box geometry: corner/center conversion, IoU and GIoU.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Floor on the enclosing-box area used by GIoU.
pub const ENCLOSING_AREA_FLOOR: f64 = 1e-12;

/// Corner-form rectangle in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<(), GeometryError> {
        let c = self.corners();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(c));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !c.iter().all(|&v| in_unit(v)) {
            return Err(GeometryError::OutOfRange(c));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(GeometryError::Degenerate(c));
        }
        Ok(())
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.width(),
            h: self.height(),
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.corners()
    }
}

/// Center-form box, used only at the regression head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Corner form, clipped to the unit square.
    pub fn to_corner(&self) -> Result<BoundingBox, GeometryError> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(vals));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::Degenerate(vals));
        }
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        BoundingBox::new(x1, y1, x2, y2)
    }
}

pub fn box_area(b: &BoundingBox) -> f64 {
    b.area()
}

fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

fn enclosing_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.max(b.x2) - a.x1.min(b.x1)).max(0.0);
    let h = (a.y2.max(b.y2) - a.y1.min(b.y1)).max(0.0);
    (w * h).max(ENCLOSING_AREA_FLOOR)
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    inter / union
}

pub fn box_giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = enclosing_area(a, b);
    inter / union - (enclosing - union) / enclosing
}

/// `1 - GIoU`, in `[0, 2)`.
pub fn giou_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    1.0 - box_giou(pred, gt)
}

/// Mean absolute corner error.
pub fn l1_corner_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    pred.corners()
        .iter()
        .zip(gt.corners())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(box_area(&bx(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(box_area(&bx(0.0, 0.0, 0.5, 0.5)), 0.25);
        assert!((box_area(&bx(0.1, 0.2, 0.4, 0.9)) - 0.21).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(matches!(
            BoundingBox::new(0.5, 0.0, 0.5, 1.0),
            Err(GeometryError::Degenerate(_))
        ));
        assert!(matches!(
            BoundingBox::new(-0.1, 0.0, 0.5, 1.0),
            Err(GeometryError::OutOfRange(_))
        ));
        assert!(matches!(
            BoundingBox::new(0.0, f64::NAN, 0.5, 1.0),
            Err(GeometryError::NonFinite(_))
        ));
        assert!(serde_json::from_str::<BoundingBox>("[0.6, 0.1, 0.2, 0.3]").is_err());
    }

    #[test]
    fn center_conversion() {
        assert_eq!(
            CenterBox::new(0.5, 0.5, 1.0, 1.0).to_corner().unwrap(),
            bx(0.0, 0.0, 1.0, 1.0)
        );
        assert_eq!(
            CenterBox::new(0.25, 0.25, 0.5, 0.5).to_corner().unwrap(),
            bx(0.0, 0.0, 0.5, 0.5)
        );
        let b = bx(0.1, 0.2, 0.4, 0.9);
        let back = b.to_center().to_corner().unwrap();
        for (x, y) in back.corners().iter().zip(b.corners()) {
            assert!((x - y).abs() < 1e-15);
        }
        // clipped, still valid
        let clipped = CenterBox::new(0.95, 0.05, 0.2, 0.2).to_corner().unwrap();
        assert_eq!(clipped.x2(), 1.0);
        assert_eq!(clipped.y1(), 0.0);
        // zero area after clipping
        assert!(CenterBox::new(1.0, 0.5, 0.0, 0.2).to_corner().is_err());
        assert!(CenterBox::new(1.2, 0.5, 0.2, 0.2).to_corner().is_err());
    }

    #[test]
    fn iou_and_giou_examples() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        let b = bx(0.25, 0.25, 0.75, 0.75);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_giou(&a, &a), 1.0);
        assert!((box_iou(&a, &b) - 0.0625 / 0.4375).abs() < 1e-12);
        assert!((box_giou(&a, &b) - (1.0 / 7.0 - 0.125 / 0.5625)).abs() < 1e-12);
        assert!((box_giou(&a, &b) + 0.079365).abs() < 1e-6);
        let c = bx(0.0, 0.0, 0.1, 0.1);
        let d = bx(0.9, 0.9, 1.0, 1.0);
        assert_eq!(box_iou(&c, &d), 0.0);
        assert!((box_giou(&c, &d) + 0.98).abs() < 1e-12);
    }

    #[test]
    fn giou_loss_examples() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        let b = bx(0.25, 0.25, 0.75, 0.75);
        assert_eq!(giou_loss(&a, &a), 0.0);
        assert!((giou_loss(&a, &b) - 1.079365).abs() < 1e-6);
        let c = bx(0.0, 0.0, 0.1, 0.1);
        let d = bx(0.9, 0.9, 1.0, 1.0);
        assert!((giou_loss(&c, &d) - 1.98).abs() < 1e-12);
        assert!((l1_corner_loss(&a, &b) - 0.25).abs() < 1e-15);
    }
}
