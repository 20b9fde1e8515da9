use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Axis-aligned box in continuous pixel coordinates, stored as
/// (left, top, width, height) with `w > 0` and `h > 0`.
///
/// Pixel `(row i, col j)` belongs to a box when the pixel center
/// `(j + 0.5, i + 0.5)` lies inside it. This makes mask area algebra exact
/// and independent of the raster resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(CoreError::invalid(format!(
                "box ({x}, {y}, {w}, {h}) must have positive finite width and height"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// True when the center of pixel (row, col) lies inside the box.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        let px = col as f64 + 0.5;
        let py = row as f64 + 0.5;
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Intersection area with another box; 0 when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }
}

/// Intersection over union of two boxes. Symmetric, in [0, 1], and 0 for
/// boxes that only touch at an edge.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Scale a box about its center. Width and height are multiplied by
/// `factor` while the center stays fixed.
pub fn scale_box(b: &BBox, factor: f64) -> Result<BBox> {
    if !(factor > 0.0) {
        return Err(CoreError::invalid(format!("scale factor must be > 0, got {factor}")));
    }
    let (cx, cy) = b.center();
    let w = b.w * factor;
    let h = b.h * factor;
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Clip a box to the image rectangle `[0, w) x [0, h)`.
/// Returns `None` when the box does not overlap the image.
pub fn clip_to_image(b: &BBox, img_w: usize, img_h: usize) -> Option<BBox> {
    let x0 = b.x.max(0.0);
    let y0 = b.y.max(0.0);
    let x1 = b.right().min(img_w as f64);
    let y1 = b.bottom().min(img_h as f64);
    if x1 - x0 > 0.0 && y1 - y0 > 0.0 {
        Some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    } else {
        None
    }
}

/// Which side of the domain shift an image comes from.
/// Source maps to 0, target to 1; these are also the discriminator labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn as_f64(&self) -> f64 {
        match self {
            DomainLabel::Source => 0.0,
            DomainLabel::Target => 1.0,
        }
    }
}

impl std::fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainLabel::Source => write!(f, "source"),
            DomainLabel::Target => write!(f, "target"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_identity() {
        let b = BBox::new(3.0, 4.0, 10.0, 20.0).unwrap();
        assert_abs_diff_eq!(iou(&b, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_edge_touch_is_zero() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(10.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // intersection 50, union 150
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 10.0, 10.0).unwrap();
        assert_abs_diff_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn scale_identity() {
        let b = BBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let s = scale_box(&b, 1.0).unwrap();
        assert_eq!(s, b);
    }

    #[test]
    fn scale_preserves_center() {
        let b = BBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let s = scale_box(&b, 2.0).unwrap();
        assert_eq!(s, BBox { x: 8.0, y: 8.0, w: 8.0, h: 8.0 });
        assert_eq!(s.center(), b.center());
    }

    #[test]
    fn scale_can_leave_image() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let s = scale_box(&b, 3.0).unwrap();
        assert_eq!(s, BBox { x: -2.0, y: -2.0, w: 6.0, h: 6.0 });
    }

    #[test]
    fn scale_rejects_nonpositive_factor() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert!(scale_box(&b, 0.0).is_err());
        assert!(scale_box(&b, -1.0).is_err());
    }

    #[test]
    fn clip_inside_unchanged() {
        let b = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert_eq!(clip_to_image(&b, 10, 10), Some(b));
    }

    #[test]
    fn clip_overhanging() {
        let b = BBox::new(-2.0, -2.0, 6.0, 6.0).unwrap();
        assert_eq!(clip_to_image(&b, 4, 4), Some(BBox { x: 0.0, y: 0.0, w: 4.0, h: 4.0 }));
    }

    #[test]
    fn clip_outside_is_empty() {
        let b = BBox::new(100.0, 100.0, 5.0, 5.0).unwrap();
        assert_eq!(clip_to_image(&b, 10, 10), None);
    }

    #[test]
    fn domain_label_values() {
        assert_eq!(DomainLabel::Source.as_f64(), 0.0);
        assert_eq!(DomainLabel::Target.as_f64(), 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| BBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn iou_in_unit_interval(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn scale_roundtrip(b in arb_box(), s in 0.1..10.0f64) {
            let fwd = scale_box(&b, s).unwrap();
            let back = scale_box(&fwd, 1.0 / s).unwrap();
            prop_assert!((back.x - b.x).abs() < 1e-9);
            prop_assert!((back.y - b.y).abs() < 1e-9);
            prop_assert!((back.w - b.w).abs() < 1e-9);
            prop_assert!((back.h - b.h).abs() < 1e-9);
        }

        #[test]
        fn clip_idempotent(b in arb_box()) {
            if let Some(c1) = clip_to_image(&b, 64, 48) {
                let c2 = clip_to_image(&c1, 64, 48).unwrap();
                prop_assert_eq!(c1, c2);
            }
        }
    }
}
