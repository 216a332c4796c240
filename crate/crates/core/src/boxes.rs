//! Axis-aligned boxes in image pixels, `[x1, y1, x2, y2]`.

pub type BBox = [f64; 4];

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// A decoded prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

pub fn width(b: &BBox) -> f64 {
    b[2] - b[0]
}

pub fn height(b: &BBox) -> f64 {
    b[3] - b[1]
}

pub fn area(b: &BBox) -> f64 {
    width(b).max(0.0) * height(b).max(0.0)
}

pub fn sqrt_area(b: &BBox) -> f64 {
    area(b).sqrt()
}

pub fn center(b: &BBox) -> (f64, f64) {
    ((b[0] + b[2]) * 0.5, (b[1] + b[3]) * 0.5)
}

pub fn is_degenerate(b: &BBox) -> bool {
    !(width(b) > 0.0 && height(b) > 0.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// Mirror horizontally inside an image of width `w`.
pub fn hflip(b: &BBox, w: f64) -> BBox {
    [w - b[2], b[1], w - b[0], b[3]]
}

/// Small/medium/large by square-root area, with the band edges scaled
/// linearly from a 256-pixel reference image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

pub const BAND_EDGES_AT_256: [f64; 2] = [24.0, 64.0];

impl SizeBand {
    pub const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];

    pub fn edges(image_size: usize) -> [f64; 2] {
        let s = image_size as f64 / 256.0;
        [BAND_EDGES_AT_256[0] * s, BAND_EDGES_AT_256[1] * s]
    }

    /// Small is `< lo`, large is `> hi`, medium is everything in between.
    pub fn of_side(side: f64, image_size: usize) -> SizeBand {
        let [lo, hi] = Self::edges(image_size);
        if side < lo {
            SizeBand::Small
        } else if side > hi {
            SizeBand::Large
        } else {
            SizeBand::Medium
        }
    }

    pub fn of_box(b: &BBox, image_size: usize) -> SizeBand {
        Self::of_side(sqrt_area(b), image_size)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 2.0, 1.0]), 0.0);
    }

    #[test]
    fn bands_scale_with_image() {
        assert_eq!(SizeBand::of_side(23.9, 256), SizeBand::Small);
        assert_eq!(SizeBand::of_side(24.0, 256), SizeBand::Medium);
        assert_eq!(SizeBand::of_side(64.0, 256), SizeBand::Medium);
        assert_eq!(SizeBand::of_side(64.1, 256), SizeBand::Large);
        assert_eq!(SizeBand::of_side(5.9, 64), SizeBand::Small);
        assert_eq!(SizeBand::of_side(16.5, 64), SizeBand::Large);
    }

    #[test]
    fn hflip_is_involution() {
        let b = [3.0, 4.0, 10.0, 12.0];
        assert_eq!(hflip(&hflip(&b, 64.0), 64.0), b);
        assert_eq!(hflip(&b, 64.0), [54.0, 4.0, 61.0, 12.0]);
    }
}
