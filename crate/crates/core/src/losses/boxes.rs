//! Box geometry on `(cx, cy, w, h)` boxes.

pub fn to_corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn from_corners(c: [f64; 4]) -> [f64; 4] {
    [(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1]]
}

/// Pixel `(x, y, w, h)` to normalized `(cx, cy, w, h)`.
pub fn normalize_pixel_box(b: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    [
        (b[0] + b[2] / 2.0) / width,
        (b[1] + b[3] / 2.0) / height,
        b[2] / width,
        b[3] / height,
    ]
}

fn area(c: [f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

fn inter_union(a: [f64; 4], b: [f64; 4]) -> (f64, f64, [f64; 4], [f64; 4]) {
    let (ca, cb) = (to_corners(a), to_corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    (inter, area(ca) + area(cb) - inter, ca, cb)
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, _, _) = inter_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (inter, union, ca, cb) = inter_union(a, b);
    let enclosing = area([ca[0].min(cb[0]), ca[1].min(cb[1]), ca[2].max(cb[2]), ca[3].max(cb[3])]);
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclosing - union) / enclosing
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_geometry() {
        let a = from_corners([0.0, 0.0, 1.0, 1.0]);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(giou(a, a), 1.0);
        let b = from_corners([0.5, 0.0, 1.5, 1.0]);
        assert!((iou(a, b) - 1.0 / 3.0).abs() < 1e-12);
        let c = from_corners([1.0, 0.0, 2.0, 1.0]);
        assert_eq!(iou(a, c), 0.0);
        assert!(giou(a, c).abs() < 1e-12);
        let far = from_corners([3.0, 0.0, 4.0, 1.0]);
        assert_eq!(iou(a, far), 0.0);
        assert!((giou(a, far) + 0.5).abs() < 1e-12);
        assert_eq!(iou([0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn normalizes_pixel_boxes() {
        assert_eq!(
            normalize_pixel_box([16.0, 0.0, 32.0, 16.0], 64.0, 64.0),
            [0.5, 0.125, 0.5, 0.25]
        );
    }
}
