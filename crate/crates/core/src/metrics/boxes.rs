use crate::dataset::BBox;

/// Intersection over union of two corner-form boxes. A zero-area box has
/// IoU 0 with everything.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if a.area() <= 0.0 || b.area() <= 0.0 {
        log::warn!("degenerate box in IoU: {a:?} / {b:?}");
        return 0.0;
    }
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}
