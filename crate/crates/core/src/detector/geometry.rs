//! Box geometry on raw coordinate arrays, including the GIoU gradient.
//!
//! Predicted boxes are not guaranteed to stay inside the unit square, so these
//! helpers work on plain `[f64; 4]` rather than [`BBox`].

use crate::data::BBox;

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Generalized IoU of two valid boxes, in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_xyxy(&a.to_array(), &b.to_array())
}

pub fn giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU of `a` against `b` and its gradient with respect to `a`.
pub fn giou_with_grad(a: &[f64; 4], b: &[f64; 4]) -> (f64, [f64; 4]) {
    let iw_raw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih_raw = a[3].min(b[3]) - a[1].max(b[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_a = area(a);
    let union = area_a + area(b) - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = cw * ch;
    let value = inter / union - (hull - union) / hull;

    // d inter / d a
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if a[0] >= b[0] {
            d_inter[0] = -ih;
        }
        if a[2] <= b[2] {
            d_inter[2] = ih;
        }
        if a[1] >= b[1] {
            d_inter[1] = -iw;
        }
        if a[3] <= b[3] {
            d_inter[3] = iw;
        }
    }
    let (wa, ha) = (a[2] - a[0], a[3] - a[1]);
    let d_area = [-ha, -wa, ha, wa];
    let mut d_hull = [0.0; 4];
    if a[0] <= b[0] {
        d_hull[0] = -ch;
    }
    if a[2] >= b[2] {
        d_hull[2] = ch;
    }
    if a[1] <= b[1] {
        d_hull[1] = -cw;
    }
    if a[3] >= b[3] {
        d_hull[3] = cw;
    }
    // value = I/U - 1 + U/C with U = area_a + area_b - I
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] = d_inter[k] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[k] / (hull * hull);
    }
    (value, grad)
}

/// Chains a gradient w.r.t. xyxy coordinates back to cxcywh coordinates.
pub fn xyxy_grad_to_cxcywh(g: [f64; 4]) -> [f64; 4] {
    [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(v: [f64; 4]) -> BBox {
        BBox::from_array(v).unwrap()
    }

    #[test]
    fn identical_boxes() {
        let a = bx([0.1, 0.2, 0.6, 0.9]);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_quadrants() {
        // IoU 0, union 0.5, hull 1 -> -0.5
        let a = bx([0.0, 0.0, 0.5, 0.5]);
        let b = bx([0.5, 0.5, 1.0, 1.0]);
        assert!((giou(&a, &b) + 0.5).abs() < 1e-15);
    }

    fn arb_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0..0.9f64, 0.0..0.9f64, 0.02..0.5f64, 0.02..0.5f64).prop_map(|(x, y, w, h)| {
            [x, y, (x + w).min(1.0), (y + h).min(1.0)]
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let (a, b) = (bx(a), bx(b));
            let g = giou(&a, &b);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
            prop_assert!(g <= a.iou(&b) + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn gradient_matches_central_differences(a in arb_box(), b in arb_box()) {
            let (_, grad) = giou_with_grad(&a, &b);
            let eps = 1e-7;
            for k in 0..4 {
                let mut p = a; p[k] += eps;
                let mut m = a; m[k] -= eps;
                // skip kinks where a coordinate sits on one of b's edges
                let near_kink = b.iter().any(|&e| (a[k] - e).abs() < 1e-5);
                if near_kink { continue; }
                let num = (giou_xyxy(&p, &b) - giou_xyxy(&m, &b)) / (2.0 * eps);
                prop_assert!((num - grad[k]).abs() < 1e-5, "k={k} num={num} ana={}", grad[k]);
            }
        }
    }
}
