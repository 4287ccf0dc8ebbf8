//! Planar poses, BEV grid alignment and axis-aligned box overlap.
//!
//! Grids are centered on their owner: column `x` spans metric
//! `[(x - W/2) * cell, (x + 1 - W/2) * cell)` along +x, row `y` likewise along +y.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::FeatureGrid;

/// A 2D rigid pose. Also used as a transform: `apply` maps local coordinates to the parent frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 { x: 0.0, y: 0.0, yaw: 0.0 };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn is_identity(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.yaw == 0.0
    }

    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * px - s * py + self.x, s * px + c * py + self.y)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// `self` followed by `next`: the result maps a point `p` to `next.apply(self.apply(p))`.
    pub fn then(&self, next: &Pose2) -> Pose2 {
        let (x, y) = next.apply(self.x, self.y);
        Pose2::new(x, y, self.yaw + next.yaw)
    }
}

/// The transform taking `src`-frame coordinates into the `dst` frame.
pub fn relative_pose(src: &Pose2, dst: &Pose2) -> Pose2 {
    let (s, c) = dst.yaw.sin_cos();
    let (dx, dy) = (src.x - dst.x, src.y - dst.y);
    Pose2::new(c * dx + s * dy, -s * dx + c * dy, src.yaw - dst.yaw)
}

/// Metric center of cell `(row, col)` in a grid of `height x width` cells.
pub fn cell_center(row: usize, col: usize, height: usize, width: usize, cell_size: f64) -> (f64, f64) {
    (
        (col as f64 + 0.5 - width as f64 / 2.0) * cell_size,
        (row as f64 + 0.5 - height as f64 / 2.0) * cell_size,
    )
}

/// Resamples `f` into the frame that `t` maps it to (the alignment operator).
///
/// Each output cell center is pulled back through `t^-1` and sampled bilinearly.
/// Samples falling outside the source grid read as zero.
pub fn warp_grid(f: &FeatureGrid, t: &Pose2, cell_size: f64) -> FeatureGrid {
    assert!(cell_size > 0.0, "cell_size must be positive");
    if t.is_identity() {
        return f.clone();
    }
    let (channels, h, w) = f.dims();
    let inv = t.inverse();
    let mut out = FeatureGrid::zeros(channels, h, w);
    for row in 0..h {
        for col in 0..w {
            let (mx, my) = cell_center(row, col, h, w, cell_size);
            let (sx, sy) = inv.apply(mx, my);
            // continuous index space where cell (r, c) sits at integer (c, r)
            let fx = sx / cell_size + w as f64 / 2.0 - 0.5;
            let fy = sy / cell_size + h as f64 / 2.0 - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let ax = fx - x0;
            let ay = fy - y0;
            let taps = [
                (y0, x0, (1.0 - ay) * (1.0 - ax)),
                (y0, x0 + 1.0, (1.0 - ay) * ax),
                (y0 + 1.0, x0, ay * (1.0 - ax)),
                (y0 + 1.0, x0 + 1.0, ay * ax),
            ];
            for &(ty, tx, wt) in &taps {
                if wt == 0.0 || ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                for c in 0..channels {
                    let v = out.get(c, row, col) + wt * f.get(c, ty, tx);
                    out.set(c, row, col, v);
                }
            }
        }
    }
    out
}

/// Axis-aligned BEV box: center and extent in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BevBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box extent must be positive");
        BevBox { cx, cy, w, h }
    }

    pub fn min_x(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn max_x(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn min_y(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn max_y(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x() && x <= self.max_x() && y >= self.min_y() && y <= self.max_y()
    }

    /// Axis-aligned bounds of this box after a rigid transform.
    pub fn transformed(&self, t: &Pose2) -> BevBox {
        let corners = [
            (self.min_x(), self.min_y()),
            (self.max_x(), self.min_y()),
            (self.min_x(), self.max_y()),
            (self.max_x(), self.max_y()),
        ];
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (x, y) in corners {
            let (tx, ty) = t.apply(x, y);
            lo_x = lo_x.min(tx);
            lo_y = lo_y.min(ty);
            hi_x = hi_x.max(tx);
            hi_y = hi_y.max(ty);
        }
        BevBox::new((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0, hi_x - lo_x, hi_y - lo_y)
    }
}

pub fn iou(a: &BevBox, b: &BevBox) -> f64 {
    let ix = (a.max_x().min(b.max_x()) - a.min_x().max(b.min_x())).max(0.0);
    let iy = (a.max_y().min(b.max_y()) - a.min_y().max(b.min_y())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
        (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && normalize_angle(a.yaw - b.yaw).abs() < tol
    }

    #[test]
    fn relative_pose_examples() {
        let p = Pose2::new(3.0, -1.0, 0.4);
        assert!(relative_pose(&p, &p).is_identity() || close(&relative_pose(&p, &p), &Pose2::IDENTITY, 1e-15));
        assert_eq!(relative_pose(&Pose2::new(1.0, 0.0, 0.0), &Pose2::IDENTITY), Pose2::new(1.0, 0.0, 0.0));
        // dst faces +y: the src origin (1, 0) lies on dst's right, i.e. at local (0, -1)
        let r = relative_pose(&Pose2::new(1.0, 0.0, 0.0), &Pose2::new(0.0, 0.0, PI / 2.0));
        assert!(close(&r, &Pose2::new(0.0, -1.0, -PI / 2.0), 1e-12));
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5 - 4.0 * PI) - 0.5).abs() < 1e-12);
    }

    fn ramp(c: usize, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid::from_fn(c, h, w, |c, y, x| (c * 100 + y * 10 + x) as f64 + 1.0)
    }

    #[test]
    fn warp_identity_is_exact() {
        let f = ramp(2, 5, 6);
        assert_eq!(warp_grid(&f, &Pose2::IDENTITY, 0.5), f);
    }

    #[test]
    fn warp_one_cell_shift() {
        let f = ramp(2, 4, 5);
        let cell = 0.25;
        let out = warp_grid(&f, &Pose2::new(cell, 0.0, 0.0), cell);
        // enumeration oracle: content moves one column toward +x
        for c in 0..2 {
            for y in 0..4 {
                assert_eq!(out.get(c, y, 0), 0.0);
                for x in 1..5 {
                    assert_eq!(out.get(c, y, x), f.get(c, y, x - 1));
                }
            }
        }
    }

    #[test]
    fn warp_half_turn_of_symmetric_grid() {
        let f = FeatureGrid::from_fn(1, 4, 4, |_, y, x| {
            let (a, b) = (y.min(3 - y), x.min(3 - x));
            (a * 2 + b) as f64 + 1.0
        });
        let out = warp_grid(&f, &Pose2::new(0.0, 0.0, PI), 1.0);
        assert!(out.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn warp_round_trip_integer_shift() {
        let f = ramp(1, 6, 6);
        let t = Pose2::new(2.0, -1.0, 0.0);
        let back = warp_grid(&warp_grid(&f, &t, 1.0), &t.inverse(), 1.0);
        for y in 1..5 {
            for x in 0..4 {
                assert_eq!(back.get(0, y, x), f.get(0, y, x));
            }
        }
    }

    #[test]
    fn warp_round_trip_rotation_interior() {
        // smooth field so bilinear resampling loss stays small
        let f = FeatureGrid::from_fn(1, 16, 16, |_, y, x| {
            ((y as f64) * 0.3).sin() * 0.5 + ((x as f64) * 0.2).cos() * 0.5
        });
        let t = Pose2::new(0.3, -0.2, 0.15);
        let back = warp_grid(&warp_grid(&f, &t, 1.0), &t.inverse(), 1.0);
        for y in 4..12 {
            for x in 4..12 {
                assert!((back.get(0, y, x) - f.get(0, y, x)).abs() < 5e-2);
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = BevBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BevBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = BevBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    fn pose() -> impl Strategy<Value = Pose2> {
        (-50.0..50.0f64, -50.0..50.0f64, -PI..PI).prop_map(|(x, y, a)| Pose2::new(x, y, a))
    }

    fn bbox() -> impl Strategy<Value = BevBox> {
        (-5.0..5.0f64, -5.0..5.0f64, 0.1..4.0f64, 0.1..4.0f64)
            .prop_map(|(x, y, w, h)| BevBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn relative_pose_composes(a in pose(), b in pose(), c in pose()) {
            let chained = relative_pose(&a, &b).then(&relative_pose(&b, &c));
            prop_assert!(close(&chained, &relative_pose(&a, &c), 1e-9));
        }

        #[test]
        fn relative_pose_matches_point_mapping(a in pose(), b in pose(), px in -5.0..5.0f64, py in -5.0..5.0f64) {
            let (wx, wy) = a.apply(px, py);
            let (bx, by) = b.inverse().apply(wx, wy);
            let (rx, ry) = relative_pose(&a, &b).apply(px, py);
            prop_assert!((bx - rx).abs() < 1e-9 && (by - ry).abs() < 1e-9);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
