//! Synthetic multi-agent scenes: moving boxes, line-of-sight point counts and BEV rasters.
//!
//! Everything is simulated in a frame that travels with the agents; world poses add
//! the convoy offset. Agent 0 sits at the origin of that frame and a fixed set of
//! objects around it guarantees every visibility class:
//!
//! | id | role                                                          |
//! |----|---------------------------------------------------------------|
//! | 0  | occluder 3 m ahead of agent 0                                 |
//! | 1  | hidden from agent 0 behind the occluder, in view of agent 1   |
//! | 2  | inside agent 0's grid but out of every agent's range          |
//! | 3  | seen by agent 0 at the first tick, out of range from the next |
//!
//! Free objects bounce inside the area and off the square reserved around agent 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BevBox, Pose2};
use crate::metrics::{classify_object, GtFrame, GtObject, ObjectType};
use crate::tensor::FeatureGrid;

use super::config::ScenarioConfig;

pub const OCCLUDER_ID: u32 = 0;
pub const HIDDEN_ID: u32 = 1;
pub const FAR_ID: u32 = 2;
pub const TRANSIENT_ID: u32 = 3;
const FIRST_FREE_ID: u32 = 4;

const PERIMETER_SAMPLES: usize = 24;
const POINT_JITTER: f64 = 0.1;
const TRANSIENT_STEP: (f64, f64) = (-2.2, -0.6);
const FIXED_AGENTS: [(f64, f64, f64); 4] = [(0.0, 0.0, 0.0), (7.0, 5.0, 0.0), (6.0, -5.0, 0.4), (-3.0, 8.0, -0.3)];
const RING_RADIUS: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameObject {
    pub id: u32,
    /// World-frame footprint.
    pub bbox: BevBox,
    pub height: f64,
}

/// One tick of the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub timestep: usize,
    /// World poses of the agents.
    pub poses: Vec<Pose2>,
    pub objects: Vec<FrameObject>,
    /// `points[agent][object]`: returns each agent collects from each object.
    pub points: Vec<Vec<u32>>,
    /// Per-agent point cloud in the agent's own frame, `[x, y, z]`.
    pub clouds: Vec<Vec<[f64; 3]>>,
}

impl SceneFrame {
    /// Returns from all agents together.
    pub fn points_cv(&self, object_index: usize) -> u32 {
        self.points.iter().map(|p| p[object_index]).sum()
    }

    pub fn object_index(&self, id: u32) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }
}

#[derive(Clone, Copy, Debug)]
struct MovingBox {
    id: u32,
    bbox: BevBox,
    height: f64,
    step: (f64, f64),
    bounces: bool,
}

/// Agent poses in the convoy frame.
pub fn agent_layout(n_agents: usize) -> Vec<Pose2> {
    (0..n_agents)
        .map(|a| match FIXED_AGENTS.get(a) {
            Some(&(x, y, yaw)) => Pose2::new(x, y, yaw),
            None => {
                let extra = (a - FIXED_AGENTS.len()) as f64;
                let slots = (super::config::MAX_AGENTS - FIXED_AGENTS.len()) as f64;
                let angle = (-30.0 + 180.0 * (extra + 0.5) / slots).to_radians();
                Pose2::new(RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin(), angle)
            }
        })
        .collect()
}

fn fixed_objects() -> Vec<MovingBox> {
    let fixed = |id, cx, cy, w, h, height| MovingBox {
        id,
        bbox: BevBox::new(cx, cy, w, h),
        height,
        step: (0.0, 0.0),
        bounces: false,
    };
    let mut transient = fixed(TRANSIENT_ID, -5.0, -5.5, 1.0, 1.0, 1.5);
    transient.step = TRANSIENT_STEP;
    vec![
        fixed(OCCLUDER_ID, 3.0, 0.0, 1.0, 4.0, 1.8),
        fixed(HIDDEN_ID, 7.0, 0.0, 2.0, 1.5, 1.6),
        fixed(FAR_ID, -6.2, -7.4, 1.0, 1.0, 1.5),
        transient,
    ]
}

fn overlaps(a: &BevBox, b: &BevBox, gap: f64) -> bool {
    a.min_x() < b.max_x() + gap && b.min_x() < a.max_x() + gap && a.min_y() < b.max_y() + gap && b.min_y() < a.max_y() + gap
}

fn keep_out(cfg: &ScenarioConfig) -> BevBox {
    let k = cfg.keep_out_half();
    BevBox::new(0.0, 0.0, 2.0 * k, 2.0 * k)
}

fn inside_area(b: &BevBox, half: f64) -> bool {
    b.min_x() >= -half && b.max_x() <= half && b.min_y() >= -half && b.max_y() <= half
}

fn free_objects(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<MovingBox>> {
    let half = cfg.area_extent / 2.0;
    let reserved = keep_out(cfg);
    let mut out: Vec<MovingBox> = Vec::with_capacity(cfg.n_objects);
    for i in 0..cfg.n_objects {
        let mut placed = None;
        for _ in 0..10_000 {
            let (w, h) = (rng.gen_range(1.5..4.5), rng.gen_range(1.0..2.0));
            let cx = rng.gen_range(-half + w / 2.0..half - w / 2.0);
            let cy = rng.gen_range(-half + h / 2.0..half - h / 2.0);
            let b = BevBox::new(cx, cy, w, h);
            if overlaps(&b, &reserved, 0.0) || out.iter().any(|o| overlaps(&o.bbox, &b, 0.5)) {
                continue;
            }
            let speed = rng.gen_range(0.2..1.6) * cfg.dt;
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            placed = Some(MovingBox {
                id: FIRST_FREE_ID + i as u32,
                bbox: b,
                height: rng.gen_range(1.4..2.0),
                step: (speed * heading.cos(), speed * heading.sin()),
                bounces: true,
            });
            break;
        }
        out.push(placed.ok_or_else(|| Error::Config(format!("could not place object {i} of {}", cfg.n_objects)))?);
    }
    Ok(out)
}

fn advance(o: &mut MovingBox, half: f64, reserved: &BevBox) {
    if !o.bounces {
        o.bbox.cx += o.step.0;
        o.bbox.cy += o.step.1;
        return;
    }
    let mut moved = o.bbox;
    moved.cx += o.step.0;
    if inside_area(&moved, half) && !overlaps(&moved, reserved, 0.0) {
        o.bbox = moved;
    } else {
        o.step.0 = -o.step.0;
    }
    let mut moved = o.bbox;
    moved.cy += o.step.1;
    if inside_area(&moved, half) && !overlaps(&moved, reserved, 0.0) {
        o.bbox = moved;
    } else {
        o.step.1 = -o.step.1;
    }
}

/// True when the open segment `p -> q` (its final sliver excluded) passes through `b`'s interior.
fn segment_blocked(p: (f64, f64), q: (f64, f64), b: &BevBox) -> bool {
    const END: f64 = 1.0 - 1e-6;
    const SHRINK: f64 = 1e-9;
    let (mut lo, mut hi) = (0.0f64, END);
    for (start, delta, min, max) in [
        (p.0, q.0 - p.0, b.min_x() + SHRINK, b.max_x() - SHRINK),
        (p.1, q.1 - p.1, b.min_y() + SHRINK, b.max_y() - SHRINK),
    ] {
        if delta.abs() < 1e-15 {
            if start <= min || start >= max {
                return false;
            }
        } else {
            let (a, c) = ((min - start) / delta, (max - start) / delta);
            lo = lo.max(a.min(c));
            hi = hi.min(a.max(c));
        }
    }
    lo < hi
}

/// Evenly spaced points on a box outline, half a spacing away from the first corner.
pub fn perimeter_samples(b: &BevBox, n: usize) -> Vec<(f64, f64)> {
    let perimeter = 2.0 * (b.w + b.h);
    let spacing = perimeter / n as f64;
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) * spacing;
            if s < b.w {
                (b.min_x() + s, b.min_y())
            } else if s < b.w + b.h {
                (b.max_x(), b.min_y() + (s - b.w))
            } else if s < 2.0 * b.w + b.h {
                (b.max_x() - (s - b.w - b.h), b.max_y())
            } else {
                (b.min_x(), b.max_y() - (s - 2.0 * b.w - b.h))
            }
        })
        .collect()
}

/// Outline samples of `boxes[target]` that `eye` can see past every box, including the target itself.
pub fn visible_samples(eye: (f64, f64), boxes: &[BevBox], target: usize) -> Vec<(f64, f64)> {
    perimeter_samples(&boxes[target], PERIMETER_SAMPLES)
        .into_iter()
        .filter(|&s| !boxes.iter().any(|b| segment_blocked(eye, s, b)))
        .collect()
}

/// Returns an agent at `eye` gets from `boxes[target]`: a range-decayed budget
/// scaled by the visible share of the outline, zero beyond `max_range`.
pub fn point_count(cfg: &ScenarioConfig, eye: (f64, f64), boxes: &[BevBox], target: usize) -> u32 {
    let b = &boxes[target];
    let d = ((b.cx - eye.0).powi(2) + (b.cy - eye.1).powi(2)).sqrt();
    if d > cfg.max_range {
        return 0;
    }
    let share = visible_samples(eye, boxes, target).len() as f64 / PERIMETER_SAMPLES as f64;
    (cfg.point_budget * (-d / cfg.range_decay).exp() * share).floor() as u32
}

fn cloud_rng(seed: u64, t: usize, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((t as u64) << 16 | agent as u64));
    rng
}

/// Generates all frames. Deterministic in `cfg`.
pub fn gen_scenario(cfg: &ScenarioConfig) -> Result<Vec<SceneFrame>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut objects = fixed_objects();
    objects.extend(free_objects(cfg, &mut rng)?);
    let layout = agent_layout(cfg.n_agents);
    let half = cfg.area_extent / 2.0;
    let reserved = keep_out(cfg);
    let (gx, gy) = cfg.grid_extent();
    let mut frames = Vec::with_capacity(cfg.timesteps);
    for t in 0..cfg.timesteps {
        objects.retain(|o| o.bounces || (o.bbox.cx.abs() <= half && o.bbox.cy.abs() <= half));
        let offset = cfg.convoy_speed * cfg.dt * t as f64;
        let boxes: Vec<BevBox> = objects.iter().map(|o| o.bbox).collect();
        let mut points = Vec::with_capacity(cfg.n_agents);
        let mut clouds = Vec::with_capacity(cfg.n_agents);
        for (a, local) in layout.iter().enumerate() {
            let eye = (local.x, local.y);
            let mut rng = cloud_rng(cfg.seed, t, a);
            let mut counts = Vec::with_capacity(objects.len());
            let mut cloud = Vec::new();
            let to_local = local.inverse();
            for (i, o) in objects.iter().enumerate() {
                let n = point_count(cfg, eye, &boxes, i);
                counts.push(n);
                if n == 0 {
                    continue;
                }
                let seen = visible_samples(eye, &boxes, i);
                for k in 0..n as usize {
                    let (sx, sy) = seen[k % seen.len()];
                    let (jx, jy) = (rng.gen_range(-POINT_JITTER..POINT_JITTER), rng.gen_range(-POINT_JITTER..POINT_JITTER));
                    let (lx, ly) = to_local.apply(sx + jx, sy + jy);
                    cloud.push([lx, ly, rng.gen_range(0.0..o.height)]);
                }
            }
            for _ in 0..cfg.clutter_points {
                cloud.push([
                    rng.gen_range(-gx / 2.0..gx / 2.0),
                    rng.gen_range(-gy / 2.0..gy / 2.0),
                    rng.gen_range(0.0..cfg.slab_height),
                ]);
            }
            points.push(counts);
            clouds.push(cloud);
        }
        frames.push(SceneFrame {
            timestep: t,
            poses: layout.iter().map(|p| Pose2::new(p.x + offset, p.y, p.yaw)).collect(),
            objects: objects
                .iter()
                .map(|o| FrameObject {
                    id: o.id,
                    bbox: BevBox::new(o.bbox.cx + offset, o.bbox.cy, o.bbox.w, o.bbox.h),
                    height: o.height,
                })
                .collect(),
            points,
            clouds,
        });
        for o in objects.iter_mut() {
            advance(o, half, &reserved);
        }
    }
    Ok(frames)
}

/// Binary occupancy: channel = height slab, `col = floor(x / cell + W/2)`, `row = floor(y / cell + H/2)`.
/// Points outside the grid or the slab range are dropped.
pub fn rasterize_bev(points: &[[f64; 3]], cfg: &ScenarioConfig) -> FeatureGrid {
    let (h, w, s) = (cfg.grid_height, cfg.grid_width, cfg.height_slabs);
    let mut grid = FeatureGrid::zeros(s, h, w);
    for p in points {
        let col = (p[0] / cfg.cell_size + w as f64 / 2.0).floor();
        let row = (p[1] / cfg.cell_size + h as f64 / 2.0).floor();
        let slab = (p[2] / cfg.slab_height).floor();
        if col < 0.0 || row < 0.0 || slab < 0.0 || col >= w as f64 || row >= h as f64 || slab >= s as f64 {
            continue;
        }
        grid.set(slab as usize, row as usize, col as usize, 1.0);
    }
    grid
}

/// Ground truth seen by `ego` at frame `t`: objects whose center lies in its grid,
/// boxes in the ego frame. Objects invisible now but visible through collaboration
/// one tick earlier carry the ARTC label.
pub fn labelled_objects(frames: &[SceneFrame], cfg: &ScenarioConfig, t: usize, ego: usize) -> Vec<(u32, GtObject)> {
    let frame = &frames[t];
    let to_ego = frame.poses[ego].inverse();
    let (gx, gy) = cfg.grid_extent();
    let mut out = Vec::new();
    for (i, o) in frame.objects.iter().enumerate() {
        let bbox = o.bbox.transformed(&to_ego);
        if bbox.cx.abs() >= gx / 2.0 || bbox.cy.abs() >= gy / 2.0 {
            continue;
        }
        let mut gt = GtObject { bbox, points_sv: frame.points[ego][i], points_cv: frame.points_cv(i), label: None };
        let prev_visible = t > 0
            && frames[t - 1].object_index(o.id).is_some_and(|j| frames[t - 1].points_cv(j) > cfg.tau);
        if prev_visible && classify_object(&gt, cfg.tau) == ObjectType::Arci {
            gt.label = Some(ObjectType::Artc);
        }
        out.push((o.id, gt));
    }
    out
}

/// Ground-truth JSONL records, one per (frame, agent).
pub fn ground_truth(frames: &[SceneFrame], cfg: &ScenarioConfig) -> Vec<GtFrame> {
    let mut out = Vec::new();
    for t in 0..frames.len() {
        for ego in 0..frames[t].poses.len() {
            out.push(GtFrame {
                frame: t as u64,
                agent: Some(ego as u16),
                objects: labelled_objects(frames, cfg, t, ego).into_iter().map(|(_, o)| o).collect(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig { timesteps: 3, n_objects: 4, ..ScenarioConfig::default() }
    }

    #[test]
    fn deterministic() {
        let cfg = small_cfg();
        assert_eq!(gen_scenario(&cfg).unwrap(), gen_scenario(&cfg).unwrap());
        let other = ScenarioConfig { seed: 8, ..cfg.clone() };
        assert_ne!(gen_scenario(&cfg).unwrap(), gen_scenario(&other).unwrap());
    }

    #[test]
    fn unobstructed_object_is_seen() {
        let cfg = ScenarioConfig::default();
        let boxes = [BevBox::new(2.0, 0.0, 1.0, 1.0)];
        assert!(point_count(&cfg, (0.0, 0.0), &boxes, 0) > 0);
        let far = [BevBox::new(20.0, 0.0, 1.0, 1.0)];
        assert_eq!(point_count(&cfg, (0.0, 0.0), &far, 0), 0);
    }

    #[test]
    fn self_occlusion_hides_back_faces() {
        let boxes = [BevBox::new(5.0, 0.0, 2.0, 2.0)];
        let seen = visible_samples((0.0, 0.0), &boxes, 0);
        assert!(!seen.is_empty());
        // only the face toward the eye and the near halves of the side faces
        assert!(seen.iter().all(|&(x, _)| x < 5.0 + 1e-9));
        assert!(seen.iter().any(|&(x, _)| (x - 4.0).abs() < 1e-12));
    }

    #[test]
    fn occluder_blocks_and_other_view_sees() {
        let boxes = [BevBox::new(3.0, 0.0, 1.0, 4.0), BevBox::new(7.0, 0.0, 2.0, 1.5)];
        assert!(visible_samples((0.0, 0.0), &boxes, 1).is_empty());
        // a sample is visible exactly when no segment crosses a box interior
        let from_side = visible_samples((7.0, 5.0), &boxes, 1);
        let manual: Vec<_> = perimeter_samples(&boxes[1], PERIMETER_SAMPLES)
            .into_iter()
            .filter(|&(_, y)| (y - 0.75).abs() < 1e-12)
            .collect();
        assert!(!from_side.is_empty());
        for s in &manual {
            assert!(from_side.contains(s));
        }
    }

    #[test]
    fn segment_tests() {
        let b = BevBox::new(0.0, 0.0, 2.0, 2.0);
        assert!(segment_blocked((-5.0, 0.0), (5.0, 0.0), &b));
        assert!(!segment_blocked((-5.0, 0.0), (-1.0, 0.0), &b));
        assert!(!segment_blocked((-5.0, 1.0), (5.0, 1.0), &b));
        assert!(!segment_blocked((-5.0, 3.0), (5.0, 3.0), &b));
        assert!(segment_blocked((0.0, -5.0), (0.0, 5.0), &b));
    }

    #[test]
    fn raster_cases() {
        let cfg = ScenarioConfig::default();
        assert_eq!(rasterize_bev(&[], &cfg), FeatureGrid::zeros(8, 64, 64));
        let g = rasterize_bev(&[[0.1, -0.1, 0.5]], &cfg);
        assert_eq!(g.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(g.get(1, 31, 32), 1.0);
        // points on cell borders fall to the upper cell
        let edge = rasterize_bev(&[[0.25, 0.0, 0.0], [-8.0, -8.0, 0.0], [8.0, 0.0, 0.0], [0.0, 0.0, 3.2]], &cfg);
        assert_eq!(edge.get(0, 32, 33), 1.0);
        assert_eq!(edge.get(0, 0, 0), 1.0);
        assert_eq!(edge.data().iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn fixed_layout_classes() {
        let cfg = small_cfg();
        let frames = gen_scenario(&cfg).unwrap();
        let t0: Vec<_> = labelled_objects(&frames, &cfg, 0, 0);
        let kind = |objs: &[(u32, GtObject)], id| {
            objs.iter().find(|(i, _)| *i == id).map(|(_, o)| classify_object(o, cfg.tau))
        };
        assert_eq!(kind(&t0, OCCLUDER_ID), Some(ObjectType::Arsv));
        assert_eq!(kind(&t0, HIDDEN_ID), Some(ObjectType::Arcv));
        assert_eq!(kind(&t0, FAR_ID), Some(ObjectType::Arci));
        assert_eq!(kind(&t0, TRANSIENT_ID), Some(ObjectType::Arsv));
        let t1 = labelled_objects(&frames, &cfg, 1, 0);
        assert_eq!(kind(&t1, TRANSIENT_ID), Some(ObjectType::Artc));
        let t2 = labelled_objects(&frames, &cfg, 2, 0);
        assert_eq!(kind(&t2, TRANSIENT_ID), None);
        assert_eq!(t0.len(), 4);
    }
}
