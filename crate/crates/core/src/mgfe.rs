//! Multi-grain feature enhancement and the detection head.
//!
//! Levels are indexed coarse to fine from 0. For level `j` the guidance stage reads
//! `mgfe.l{j}.guide`; levels `j >= 1` also fuse with `mgfe.l{j}.fuse` and the
//! L2Norm scales `mgfe.l{j}.norm_{coarse,guided,collab}.scale`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cell_center, iou, BevBox};
use crate::tensor::{
    channel_max, l2norm_channels, sigmoid, upsample2x, Conv2dLayer, FeatureGrid, ParamSet, DEFAULT_L2NORM_SCALE,
};

/// Per-level `(channels, height, width)`, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionLadder {
    levels: Vec<(usize, usize, usize)>,
}

impl ResolutionLadder {
    pub fn new(levels: Vec<(usize, usize, usize)>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Config(format!("ladder needs at least two levels, got {}", levels.len())));
        }
        for &(c, h, w) in &levels {
            if c == 0 || h == 0 || w == 0 {
                return Err(Error::Config(format!("ladder level {c}x{h}x{w} has a zero dimension")));
            }
        }
        for pair in levels.windows(2) {
            let ((c0, h0, w0), (c1, h1, w1)) = (pair[0], pair[1]);
            if h1 != 2 * h0 || w1 != 2 * w0 || c0 != 2 * c1 {
                return Err(Error::Config(format!(
                    "ladder step {c0}x{h0}x{w0} -> {c1}x{h1}x{w1} must halve channels and double the grid"
                )));
            }
        }
        Ok(ResolutionLadder { levels })
    }

    /// Parses `"64x8x8,32x16x16"`.
    pub fn parse(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|part| {
                let dims: Vec<usize> = part
                    .trim()
                    .split('x')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad ladder entry {part:?}")))?;
                match dims[..] {
                    [c, h, w] => Ok((c, h, w)),
                    _ => Err(Error::Config(format!("ladder entry {part:?} needs CxHxW"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ResolutionLadder::new(levels)
    }

    pub fn levels(&self) -> &[(usize, usize, usize)] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> (usize, usize, usize) {
        *self.levels.last().expect("ladder is never empty")
    }
}

impl std::fmt::Display for ResolutionLadder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.levels.iter().map(|(c, h, w)| format!("{c}x{h}x{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Guidance stage: `channel_max(sigmoid(conv1x1(e))) * f`.
pub fn stage_one(e: &FeatureGrid, f: &FeatureGrid, params: &ParamSet, level: usize) -> Result<FeatureGrid> {
    e.check_same_dims(f, "guidance operands")?;
    let c = e.channels();
    let conv = Conv2dLayer::from_params(params, &format!("mgfe.l{level}.guide"), c, c, 1, 1)?;
    let guidance = channel_max(&sigmoid(&conv.forward(e)?));
    f.broadcast_mul(&guidance)
}

fn norm_scale(params: &ParamSet, name: &str, channels: usize) -> Result<Vec<f64>> {
    if params.contains(name) {
        Ok(params.get_shaped(name, &[channels])?.data().to_vec())
    } else {
        Ok(vec![DEFAULT_L2NORM_SCALE; channels])
    }
}

/// Fusion stage: `sigmoid(conv3x3([L2(up(coarse)); L2(f1); L2(e)]))`, producing `e`'s channel count.
pub fn stage_two(
    f_coarse: &FeatureGrid,
    f1: &FeatureGrid,
    e: &FeatureGrid,
    params: &ParamSet,
    level: usize,
) -> Result<FeatureGrid> {
    f1.check_same_dims(e, "fusion operands")?;
    let up = upsample2x(f_coarse);
    if !up.same_spatial(e) {
        return Err(Error::shape(format!(
            "coarse {}x{} upsampled to {}x{}, fine level is {}x{}",
            f_coarse.height(),
            f_coarse.width(),
            up.height(),
            up.width(),
            e.height(),
            e.width()
        )));
    }
    let prefix = format!("mgfe.l{level}");
    let (cc, c) = (up.channels(), e.channels());
    let a = l2norm_channels(&up, &norm_scale(params, &format!("{prefix}.norm_coarse.scale"), cc)?)?;
    let b = l2norm_channels(f1, &norm_scale(params, &format!("{prefix}.norm_guided.scale"), c)?)?;
    let d = l2norm_channels(e, &norm_scale(params, &format!("{prefix}.norm_collab.scale"), c)?)?;
    let cat = FeatureGrid::concat_channels(&[&a, &b, &d])?;
    let conv = Conv2dLayer::from_params(params, &format!("{prefix}.fuse"), c, cc + 2 * c, 3, 1)?;
    Ok(sigmoid(&conv.forward(&cat)?))
}

/// Coarse-to-fine reconstruction.
///
/// The coarsest level contributes its guided ego feature; every finer level fuses
/// the running result with its own guided feature and collaborative map.
pub fn mgfe_forward(ego_feats: &[FeatureGrid], collab_maps: &[FeatureGrid], params: &ParamSet) -> Result<FeatureGrid> {
    if ego_feats.len() != collab_maps.len() || ego_feats.is_empty() {
        return Err(Error::shape(format!(
            "mgfe needs matching non-empty level lists, got {} ego and {} collaborative",
            ego_feats.len(),
            collab_maps.len()
        )));
    }
    let mut running = stage_one(&collab_maps[0], &ego_feats[0], params, 0)?;
    for j in 1..ego_feats.len() {
        let guided = stage_one(&collab_maps[j], &ego_feats[j], params, j)?;
        running = stage_two(&running, &guided, &collab_maps[j], params, j)?;
    }
    Ok(running)
}

/// Scores, raw box regressions and decoded boxes for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub score_map: FeatureGrid,
    pub box_map: FeatureGrid,
    pub decoded: Vec<(BevBox, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub cell_size: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { score_threshold: 0.5, nms_iou: 0.5, cell_size: 1.0, max_detections: usize::MAX }
    }
}

const MAX_LOG_EXTENT: f64 = 20.0;

/// Score branch `sigmoid(head.score)`, box branch `head.box` with per-cell
/// `(dx, dy, log w, log h)`; offsets are in cells from the cell center.
pub fn detect_head(d: &FeatureGrid, params: &ParamSet, cfg: &HeadConfig) -> Result<DetectionOutput> {
    let c = d.channels();
    let score_map = sigmoid(&Conv2dLayer::from_params(params, "head.score", 1, c, 1, 1)?.forward(d)?);
    let box_map = Conv2dLayer::from_params(params, "head.box", 4, c, 1, 1)?.forward(d)?;
    let (h, w) = (d.height(), d.width());
    let mut candidates = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let score = score_map.get(0, row, col);
            if score < cfg.score_threshold {
                continue;
            }
            let (x0, y0) = cell_center(row, col, h, w, cfg.cell_size);
            let cx = x0 + box_map.get(0, row, col) * cfg.cell_size;
            let cy = y0 + box_map.get(1, row, col) * cfg.cell_size;
            let bw = box_map.get(2, row, col).clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp();
            let bh = box_map.get(3, row, col).clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp();
            candidates.push((BevBox::new(cx, cy, bw, bh), score));
        }
    }
    let mut decoded = nms(candidates, cfg.nms_iou);
    decoded.truncate(cfg.max_detections);
    Ok(DetectionOutput { score_map, box_map, decoded })
}

/// Greedy score-descending suppression; stable for equal scores.
pub fn nms(mut candidates: Vec<(BevBox, f64)>, iou_thr: f64) -> Vec<(BevBox, f64)> {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut kept: Vec<(BevBox, f64)> = Vec::new();
    for (b, s) in candidates {
        if kept.iter().all(|(k, _)| iou(k, &b) <= iou_thr) {
            kept.push((b, s));
        }
    }
    kept
}
