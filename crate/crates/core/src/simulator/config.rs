use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy_cs::{FilterMode, SelectionConfig};
use crate::error::{Error, Result};
use crate::interpolation::ZeroPolicy;
use crate::mgfe::{HeadConfig, ResolutionLadder};

/// Everything that determines an episode besides the parameter set.
///
/// Read from TOML with flat `key = value` lines; every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_agents: usize,
    /// Free-moving objects, on top of the fixed layout around agent 0.
    pub n_objects: usize,
    pub timesteps: usize,
    /// Seconds per tick.
    pub dt: f64,
    /// Forward speed shared by all agents, m/s.
    pub convoy_speed: f64,
    /// Side of the square area objects move in, meters.
    pub area_extent: f64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub height_slabs: usize,
    pub cell_size: f64,
    pub slab_height: f64,
    pub ladder: String,
    /// Conv stack as `channels:stride` entries, e.g. `16:1,32:2`.
    pub encoder: String,
    pub query_hidden: usize,
    pub edge_widths: Vec<usize>,
    /// Points returned by a fully visible object at zero range.
    pub point_budget: f64,
    pub range_decay: f64,
    pub max_range: f64,
    /// Ground returns per agent and tick.
    pub clutter_points: usize,
    pub delta_s: f64,
    pub delta_c: f64,
    pub min_cells: usize,
    pub filter_mode: FilterMode,
    pub entropy_window: usize,
    pub interp_radius: usize,
    pub zero_policy: ZeroPolicy,
    pub tau: u32,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Boxes kept per frame after suppression, highest scores first.
    pub max_detections: usize,
    pub iou_thresholds: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 7,
            n_agents: 4,
            n_objects: 12,
            timesteps: 20,
            dt: 0.5,
            convoy_speed: 1.0,
            area_extent: 48.0,
            grid_height: 64,
            grid_width: 64,
            height_slabs: 8,
            cell_size: 0.25,
            slab_height: 0.4,
            ladder: "64x8x8,32x16x16".into(),
            encoder: "16:1,32:2,32:2,64:2".into(),
            query_hidden: 64,
            edge_widths: vec![128, 32, 8],
            point_budget: 200.0,
            range_decay: 8.0,
            max_range: 9.0,
            clutter_points: 300,
            delta_s: 1.0,
            delta_c: 1.0,
            min_cells: 1,
            filter_mode: FilterMode::TopFraction,
            entropy_window: 3,
            interp_radius: crate::interpolation::DEFAULT_RADIUS,
            zero_policy: ZeroPolicy::Participate,
            tau: crate::metrics::DEFAULT_TAU,
            score_threshold: 0.0,
            nms_iou: 0.5,
            max_detections: 50,
            iou_thresholds: vec![0.5, 0.7],
        }
    }
}

pub const MAX_AGENTS: usize = 16;

/// One encoder conv: 3x3, padding 1, ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub out_channels: usize,
    pub stride: usize,
}

pub fn parse_encoder(s: &str) -> Result<Vec<EncoderLayer>> {
    let layers = s
        .split(',')
        .map(|part| {
            let (c, st) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("encoder entry {part:?} needs channels:stride")))?;
            let out_channels = c.trim().parse().map_err(|_| Error::Config(format!("bad encoder channels {c:?}")))?;
            let stride = st.trim().parse().map_err(|_| Error::Config(format!("bad encoder stride {st:?}")))?;
            if out_channels == 0 || stride == 0 {
                return Err(Error::Config(format!("encoder entry {part:?} has a zero field")));
            }
            Ok(EncoderLayer { out_channels, stride })
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::Config("encoder has no layers".into()));
    }
    Ok(layers)
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn ladder(&self) -> Result<ResolutionLadder> {
        ResolutionLadder::parse(&self.ladder)
    }

    pub fn encoder_layers(&self) -> Result<Vec<EncoderLayer>> {
        parse_encoder(&self.encoder)
    }

    /// Encoder layer feeding each ladder level: the last layer whose output matches it.
    pub fn encoder_taps(&self) -> Result<Vec<usize>> {
        let layers = self.encoder_layers()?;
        let mut dims = Vec::with_capacity(layers.len());
        let (mut h, mut w) = (self.grid_height, self.grid_width);
        for l in &layers {
            h = (h - 1) / l.stride + 1;
            w = (w - 1) / l.stride + 1;
            dims.push((l.out_channels, h, w));
        }
        self.ladder()?
            .levels()
            .iter()
            .map(|lvl| {
                dims.iter()
                    .rposition(|d| d == lvl)
                    .ok_or_else(|| Error::Config(format!("no encoder layer produces ladder level {lvl:?}")))
            })
            .collect()
    }

    /// Metric side of the BEV square around each agent.
    pub fn grid_extent(&self) -> (f64, f64) {
        (self.grid_width as f64 * self.cell_size, self.grid_height as f64 * self.cell_size)
    }

    /// Cell size of a level with `width` columns.
    pub fn level_cell_size(&self, width: usize) -> f64 {
        self.grid_extent().0 / width as f64
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            delta_s: self.delta_s,
            delta_c: self.delta_c,
            min_cells: self.min_cells,
            mode: self.filter_mode,
            window: self.entropy_window,
        }
    }

    pub fn head(&self, cell_size: f64) -> HeadConfig {
        HeadConfig { score_threshold: self.score_threshold, nms_iou: self.nms_iou, cell_size, max_detections: self.max_detections }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents == 0 || self.n_agents > MAX_AGENTS {
            return bad(format!("n_agents must be in 1..={MAX_AGENTS}, got {}", self.n_agents));
        }
        if self.timesteps == 0 || self.timesteps > u32::MAX as usize {
            return bad(format!("timesteps must be positive, got {}", self.timesteps));
        }
        if self.grid_height == 0 || self.grid_width == 0 || self.height_slabs == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.grid_height > u16::MAX as usize || self.grid_width > u16::MAX as usize {
            return bad("grid dimensions exceed the wire format".into());
        }
        for (name, v) in [
            ("dt", self.dt),
            ("area_extent", self.area_extent),
            ("cell_size", self.cell_size),
            ("slab_height", self.slab_height),
            ("range_decay", self.range_decay),
            ("max_range", self.max_range),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.convoy_speed.is_finite() && self.point_budget.is_finite() && self.point_budget >= 0.0) {
            return bad("convoy_speed and point_budget must be finite, point_budget non-negative".into());
        }
        for (name, v) in [("delta_s", self.delta_s), ("delta_c", self.delta_c)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {v}"));
            }
        }
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return bad("iou_thresholds must be non-empty fractions in (0, 1]".into());
        }
        if self.entropy_window.is_multiple_of(2) {
            return bad(format!("entropy_window must be odd, got {}", self.entropy_window));
        }
        if self.query_hidden == 0 || self.edge_widths.is_empty() || self.edge_widths.contains(&0) {
            return bad("query_hidden and edge_widths must be positive".into());
        }
        let ladder = self.ladder()?;
        if ladder.levels().len() > u8::MAX as usize {
            return bad("too many ladder levels".into());
        }
        if ladder.levels().iter().any(|&(c, _, _)| c > u16::MAX as usize) {
            return bad("ladder channels exceed the wire format".into());
        }
        self.encoder_taps()?;
        let (gx, gy) = self.grid_extent();
        if self.area_extent < gx.max(gy) + 2.0 * KEEP_OUT_MARGIN {
            return bad(format!("area_extent {} too small for a {gx}x{gy} m grid", self.area_extent));
        }
        let capacity = self.object_capacity();
        if self.n_objects > capacity {
            return bad(format!("{} objects exceed the area capacity of {capacity}", self.n_objects));
        }
        Ok(())
    }

    /// Free area outside the fixed layout, one object per 25 m^2.
    pub fn object_capacity(&self) -> usize {
        let keep_out = self.keep_out_half();
        let free = self.area_extent * self.area_extent - 4.0 * keep_out * keep_out;
        (free.max(0.0) / 25.0).floor() as usize
    }

    /// Half side of the square around agent 0 reserved for the fixed layout.
    pub fn keep_out_half(&self) -> f64 {
        let (gx, gy) = self.grid_extent();
        gx.max(gy) / 2.0 + KEEP_OUT_MARGIN
    }
}

const KEEP_OUT_MARGIN: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder_taps().unwrap(), vec![3, 2]);
        assert_eq!(cfg.level_cell_size(8), 2.0);
        assert_eq!(cfg.level_cell_size(16), 1.0);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::from_toml_str("seed = 3\ndelta_s = 0.5\nfilter_mode = \"mean\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.delta_s, 0.5);
        assert_eq!(cfg.filter_mode, FilterMode::Mean);
        assert_eq!(ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn rejections() {
        for text in [
            "unknown_key = 1",
            "delta_s = 0.0",
            "delta_c = 1.5",
            "n_agents = 0",
            "ladder = \"64x8x8,32x16x16,16x32x32\"",
            "encoder = \"16:1,32:2\"",
            "entropy_window = 4",
            "n_objects = 100000",
            "seed = \"x\"",
            "iou_thresholds = []",
        ] {
            assert!(matches!(ScenarioConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn encoder_parsing() {
        assert_eq!(parse_encoder("8:1, 4:2").unwrap(), vec![
            EncoderLayer { out_channels: 8, stride: 1 },
            EncoderLayer { out_channels: 4, stride: 2 }
        ]);
        assert!(parse_encoder("8").is_err());
        assert!(parse_encoder("8:0").is_err());
        assert!(parse_encoder("").is_err());
    }
}
