//! Graph-based collaborative GRU: one fusion step per resolution level.
//!
//! ```text
//! h_hat = align(h, pose_delta)
//! R     = gate_reset(h_hat, F)
//! Z     = gate_update(h_hat, F)
//! h'    = h_hat * R
//! W_m   = edge([h'; F'_m; F])        for every stack member m (ego first)
//! Wn    = per-cell softmax over m
//! C     = sum_m Wn_m * F'_m
//! E     = Z * C + (1 - Z) * h_hat
//! h_new = conv3x3(E)
//! ```
//!
//! Parameters live under `gru.l{level}.{reset,update,hidden}` and `edge.l{level}.conv{1..4}`.

use crate::error::{Error, Result};
use crate::geometry::{warp_grid, Pose2};
use crate::tensor::{relu, sigmoid, sigmoid_scalar, softmax_over_stack, Conv2dLayer, FeatureGrid, ParamSet};

/// Per-cell collaboration weight for one stack member.
pub type EdgeWeightMap = FeatureGrid;

/// Hidden state of one ego agent across the resolution ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub agent_id: u16,
    pub hidden: Vec<FeatureGrid>,
    pub last_pose: Option<Pose2>,
    pub last_timestep: Option<i64>,
}

impl AgentState {
    /// Zero hidden state for `(channels, height, width)` per level.
    pub fn new(agent_id: u16, ladder: &[(usize, usize, usize)]) -> Self {
        AgentState {
            agent_id,
            hidden: ladder.iter().map(|&(c, h, w)| FeatureGrid::zeros(c, h, w)).collect(),
            last_pose: None,
            last_timestep: None,
        }
    }

    /// Motion since the last update, expressed as a transform from the previous
    /// frame into the frame at `pose`. Rejects gaps of more than one step.
    pub fn pose_delta(&self, t: i64, pose: &Pose2) -> Result<Pose2> {
        match (self.last_timestep, self.last_pose) {
            (None, _) | (_, None) => Ok(Pose2::IDENTITY),
            (Some(last), Some(prev)) => {
                if t != last + 1 {
                    return Err(Error::StaleState { agent: self.agent_id, last, requested: t });
                }
                Ok(crate::geometry::relative_pose(&prev, pose))
            }
        }
    }

    /// Commits new hidden grids after all levels have been stepped for `t`.
    pub fn commit(&mut self, t: i64, pose: Pose2, hidden: Vec<FeatureGrid>) -> Result<()> {
        if hidden.len() != self.hidden.len() {
            return Err(Error::shape("hidden level count changed"));
        }
        for (old, new) in self.hidden.iter().zip(&hidden) {
            old.check_same_dims(new, "hidden state")?;
        }
        self.hidden = hidden;
        self.last_pose = Some(pose);
        self.last_timestep = Some(t);
        Ok(())
    }
}

/// Gate `sigma(W * h + (1 - W) * f)` with `W = sigma(conv3x3([h; f]))`.
pub fn gate_forward(h: &FeatureGrid, f: &FeatureGrid, params: &ParamSet, gate_name: &str) -> Result<FeatureGrid> {
    h.check_same_dims(f, "gate operands")?;
    let c = h.channels();
    let conv = Conv2dLayer::from_params(params, gate_name, c, 2 * c, 3, 1)?;
    let w_ir = sigmoid(&conv.forward(&FeatureGrid::concat_channels(&[h, f])?)?);
    let mut out = w_ir;
    for ((o, &hv), &fv) in out.data_mut().iter_mut().zip(h.data()).zip(f.data()) {
        let w = *o;
        *o = sigmoid_scalar(w * hv + (1.0 - w) * fv);
    }
    Ok(out)
}

/// Edge encoder: four pointwise convolutions reducing `3C` channels to one, ReLU after each.
pub fn edge_weight(
    h_reset: &FeatureGrid,
    f_neighbor: &FeatureGrid,
    f_ego: &FeatureGrid,
    params: &ParamSet,
    prefix: &str,
) -> Result<EdgeWeightMap> {
    h_reset.check_same_dims(f_neighbor, "edge operands")?;
    h_reset.check_same_dims(f_ego, "edge operands")?;
    let mut x = FeatureGrid::concat_channels(&[h_reset, f_neighbor, f_ego])?;
    for i in 1..=4 {
        let name = format!("{prefix}.conv{i}");
        let out_c = if i == 4 {
            1
        } else {
            params.get(&format!("{name}.weight"))?.shape().first().copied().unwrap_or(0)
        };
        let conv = Conv2dLayer::from_params(params, &name, out_c, x.channels(), 1, 1)?;
        x = relu(&conv.forward(&x)?);
    }
    Ok(x)
}

/// Everything one fusion step produces.
#[derive(Clone, Debug)]
pub struct CollabOutput {
    /// Collaborative map.
    pub e: FeatureGrid,
    pub hidden: FeatureGrid,
    pub h_aligned: FeatureGrid,
    pub reset: FeatureGrid,
    pub update: FeatureGrid,
    pub aggregated: FeatureGrid,
    /// Normalized edge weights; ego first, then neighbors by ascending id. Empty without neighbors.
    pub weights: Vec<(u16, EdgeWeightMap)>,
}

/// One G-CGRU step. See [`collab_step_detailed`].
pub fn collab_step(
    state: &AgentState,
    f_ego: &FeatureGrid,
    neighbors: &[(u16, FeatureGrid)],
    pose_delta: &Pose2,
    params: &ParamSet,
    level: usize,
    cell_size: f64,
) -> Result<(FeatureGrid, FeatureGrid)> {
    let out = collab_step_detailed(state, f_ego, neighbors, pose_delta, params, level, cell_size)?;
    Ok((out.e, out.hidden))
}

/// One G-CGRU step at `level`.
///
/// Neighbor features must already be aligned to the ego frame. The ego's own
/// feature is a member of the softmax stack. With no neighbors the aggregate is
/// the zero grid. Neighbors are processed in ascending id order, so the result
/// does not depend on the order of `neighbors`.
pub fn collab_step_detailed(
    state: &AgentState,
    f_ego: &FeatureGrid,
    neighbors: &[(u16, FeatureGrid)],
    pose_delta: &Pose2,
    params: &ParamSet,
    level: usize,
    cell_size: f64,
) -> Result<CollabOutput> {
    let h = state
        .hidden
        .get(level)
        .ok_or_else(|| Error::shape(format!("agent {} has no hidden state for level {level}", state.agent_id)))?;
    h.check_same_dims(f_ego, "hidden vs ego feature")?;
    for (id, f) in neighbors {
        f.check_same_dims(f_ego, &format!("neighbor {id} feature"))?;
    }
    let mut order: Vec<&(u16, FeatureGrid)> = neighbors.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::shape("duplicate neighbor id"));
    }
    if order.iter().any(|(id, _)| *id == state.agent_id) {
        return Err(Error::shape("ego listed among its own neighbors"));
    }

    let prefix = format!("gru.l{level}");
    let h_aligned = warp_grid(h, pose_delta, cell_size);
    let reset = gate_forward(&h_aligned, f_ego, params, &format!("{prefix}.reset"))?;
    let update = gate_forward(&h_aligned, f_ego, params, &format!("{prefix}.update"))?;
    let h_reset = h_aligned.zip_map(&reset, |a, b| a * b)?;

    let (c, hh, ww) = f_ego.dims();
    let mut aggregated = FeatureGrid::zeros(c, hh, ww);
    let mut weights = Vec::new();
    if !order.is_empty() {
        let edge_prefix = format!("edge.l{level}");
        let mut members: Vec<(u16, &FeatureGrid)> = Vec::with_capacity(order.len() + 1);
        members.push((state.agent_id, f_ego));
        members.extend(order.iter().map(|(id, f)| (*id, f)));
        let raw = members
            .iter()
            .map(|(_, f)| edge_weight(&h_reset, f, f_ego, params, &edge_prefix))
            .collect::<Result<Vec<_>>>()?;
        let normalized = softmax_over_stack(&raw)?;
        let n = f_ego.plane_len();
        for ((_, f), wmap) in members.iter().zip(&normalized) {
            for ch in 0..c {
                let src = f.plane(ch);
                let dst = aggregated.plane_mut(ch);
                for i in 0..n {
                    dst[i] += wmap.data()[i] * src[i];
                }
            }
        }
        weights = members.iter().map(|(id, _)| *id).zip(normalized).collect();
    }

    let mut e = aggregated.clone();
    for ((ev, &z), &hv) in e.data_mut().iter_mut().zip(update.data()).zip(h_aligned.data()) {
        let cv = *ev;
        // rounding can push the blend a hair outside its operands
        let (lo, hi) = if cv <= hv { (cv, hv) } else { (hv, cv) };
        *ev = (z * cv + (1.0 - z) * hv).clamp(lo, hi);
    }
    let hidden_conv = Conv2dLayer::from_params(params, &format!("{prefix}.hidden"), c, c, 3, 1)?;
    let hidden = hidden_conv.forward(&e)?;
    Ok(CollabOutput { e, hidden, h_aligned, reset, update, aggregated, weights })
}
