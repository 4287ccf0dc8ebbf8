//! Per-timestep orchestration: encode, select, transmit, fuse, reconstruct, detect.

use crate::entropy_cs::{entropy_select, gather_sparse, make_query, QueryMatrix, Selection, SelectionMask};
use crate::error::Result;
use crate::gcgru::{collab_step_detailed, AgentState};
use crate::geometry::{relative_pose, warp_grid, Pose2};
use crate::interpolation::{lambda_from_params, rbf_interpolate_with, scatter_to_grid};
use crate::metrics::{build_frames, evaluate, to_jsonl, DetectionFrame, GtFrame, MetricsReport};
use crate::mgfe::{detect_head, mgfe_forward};
use crate::tensor::{FeatureGrid, ParamSet};
use crate::wire::{self, CommLedger, SparsePacket, BROADCAST};

use super::config::ScenarioConfig;
use super::model::encoder_forward;
use super::scene::{gen_scenario, ground_truth, rasterize_bev};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// `false` sends every cell of every level and no queries.
    pub selection: bool,
    /// Keep the encoded bytes of every feature packet.
    pub keep_packets: bool,
    /// Worker threads for per-agent work; 0 picks the machine's parallelism.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { selection: true, keep_packets: false, threads: 0 }
    }
}

/// Outcome of one (collaborator -> ego, level) exchange at one tick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferStat {
    pub timestep: u32,
    pub sender: u16,
    pub receiver: u16,
    pub level: u8,
    /// Cells surviving the self stage.
    pub self_cells: usize,
    /// Cells transmitted; zero when skipped.
    pub cells: usize,
    pub total_cells: usize,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpedPacket {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeReport {
    pub detections: Vec<DetectionFrame>,
    pub ground_truth: Vec<GtFrame>,
    pub ledger: CommLedger,
    pub metrics: MetricsReport,
    pub transfers: Vec<TransferStat>,
    pub packets: Vec<DumpedPacket>,
}

impl EpisodeReport {
    pub fn detections_jsonl(&self) -> String {
        to_jsonl(&self.detections)
    }

    pub fn ground_truth_jsonl(&self) -> String {
        to_jsonl(&self.ground_truth)
    }

    pub fn metrics_csv(&self) -> String {
        self.metrics.to_csv()
    }

    pub fn ledger_csv(&self) -> String {
        self.ledger.to_csv()
    }

    pub fn communication_volume(&self) -> Result<f64> {
        wire::communication_volume(&self.ledger)
    }

    /// Mean share of cells sent per non-skipped transfer.
    pub fn selected_fraction(&self) -> Option<f64> {
        let sent: Vec<_> = self.transfers.iter().filter(|s| !s.skipped).collect();
        if sent.is_empty() {
            return None;
        }
        Some(sent.iter().map(|s| s.cells as f64 / s.total_cells as f64).sum::<f64>() / sent.len() as f64)
    }

    pub fn mean_feature_scalars_per_transfer(&self) -> Option<f64> {
        self.ledger.mean_feature_scalars_per_transfer()
    }
}

/// A feature packet on its way to an ego, plus its decoded copy.
struct Delivery {
    stat: TransferStat,
    sent: Option<(SparsePacket, SparsePacket, Vec<u8>)>,
}

struct EgoStep {
    deliveries: Vec<Delivery>,
    detection: DetectionFrame,
}

struct AgentView {
    feats: Vec<FeatureGrid>,
    queries: Vec<QueryMatrix>,
}

pub fn run_episode(cfg: &ScenarioConfig, params: &ParamSet) -> Result<EpisodeReport> {
    run_episode_with(cfg, params, &RunOptions::default())
}

pub fn run_episode_with(cfg: &ScenarioConfig, params: &ParamSet, opts: &RunOptions) -> Result<EpisodeReport> {
    cfg.validate()?;
    let frames = gen_scenario(cfg)?;
    let ladder = cfg.ladder()?;
    let levels = ladder.levels().to_vec();
    let workers = worker_count(opts.threads, cfg.n_agents);
    let mut states: Vec<AgentState> = (0..cfg.n_agents).map(|a| AgentState::new(a as u16, &levels)).collect();
    let mut ledger = CommLedger::new();
    let mut detections = Vec::new();
    let mut transfers = Vec::new();
    let mut packets = Vec::new();

    for frame in &frames {
        let t = frame.timestep;
        let mut agents: Vec<usize> = (0..cfg.n_agents).collect();
        let views = parallel_map(&mut agents, workers, |_, &mut a| -> Result<AgentView> {
            let bev = rasterize_bev(&frame.clouds[a], cfg);
            let feats = encoder_forward(&bev, params, cfg)?;
            let queries = if opts.selection {
                feats
                    .iter()
                    .enumerate()
                    .map(|(j, f)| make_query(f, params, &format!("query.l{j}")))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(AgentView { feats, queries })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        if opts.selection {
            for (a, view) in views.iter().enumerate() {
                for (j, q) in view.queries.iter().enumerate() {
                    let (c, h, w) = levels[j];
                    let announce = SparsePacket::new(a as u16, BROADCAST, t as u32, j as u8, h, w, c, Vec::new())?;
                    ledger.record_transfer(a as u16, BROADCAST, t as u32, &announce, q.len() as u64);
                }
            }
        }

        let steps = parallel_map(&mut states, workers, |i, state| ego_step(cfg, params, opts, frame.timestep, &frame.poses, &views, i, state))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        for step in steps {
            for d in step.deliveries {
                if let Some((packet, decoded, bytes)) = d.sent {
                    ledger.record_transfer(packet.sender_id(), packet.receiver_id(), t as u32, &packet, 0);
                    ledger.record_decoded(&decoded);
                    if opts.keep_packets {
                        packets.push(DumpedPacket {
                            name: format!("t{t:03}_l{}_{}to{}.umcw", d.stat.level, d.stat.sender, d.stat.receiver),
                            bytes,
                        });
                    }
                }
                transfers.push(d.stat);
            }
            detections.push(step.detection);
        }
    }

    let gt = ground_truth(&frames, cfg);
    let metrics = evaluate(&build_frames(&detections, &gt, cfg.tau), &cfg.iou_thresholds);
    Ok(EpisodeReport { detections, ground_truth: gt, ledger, metrics, transfers, packets })
}

#[allow(clippy::too_many_arguments)]
fn ego_step(
    cfg: &ScenarioConfig,
    params: &ParamSet,
    opts: &RunOptions,
    t: usize,
    poses: &[Pose2],
    views: &[AgentView],
    ego: usize,
    state: &mut AgentState,
) -> Result<EgoStep> {
    let levels = cfg.ladder()?.levels().to_vec();
    let lambda = lambda_from_params(params)?;
    let sel = cfg.selection();
    let mut deliveries = Vec::new();
    let mut collab = Vec::with_capacity(levels.len());
    let mut hidden = Vec::with_capacity(levels.len());
    let pose_delta = state.pose_delta(t as i64, &poses[ego])?;

    for (j, &(_, h, w)) in levels.iter().enumerate() {
        let cs = cfg.level_cell_size(w);
        let mut neighbors = Vec::new();
        for k in (0..views.len()).filter(|&k| k != ego) {
            let mut stat = TransferStat {
                timestep: t as u32,
                sender: k as u16,
                receiver: ego as u16,
                level: j as u8,
                self_cells: h * w,
                cells: 0,
                total_cells: h * w,
                skipped: false,
            };
            let mask = if opts.selection {
                let ego_in_k = warp_grid(&views[ego].queries[j].to_grid(), &relative_pose(&poses[ego], &poses[k]), cs);
                match entropy_select(&QueryMatrix::from_grid(&ego_in_k)?, &views[k].queries[j], &sel)? {
                    Selection::Skipped { self_count } => {
                        stat.self_cells = self_count;
                        stat.skipped = true;
                        deliveries.push(Delivery { stat, sent: None });
                        continue;
                    }
                    Selection::Selected { self_mask, mask } => {
                        stat.self_cells = self_mask.count();
                        mask
                    }
                }
            } else {
                SelectionMask::full(h, w)
            };
            stat.cells = mask.count();
            let packet = gather_sparse(&views[k].feats[j], &mask)?.with_route(k as u16, ego as u16, t as u32, j as u8);
            let bytes = wire::encode(&packet)?;
            let decoded = wire::decode(&bytes)?;
            let dense = rbf_interpolate_with(&scatter_to_grid(&decoded)?, cfg.interp_radius, lambda, cfg.zero_policy)?;
            neighbors.push((k as u16, warp_grid(&dense, &relative_pose(&poses[k], &poses[ego]), cs)));
            deliveries.push(Delivery { stat, sent: Some((packet, decoded, bytes)) });
        }
        let out = collab_step_detailed(state, &views[ego].feats[j], &neighbors, &pose_delta, params, j, cs)?;
        collab.push(out.e);
        hidden.push(out.hidden);
    }
    state.commit(t as i64, poses[ego], hidden)?;

    let d = mgfe_forward(&views[ego].feats, &collab, params)?;
    let finest_cs = cfg.level_cell_size(levels[levels.len() - 1].2);
    let head = detect_head(&d, params, &cfg.head(finest_cs))?;
    Ok(EgoStep { deliveries, detection: DetectionFrame::new(t as u64, ego as u16, &head.decoded) })
}

fn worker_count(requested: usize, items: usize) -> usize {
    let n = if requested == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        requested
    };
    n.clamp(1, items.max(1))
}

/// Applies `f` to every item on up to `workers` scoped threads; results keep item order.
fn parallel_map<T: Send, R: Send>(
    items: &mut [T],
    workers: usize,
    f: impl Fn(usize, &mut T) -> R + Sync,
) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks_mut(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter_mut().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Vec<R>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
