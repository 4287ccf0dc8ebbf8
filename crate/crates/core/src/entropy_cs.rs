//! Two-stage entropy-based communication selection.
//!
//! A collaborator first ranks its own cells by local self-entropy of its query
//! matrix (self-select), drops out entirely if too few cells survive, then
//! re-ranks the survivors by cross-entropy against the ego's broadcast query
//! (cross-select). Only the finally selected cells are transmitted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{relu, sigmoid_scalar, Conv2dLayer, FeatureGrid, ParamSet};
use crate::wire::{PacketEntry, SparsePacket};

/// One-channel spatial compression of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMatrix {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl QueryMatrix {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "query {height}x{width} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("query contains non-finite values"));
        }
        Ok(QueryMatrix { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        QueryMatrix { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Zero-padded read.
    fn get_padded(&self, row: isize, col: isize) -> f64 {
        if row < 0 || col < 0 || row >= self.height as isize || col >= self.width as isize {
            0.0
        } else {
            self.data[row as usize * self.width + col as usize]
        }
    }

    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid::from_vec(1, self.height, self.width, self.data.clone())
            .expect("query dims are valid")
    }

    pub fn from_grid(grid: &FeatureGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::shape(format!("query must have one channel, got {}", grid.channels())));
        }
        QueryMatrix::new(grid.height(), grid.width(), grid.data().to_vec())
    }
}

/// Per-cell `p ln p` values; every entry lies in `[-1/e, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl EntropyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Builds a map from raw values. Used for thresholding arbitrary scores.
    pub fn from_values(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!("map {height}x{width} with {} values", data.len())));
        }
        Ok(EntropyMap { height, width, data })
    }
}

/// Boolean map of cells chosen for transmission, with a cached popcount.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl SelectionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("mask {height}x{width} with {} bits", bits.len())));
        }
        let count = bits.iter().filter(|&&b| b).count();
        Ok(SelectionMask { height, width, bits, count })
    }

    pub fn full(height: usize, width: usize) -> Self {
        SelectionMask { height, width, bits: vec![true; height * width], count: height * width }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        SelectionMask { height, width, bits: vec![false; height * width], count: 0 }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = row * self.width + col;
        if self.bits[i] != value {
            self.bits[i] = value;
            if value {
                self.count += 1;
            } else {
                self.count -= 1;
            }
        }
    }

    pub fn fraction(&self) -> f64 {
        self.count as f64 / self.bits.len() as f64
    }

    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Selected `(row, col)` pairs in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i / w, i % w))
    }
}

/// How a score map is cut into a selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Keep the top fraction of cells (ties at the threshold are all kept).
    #[default]
    TopFraction,
    /// Keep cells at or above the mean score; the fraction is ignored.
    Mean,
}

/// Query generator: two pointwise convolutions with ReLU after each.
///
/// Reads `{prefix}.conv1.*` (`[hidden, C, 1, 1]`) and `{prefix}.conv2.*` (`[1, hidden, 1, 1]`).
pub fn make_query(f: &FeatureGrid, params: &ParamSet, prefix: &str) -> Result<QueryMatrix> {
    let hidden = params.get(&format!("{prefix}.conv1.weight"))?.shape().first().copied().unwrap_or(0);
    let conv1 = Conv2dLayer::from_params(params, &format!("{prefix}.conv1"), hidden, f.channels(), 1, 1)?;
    let conv2 = Conv2dLayer::from_params(params, &format!("{prefix}.conv2"), 1, hidden, 1, 1)?;
    let x = relu(&conv1.forward(f)?);
    let q = relu(&conv2.forward(&x)?);
    QueryMatrix::from_grid(&q)
}

/// Local entropy of `k` against `q`: at each cell `p` is the mean of
/// `sigmoid(k(neighbor) - q(center))` over a zero-padded `window_m x window_n`
/// neighborhood, and the output is `p ln p`.
pub fn local_entropy(
    k: &QueryMatrix,
    q: &QueryMatrix,
    window_m: usize,
    window_n: usize,
) -> Result<EntropyMap> {
    if k.height != q.height || k.width != q.width {
        return Err(Error::shape(format!(
            "entropy operands {}x{} vs {}x{}",
            k.height, k.width, q.height, q.width
        )));
    }
    check_window(window_m, window_n)?;
    let data = (0..k.height * k.width)
        .map(|i| cell_entropy(k, q, i / k.width, i % k.width, window_m, window_n))
        .collect();
    Ok(EntropyMap { height: k.height, width: k.width, data })
}

fn check_window(window_m: usize, window_n: usize) -> Result<()> {
    if window_m.is_multiple_of(2) || window_n.is_multiple_of(2) {
        return Err(Error::shape(format!("entropy window must be odd, got {window_m}x{window_n}")));
    }
    Ok(())
}

fn cell_entropy(k: &QueryMatrix, q: &QueryMatrix, row: usize, col: usize, wm: usize, wn: usize) -> f64 {
    let center = q.get(row, col);
    let (hm, hn) = ((wm / 2) as isize, (wn / 2) as isize);
    let mut acc = 0.0;
    for dr in -hm..=hm {
        for dc in -hn..=hn {
            acc += sigmoid_scalar(k.get_padded(row as isize + dr, col as isize + dc) - center);
        }
    }
    let p = acc / (wm * wn) as f64;
    p * p.ln()
}

/// Index into the descending order used as the cut-off when keeping a
/// `delta` fraction of `n` values; clamped so `delta = 1` keeps everything.
fn cutoff_index(n: usize, delta: f64) -> usize {
    ((n as f64 * delta).floor() as usize).min(n.saturating_sub(1))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("selection fraction must be in (0, 1], got {delta}")));
    }
    Ok(())
}

/// Threshold over a set of candidate scores. Returns the cut-off value.
fn threshold_value(values: &mut [f64], delta: f64, mode: FilterMode) -> f64 {
    match mode {
        FilterMode::TopFraction => {
            values.sort_by(|a, b| b.total_cmp(a));
            values[cutoff_index(values.len(), delta)]
        }
        FilterMode::Mean => values.iter().sum::<f64>() / values.len() as f64,
    }
}

/// Keeps every cell whose score is at or above the top-`delta` cut-off.
///
/// The cut-off is the value at index `floor(H*W*delta)` of the descending sort
/// (clamped to the last index), so at least `floor(H*W*delta)` cells survive and
/// ties at the cut-off are all kept.
pub fn threshold_topk(map: &EntropyMap, delta: f64) -> Result<SelectionMask> {
    threshold_with_mode(map, delta, FilterMode::TopFraction)
}

pub fn threshold_with_mode(map: &EntropyMap, delta: f64, mode: FilterMode) -> Result<SelectionMask> {
    check_delta(delta)?;
    let mut sorted = map.data.clone();
    let thr = threshold_value(&mut sorted, delta, mode);
    let bits = map.data.iter().map(|&v| v >= thr).collect();
    SelectionMask::new(map.height, map.width, bits)
}

/// Self-select stage: threshold the collaborator's own query self-entropy.
pub fn self_select(m_k: &QueryMatrix, delta_s: f64) -> Result<SelectionMask> {
    self_select_with(m_k, &SelectionConfig { delta_s, ..SelectionConfig::default() })
}

pub fn self_select_with(m_k: &QueryMatrix, cfg: &SelectionConfig) -> Result<SelectionMask> {
    let map = local_entropy(m_k, m_k, cfg.window, cfg.window)?;
    threshold_with_mode(&map, cfg.delta_s, cfg.mode)
}

/// Cross-select stage over the self-selected candidates.
///
/// Entropy of the ego query `m_i` against the collaborator query `m_k` is
/// evaluated at candidate cells only; the cut-off index is
/// `floor(candidates * delta_c)` into their descending order. The result is
/// always a subset of `self_mask`.
pub fn cross_select(
    m_i: &QueryMatrix,
    m_k: &QueryMatrix,
    self_mask: &SelectionMask,
    delta_c: f64,
) -> Result<SelectionMask> {
    cross_select_with(m_i, m_k, self_mask, &SelectionConfig { delta_c, ..SelectionConfig::default() })
}

pub fn cross_select_with(
    m_i: &QueryMatrix,
    m_k: &QueryMatrix,
    self_mask: &SelectionMask,
    cfg: &SelectionConfig,
) -> Result<SelectionMask> {
    check_delta(cfg.delta_c)?;
    check_window(cfg.window, cfg.window)?;
    if m_i.height != m_k.height || m_i.width != m_k.width {
        return Err(Error::shape("cross-select query dims differ"));
    }
    if self_mask.height != m_k.height || self_mask.width != m_k.width {
        return Err(Error::shape("cross-select mask dims differ from queries"));
    }
    if self_mask.count == 0 {
        return Err(Error::Skip { count: 0, min_cells: 1 });
    }
    let candidates: Vec<(usize, f64)> = self_mask
        .cells()
        .map(|(r, c)| (r * m_k.width + c, cell_entropy(m_i, m_k, r, c, cfg.window, cfg.window)))
        .collect();
    let mut values: Vec<f64> = candidates.iter().map(|&(_, v)| v).collect();
    let thr = threshold_value(&mut values, cfg.delta_c, cfg.mode);
    let mut out = SelectionMask::empty(m_k.height, m_k.width);
    for (i, v) in candidates {
        if v >= thr {
            out.bits[i] = true;
            out.count += 1;
        }
    }
    Ok(out)
}

/// True when a self-selection is too small to be worth a cross stage.
pub fn should_skip(mask: &SelectionMask, min_cells: usize) -> bool {
    mask.count < min_cells
}

/// Selection knobs shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub delta_s: f64,
    pub delta_c: f64,
    /// A collaborator with fewer self-selected cells than this sends nothing.
    pub min_cells: usize,
    pub mode: FilterMode,
    /// Odd side length of the entropy neighborhood.
    pub window: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { delta_s: 1.0, delta_c: 1.0, min_cells: 1, mode: FilterMode::TopFraction, window: 3 }
    }
}

/// Outcome of running both stages for one (collaborator, ego) pair.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// The cross stage was closed; nothing is transmitted.
    Skipped { self_count: usize },
    Selected { self_mask: SelectionMask, mask: SelectionMask },
}

/// Runs self-select, the skip rule, then cross-select.
pub fn entropy_select(m_ego: &QueryMatrix, m_collab: &QueryMatrix, cfg: &SelectionConfig) -> Result<Selection> {
    let self_mask = self_select_with(m_collab, cfg)?;
    if should_skip(&self_mask, cfg.min_cells.max(1)) {
        return Ok(Selection::Skipped { self_count: self_mask.count });
    }
    let mask = cross_select_with(m_ego, m_collab, &self_mask, cfg)?;
    Ok(Selection::Selected { self_mask, mask })
}

/// Gathers the selected cells of `f` into a sparse packet (row-major order).
///
/// Routing fields of the header are left at zero for the caller to fill in.
pub fn gather_sparse(f: &FeatureGrid, mask: &SelectionMask) -> Result<SparsePacket> {
    if f.height() != mask.height || f.width() != mask.width {
        return Err(Error::shape(format!(
            "gather: grid {}x{} vs mask {}x{}",
            f.height(),
            f.width(),
            mask.height,
            mask.width
        )));
    }
    let entries = mask
        .cells()
        .map(|(r, c)| PacketEntry {
            row: r as u16,
            col: c as u16,
            values: (0..f.channels()).map(|ch| f.get(ch, r, c) as f32).collect(),
        })
        .collect();
    SparsePacket::new(0, 0, 0, 0, f.height(), f.width(), f.channels(), entries)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_query(rng: &mut ChaCha8Rng, h: usize, w: usize) -> QueryMatrix {
        QueryMatrix::from_fn(h, w, |_, _| rng.gen_range(-2.0..2.0))
    }

    /// Independent double loop over an explicitly padded copy.
    fn entropy_oracle(k: &QueryMatrix, q: &QueryMatrix) -> Vec<f64> {
        let (h, w) = (k.height(), k.width());
        let mut padded = vec![vec![0.0; w + 2]; h + 2];
        for r in 0..h {
            for c in 0..w {
                padded[r + 1][c + 1] = k.get(r, c);
            }
        }
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for pr in r..r + 3 {
                    for pc in c..c + 3 {
                        s += 1.0 / (1.0 + (-(padded[pr][pc] - q.get(r, c))).exp());
                    }
                }
                let p = s / 9.0;
                out.push(p * p.ln());
            }
        }
        out
    }

    fn oracle_select(values: &[f64], idx_base: usize, delta: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let i = ((idx_base as f64 * delta).floor() as usize).min(v.len() - 1);
        v[i]
    }

    #[test]
    fn query_zero_and_identity() {
        let mut p = ParamSet::new();
        p.insert("q.conv1.weight", Tensor::zeros(vec![4, 3, 1, 1])).unwrap();
        p.insert("q.conv1.bias", Tensor::zeros(vec![4])).unwrap();
        p.insert("q.conv2.weight", Tensor::zeros(vec![1, 4, 1, 1])).unwrap();
        let f = FeatureGrid::zeros(3, 4, 4);
        assert!(make_query(&f, &p, "q").unwrap().data().iter().all(|&v| v == 0.0));

        let mut id = ParamSet::new();
        id.insert("q.conv1.weight", Tensor::filled(vec![1, 1, 1, 1], 1.0)).unwrap();
        id.insert("q.conv2.weight", Tensor::filled(vec![1, 1, 1, 1], 1.0)).unwrap();
        let f = FeatureGrid::from_fn(1, 3, 3, |_, y, x| y as f64 - x as f64);
        let q = make_query(&f, &id, "q").unwrap();
        for (a, b) in q.data().iter().zip(f.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn query_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        p.insert_uniform("q.conv1.weight", vec![6, 8, 1, 1], 8, &mut rng).unwrap();
        p.insert_uniform("q.conv1.bias", vec![6], 8, &mut rng).unwrap();
        p.insert_uniform("q.conv2.weight", vec![1, 6, 1, 1], 6, &mut rng).unwrap();
        p.insert_uniform("q.conv2.bias", vec![1], 6, &mut rng).unwrap();
        let f = FeatureGrid::from_fn(8, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let q = make_query(&f, &p, "q").unwrap();
        let w1 = p.get("q.conv1.weight").unwrap().data();
        let b1 = p.get("q.conv1.bias").unwrap().data();
        let w2 = p.get("q.conv2.weight").unwrap().data();
        let b2 = p.get("q.conv2.bias").unwrap().data();
        for y in 0..4 {
            for x in 0..4 {
                let hidden: Vec<f64> = (0..6)
                    .map(|o| (b1[o] + (0..8).map(|i| w1[o * 8 + i] * f.get(i, y, x)).sum::<f64>()).max(0.0))
                    .collect();
                let want = (b2[0] + (0..6).map(|o| w2[o] * hidden[o]).sum::<f64>()).max(0.0);
                assert!((q.get(y, x) - want).abs() < 1e-12);
                assert!(q.get(y, x) >= 0.0);
            }
        }
        assert!(matches!(make_query(&FeatureGrid::zeros(3, 2, 2), &p, "q"), Err(Error::Param(_))));
        assert!(matches!(make_query(&f, &p, "missing"), Err(Error::Param(_))));
    }

    #[test]
    fn entropy_examples() {
        let z = QueryMatrix::from_fn(4, 4, |_, _| 0.0);
        let e = local_entropy(&z, &z, 3, 3).unwrap();
        let want = 0.5 * 0.5f64.ln();
        assert!(e.data().iter().all(|&v| (v - want).abs() < 1e-15));
        assert!((want + 0.34657359027997264).abs() < 1e-15);

        let c = QueryMatrix::from_fn(3, 3, |_, _| 1.7);
        let e = local_entropy(&c, &c, 1, 1).unwrap();
        assert!(e.data().iter().all(|&v| (v - want).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_query(&mut rng, 4, 4);
        let q = random_query(&mut rng, 4, 4);
        let e = local_entropy(&k, &q, 3, 3).unwrap();
        for (a, b) in e.data().iter().zip(entropy_oracle(&k, &q)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(local_entropy(&k, &random_query(&mut rng, 3, 4), 3, 3).is_err());
        assert!(local_entropy(&k, &q, 2, 3).is_err());
    }

    #[test]
    fn threshold_examples() {
        let m = EntropyMap::from_values(2, 2, vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let s = threshold_topk(&m, 0.5).unwrap();
        assert_eq!(s.bits(), &[true, true, true, false]);
        assert_eq!(threshold_topk(&m, 1.0).unwrap().count(), 4);
        let flat = EntropyMap::from_values(3, 3, vec![-0.2; 9]).unwrap();
        assert_eq!(threshold_topk(&flat, 0.1).unwrap().count(), 9);
        assert!(threshold_topk(&m, 0.0).is_err());
        assert!(threshold_topk(&m, 1.5).is_err());

        let mean = threshold_with_mode(&m, 0.1, FilterMode::Mean).unwrap();
        assert_eq!(mean.bits(), &[true, true, false, false]);
    }

    #[test]
    fn self_select_examples() {
        let c = QueryMatrix::from_fn(6, 6, |_, _| 0.8);
        // border cells see zero padding, so a constant query is only uniform with a 1x1 window
        let cfg = SelectionConfig { delta_s: 0.3, window: 1, ..Default::default() };
        assert_eq!(self_select_with(&c, &cfg).unwrap().count(), 36);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_query(&mut rng, 8, 8);
        assert_eq!(self_select(&q, 1.0).unwrap().count(), 64);

        let s = self_select(&q, 0.25).unwrap();
        let ent = entropy_oracle(&q, &q);
        let thr = oracle_select(&ent, 64, 0.25);
        for (i, &b) in s.bits().iter().enumerate() {
            assert_eq!(b, ent[i] >= thr);
        }
        assert_eq!(s.count(), 17);
    }

    #[test]
    fn cross_select_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mi = random_query(&mut rng, 8, 8);
        let mk = random_query(&mut rng, 8, 8);
        let full = SelectionMask::full(8, 8);
        assert_eq!(cross_select(&mi, &mk, &full, 1.0).unwrap(), full);

        let mut single = SelectionMask::empty(8, 8);
        single.set(3, 5, true);
        for dc in [0.1, 0.5, 1.0] {
            assert_eq!(cross_select(&mi, &mk, &single, dc).unwrap(), single);
        }

        let self_mask = self_select(&mk, 0.5).unwrap();
        let cross = cross_select(&mi, &mk, &self_mask, 0.5).unwrap();
        // two-stage oracle
        let cross_ent = entropy_oracle(&mi, &mk);
        let cand: Vec<f64> = (0..64).filter(|&i| self_mask.bits()[i]).map(|i| cross_ent[i]).collect();
        let thr = oracle_select(&cand, cand.len(), 0.5);
        for i in 0..64 {
            assert_eq!(cross.bits()[i], self_mask.bits()[i] && cross_ent[i] >= thr);
        }
        assert!(cross.is_subset_of(&self_mask));
        assert_eq!(self_mask.count(), 33);
        assert_eq!(cross.count(), 17);

        let empty = SelectionMask::empty(8, 8);
        assert!(matches!(cross_select(&mi, &mk, &empty, 0.5), Err(Error::Skip { .. })));
    }

    #[test]
    fn skip_rule() {
        assert!(should_skip(&SelectionMask::empty(2, 2), 1));
        assert!(!should_skip(&SelectionMask::full(2, 2), 1));
        let mut m = SelectionMask::empty(3, 3);
        for i in 0..3 {
            m.set(0, i, true);
        }
        assert!(should_skip(&m, 4));
        let q = QueryMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let cfg = SelectionConfig { delta_s: 0.1, min_cells: 100, ..Default::default() };
        assert!(matches!(entropy_select(&q, &q, &cfg).unwrap(), Selection::Skipped { .. }));
    }

    #[test]
    fn gather_examples() {
        let f = FeatureGrid::from_fn(3, 4, 5, |c, y, x| (c * 100 + y * 10 + x) as f64 * 0.5);
        assert!(gather_sparse(&f, &SelectionMask::empty(4, 5)).unwrap().entries().is_empty());
        let all = gather_sparse(&f, &SelectionMask::full(4, 5)).unwrap();
        assert_eq!(all.entries().len(), 20);
        let mut one = SelectionMask::empty(4, 5);
        one.set(2, 3, true);
        let p = gather_sparse(&f, &one).unwrap();
        assert_eq!(p.entries().len(), 1);
        let e = &p.entries()[0];
        assert_eq!((e.row, e.col), (2, 3));
        let want: Vec<f32> = f.cell(2, 3).iter().map(|&v| v as f32).collect();
        assert_eq!(e.values, want);
        assert!(gather_sparse(&f, &SelectionMask::full(4, 4)).is_err());
    }

    fn tie_free_map(seed: u64, h: usize, w: usize) -> EntropyMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| -rng.gen_range(0.0..0.36)).collect();
        EntropyMap::from_values(h, w, data).unwrap()
    }

    proptest! {
        #[test]
        fn topk_monotone_in_delta(seed in any::<u64>(), a in 0.01..1.0f64, b in 0.01..1.0f64) {
            let m = tie_free_map(seed, 7, 9);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(threshold_topk(&m, lo).unwrap().is_subset_of(&threshold_topk(&m, hi).unwrap()));
        }

        #[test]
        fn entropy_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = QueryMatrix::from_fn(5, 5, |_, _| rng.gen_range(-30.0..30.0));
            let q = QueryMatrix::from_fn(5, 5, |_, _| rng.gen_range(-30.0..30.0));
            for v in local_entropy(&k, &q, 3, 3).unwrap().data() {
                prop_assert!(*v >= -1.0 / std::f64::consts::E - 1e-15 && *v <= 0.0);
            }
        }

        #[test]
        fn cross_subset_of_self(seed in any::<u64>(), ds in 0.05..1.0f64, dc in 0.05..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mi = random_query(&mut rng, 6, 6);
            let mk = random_query(&mut rng, 6, 6);
            let s = self_select(&mk, ds).unwrap();
            let c = cross_select(&mi, &mk, &s, dc).unwrap();
            prop_assert!(c.is_subset_of(&s));
            prop_assert!(c.count() >= 1);
        }
    }
}
