//! Dense reconstruction of sparsely transmitted feature maps.
//!
//! Received cells are kept as-is. Every other cell becomes an RBF-weighted
//! average over its square neighborhood of radius `r` (Chebyshev ball, center
//! excluded), with weights `exp(-lambda^2 * |p - s|^2)`. Unobserved neighbors
//! take part as zeros unless [`ZeroPolicy::Exclude`] is chosen.

use serde::{Deserialize, Serialize};

use crate::entropy_cs::SelectionMask;
use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, ParamSet};
use crate::wire::SparsePacket;

/// Radius used by the pipeline.
pub const DEFAULT_RADIUS: usize = 7;
/// Kernel sharpness when the parameter set carries no `interp.lambda`.
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const LAMBDA_PARAM: &str = "interp.lambda";

/// A grid plus the cells that were actually observed. Unobserved cells are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGrid {
    grid: FeatureGrid,
    mask: SelectionMask,
}

impl MaskedGrid {
    pub fn new(mut grid: FeatureGrid, mask: SelectionMask) -> Result<Self> {
        if grid.height() != mask.height() || grid.width() != mask.width() {
            return Err(Error::shape("masked grid: mask dims differ from grid"));
        }
        let n = grid.plane_len();
        for c in 0..grid.channels() {
            for (i, v) in grid.plane_mut(c).iter_mut().enumerate().take(n) {
                if !mask.bits()[i] {
                    *v = 0.0;
                }
            }
        }
        Ok(MaskedGrid { grid, mask })
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.grid
    }

    pub fn mask(&self) -> &SelectionMask {
        &self.mask
    }

    pub fn into_parts(self) -> (FeatureGrid, SelectionMask) {
        (self.grid, self.mask)
    }
}

/// Materializes a received packet: entry cells filled, everything else zero.
pub fn scatter_to_grid(p: &SparsePacket) -> Result<MaskedGrid> {
    let (h, w, c) = (p.height(), p.width(), p.channels());
    let mut grid = FeatureGrid::zeros(c, h, w);
    let mut mask = SelectionMask::empty(h, w);
    for e in p.entries() {
        let (r, col) = (e.row as usize, e.col as usize);
        if r >= h || col >= w || e.values.len() != c {
            return Err(Error::shape(format!("packet entry ({r}, {col}) does not fit {c}x{h}x{w}")));
        }
        for (ch, &v) in e.values.iter().enumerate() {
            grid.set(ch, r, col, v as f64);
        }
        mask.set(r, col, true);
    }
    Ok(MaskedGrid { grid, mask })
}

/// Whether unobserved neighbors contribute zero-valued samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroPolicy {
    #[default]
    Participate,
    Exclude,
}

pub fn lambda_from_params(params: &ParamSet) -> Result<f64> {
    Ok(params.scalar_or(LAMBDA_PARAM, DEFAULT_LAMBDA)?)
}

pub fn rbf_interpolate(mg: &MaskedGrid, radius: usize, lambda: f64) -> Result<FeatureGrid> {
    rbf_interpolate_with(mg, radius, lambda, ZeroPolicy::Participate)
}

pub fn rbf_interpolate_with(
    mg: &MaskedGrid,
    radius: usize,
    lambda: f64,
    zeros: ZeroPolicy,
) -> Result<FeatureGrid> {
    if radius == 0 {
        return Err(Error::Config("interpolation radius must be >= 1".into()));
    }
    if !lambda.is_finite() {
        return Err(Error::Config(format!("interpolation lambda must be finite, got {lambda}")));
    }
    let (channels, h, w) = mg.grid.dims();
    let mut out = mg.grid.clone();
    if mg.mask.count() == h * w {
        return Ok(out);
    }
    let r = radius as isize;
    let lam2 = lambda * lambda;
    let mut participants: Vec<(usize, f64)> = Vec::with_capacity((2 * radius + 1).pow(2));
    let mut acc = vec![0.0; channels];
    for row in 0..h {
        for col in 0..w {
            if mg.mask.get(row, col) {
                continue;
            }
            participants.clear();
            for dy in -r..=r {
                let sy = row as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = col as isize + dx;
                    if (dy == 0 && dx == 0) || sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let idx = sy as usize * w + sx as usize;
                    if zeros == ZeroPolicy::Exclude && !mg.mask.bits()[idx] {
                        continue;
                    }
                    participants.push((idx, (dy * dy + dx * dx) as f64));
                }
            }
            if participants.is_empty() {
                continue;
            }
            // weights relative to the nearest participant; the ratio is unchanged
            // and large lambda cannot underflow every term to zero
            let d2_min = participants.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let mut denom = 0.0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(idx, d2) in &participants {
                let wt = (-lam2 * (d2 - d2_min)).exp();
                denom += wt;
                if mg.mask.bits()[idx] {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wt * mg.grid.plane(c)[idx];
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(c, row, col, a / denom);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_cs::gather_sparse;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn masked(grid: FeatureGrid, observed: &[(usize, usize)]) -> MaskedGrid {
        let mut mask = SelectionMask::empty(grid.height(), grid.width());
        for &(r, c) in observed {
            mask.set(r, c, true);
        }
        MaskedGrid::new(grid, mask).unwrap()
    }

    #[test]
    fn scatter_examples() {
        let empty = SparsePacket::new(0, 0, 0, 0, 3, 4, 2, vec![]).unwrap();
        let mg = scatter_to_grid(&empty).unwrap();
        assert_eq!(mg.grid(), &FeatureGrid::zeros(2, 3, 4));
        assert_eq!(mg.mask().count(), 0);

        // values exactly representable in f32 survive the full round trip unchanged
        let f = FeatureGrid::from_fn(2, 3, 4, |c, y, x| (c * 12 + y * 4 + x) as f64 * 0.25);
        let full = gather_sparse(&f, &SelectionMask::full(3, 4)).unwrap();
        let mg = scatter_to_grid(&full).unwrap();
        assert_eq!(mg.grid(), &f);
        assert_eq!(mg.mask().count(), 12);

        let g = FeatureGrid::from_fn(2, 3, 4, |c, _, _| 0.1 + c as f64);
        let mut one = SelectionMask::empty(3, 4);
        one.set(0, 0, true);
        let mg = scatter_to_grid(&gather_sparse(&g, &one).unwrap()).unwrap();
        assert_eq!(mg.grid().get(0, 0, 0), 0.1f32 as f64);
        assert_eq!(mg.grid().get(1, 0, 0), 1.1f32 as f64);
        assert_eq!(mg.grid().data().iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn full_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = FeatureGrid::from_fn(3, 5, 5, |_, _, _| rng.gen_range(-1.0..1.0));
        let mg = MaskedGrid::new(g.clone(), SelectionMask::full(5, 5)).unwrap();
        assert_eq!(rbf_interpolate(&mg, 7, 1.0).unwrap(), g);
    }

    #[test]
    fn center_of_constant_ring() {
        let v = 2.5;
        let g = FeatureGrid::filled(1, 3, 3, v);
        let ring: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).filter(|&p| p != (1, 1)).collect();
        let mg = masked(g, &ring);
        for radius in [1, 7] {
            let out = rbf_interpolate(&mg, radius, 1.0).unwrap();
            assert!((out.get(0, 1, 1) - v).abs() < 1e-15);
        }
    }

    #[test]
    fn two_term_kernel() {
        // 1x3 row: cell 0 unobserved, neighbors at distance 1 and 2
        let (a, b) = (3.0, -1.0);
        let g = FeatureGrid::from_vec(1, 1, 3, vec![0.0, a, b]).unwrap();
        let mg = masked(g, &[(0, 1), (0, 2)]);
        for lambda in [0.3, 1.0, 1.7] {
            let out = rbf_interpolate(&mg, 7, lambda).unwrap();
            let (w1, w2) = ((-lambda * lambda).exp(), (-4.0 * lambda * lambda).exp());
            let want = (w1 * a + w2 * b) / (w1 + w2);
            assert!((out.get(0, 0, 0) - want).abs() < 1e-12);
            assert_eq!(out.get(0, 0, 1), a);
        }
    }

    #[test]
    fn large_lambda_converges_to_nearest_mean() {
        let g = FeatureGrid::from_fn(1, 5, 5, |_, y, x| (y * 5 + x) as f64);
        // (2,2) unobserved; its 4-neighbours are observed, so are a few farther cells
        let observed = [(1, 2), (3, 2), (2, 1), (2, 3), (0, 0), (4, 4), (1, 1)];
        let mg = masked(g.clone(), &observed);
        let out = rbf_interpolate_with(&mg, 7, 50.0, ZeroPolicy::Exclude).unwrap();
        let want = (g.get(0, 1, 2) + g.get(0, 3, 2) + g.get(0, 2, 1) + g.get(0, 2, 3)) / 4.0;
        assert!((out.get(0, 2, 2) - want).abs() < 1e-6);
    }

    #[test]
    fn exclude_policy_ignores_unobserved() {
        let g = FeatureGrid::from_vec(1, 1, 3, vec![0.0, 0.0, 4.0]).unwrap();
        let mg = masked(g, &[(0, 2)]);
        let out = rbf_interpolate_with(&mg, 7, 1.0, ZeroPolicy::Exclude).unwrap();
        assert!((out.get(0, 0, 0) - 4.0).abs() < 1e-12);
        let diluted = rbf_interpolate(&mg, 7, 1.0).unwrap();
        assert!(diluted.get(0, 0, 0) < 4.0 && diluted.get(0, 0, 0) > 0.0);
    }

    #[test]
    fn bad_arguments() {
        let mg = masked(FeatureGrid::zeros(1, 2, 2), &[]);
        assert!(rbf_interpolate(&mg, 0, 1.0).is_err());
        assert!(rbf_interpolate(&mg, 1, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn convex_bound_and_observed_cells(seed in any::<u64>(), radius in 1usize..5, lambda in 0.1..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = FeatureGrid::from_fn(2, 6, 7, |_, _, _| rng.gen_range(-3.0..3.0));
            let bits: Vec<bool> = (0..42).map(|_| rng.gen_bool(0.4)).collect();
            let mask = SelectionMask::new(6, 7, bits).unwrap();
            let mg = MaskedGrid::new(g, mask.clone()).unwrap();
            let out = rbf_interpolate(&mg, radius, lambda).unwrap();
            for c in 0..2 {
                for y in 0..6 {
                    for x in 0..7 {
                        if mask.get(y, x) {
                            prop_assert_eq!(out.get(c, y, x), mg.grid().get(c, y, x));
                            continue;
                        }
                        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                        for sy in y.saturating_sub(radius)..(y + radius + 1).min(6) {
                            for sx in x.saturating_sub(radius)..(x + radius + 1).min(7) {
                                if (sy, sx) != (y, x) {
                                    let v = mg.grid().get(c, sy, sx);
                                    lo = lo.min(v);
                                    hi = hi.max(v);
                                }
                            }
                        }
                        let v = out.get(c, y, x);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
