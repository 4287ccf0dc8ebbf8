use super::{FeatureGrid, ParamSet, Tensor};
use crate::error::{Error, ParamError, Result};

/// Cross-correlation with zero padding (the deep-learning convention, no kernel flip).
///
/// `weights` has shape `[out_c, in_c, kh, kw]`, `bias` length `out_c`.
pub fn conv2d(
    input: &FeatureGrid,
    weights: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<FeatureGrid> {
    let [out_c, in_c, kh, kw] = match *weights.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref other => return Err(Error::shape(format!("conv weights must be rank 4, got {other:?}"))),
    };
    if in_c != input.channels() {
        return Err(Error::shape(format!(
            "conv expects {in_c} input channels, grid has {}",
            input.channels()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("conv kernel must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::shape("conv stride must be positive"));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(Error::shape(format!("conv bias length {} != {out_c}", b.len())));
        }
    }
    let (h, w) = (input.height(), input.width());
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(format!("conv kernel {kh}x{kw} larger than padded input {h}x{w}")));
    }
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;
    let mut out = FeatureGrid::zeros(out_c, out_h, out_w);
    let wdata = weights.data();

    // output columns whose tap `kx` lands inside the input row
    let col_range = |kx: usize| {
        let lo = padding.saturating_sub(kx).div_ceil(stride);
        let hi = ((w + padding).saturating_sub(kx)).div_ceil(stride).min(out_w);
        (lo, hi.max(lo))
    };
    for oc in 0..out_c {
        let plane = out.plane_mut(oc);
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for ic in 0..in_c {
            let src = input.plane(ic);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdata[((oc * in_c + ic) * kh + ky) * kw + kx];
                    let (lo, hi) = col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * out_w + lo..oy * out_w + hi];
                        let first = lo * stride + kx - padding;
                        if stride == 1 {
                            for (d, &v) in dst.iter_mut().zip(&src_row[first..first + (hi - lo)]) {
                                *d += wv * v;
                            }
                        } else {
                            for (d, &v) in dst.iter_mut().zip(src_row[first..].iter().step_by(stride)) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A named convolution pulled out of a [`ParamSet`]: `{prefix}.weight` plus optional `{prefix}.bias`.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// Looks up a conv layer and checks its shape against `[out_c, in_c, k, k]`.
    pub fn from_params(
        params: &ParamSet,
        prefix: &str,
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self, ParamError> {
        let weight_name = format!("{prefix}.weight");
        let weight = params.get_shaped(&weight_name, &[out_c, in_c, kernel, kernel])?.clone();
        let bias_name = format!("{prefix}.bias");
        let bias = if params.contains(&bias_name) {
            Some(params.get_shaped(&bias_name, &[out_c])?.data().to_vec())
        } else {
            None
        };
        Ok(Conv2dLayer { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, input: &FeatureGrid) -> Result<FeatureGrid> {
        conv2d(input, &self.weight, self.bias.as_deref(), self.stride, self.padding)
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(input: &FeatureGrid) -> FeatureGrid {
    input.map(sigmoid_scalar)
}

pub fn relu(input: &FeatureGrid) -> FeatureGrid {
    input.map(|v| v.max(0.0))
}

/// Max over channels, keeping a single channel.
pub fn channel_max(input: &FeatureGrid) -> FeatureGrid {
    let mut out = FeatureGrid::zeros(1, input.height(), input.width());
    out.data_mut().copy_from_slice(input.plane(0));
    for c in 1..input.channels() {
        for (o, &v) in out.data_mut().iter_mut().zip(input.plane(c)) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

const L2NORM_EPS: f64 = 1e-10;

/// Per-pixel L2 normalization across channels followed by a per-channel scale.
pub fn l2norm_channels(input: &FeatureGrid, scale: &[f64]) -> Result<FeatureGrid> {
    if scale.len() != input.channels() {
        return Err(Error::shape(format!(
            "l2norm scale length {} != channels {}",
            scale.len(),
            input.channels()
        )));
    }
    let n = input.plane_len();
    let mut norms = vec![0.0; n];
    for c in 0..input.channels() {
        for (acc, &v) in norms.iter_mut().zip(input.plane(c)) {
            *acc += v * v;
        }
    }
    for acc in norms.iter_mut() {
        *acc = acc.sqrt() + L2NORM_EPS;
    }
    let mut out = input.clone();
    for (c, &s) in scale.iter().enumerate() {
        for (v, &norm) in out.plane_mut(c).iter_mut().zip(&norms) {
            *v = *v / norm * s;
        }
    }
    Ok(out)
}

/// Bilinear 2x upsampling with half-pixel centers (corner alignment off).
pub fn upsample2x(input: &FeatureGrid) -> FeatureGrid {
    let (c, h, w) = input.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(oh, h);
    let xs = taps(ow, w);
    let mut out = FeatureGrid::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Softmax across a stack of single-channel maps, independently at every cell.
pub fn softmax_over_stack(maps: &[FeatureGrid]) -> Result<Vec<FeatureGrid>> {
    let first = maps.first().ok_or_else(|| Error::shape("softmax over an empty stack"))?;
    for m in maps {
        if m.channels() != 1 || !m.same_spatial(first) {
            return Err(Error::shape(format!(
                "softmax stack members must be 1x{}x{}, got {:?}",
                first.height(),
                first.width(),
                m.dims()
            )));
        }
    }
    let n = first.plane_len();
    let mut out: Vec<FeatureGrid> = maps.to_vec();
    let mut exps = vec![0.0; maps.len()];
    for i in 0..n {
        let max = maps.iter().map(|m| m.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (e, m) in exps.iter_mut().zip(maps) {
            *e = (m.data()[i] - max).exp();
            total += *e;
        }
        for (o, &e) in out.iter_mut().zip(&exps) {
            o.data_mut()[i] = e / total;
        }
    }
    Ok(out)
}
