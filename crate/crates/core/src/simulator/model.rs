//! Parameter layout of the full pipeline, seeded initialization and the shared encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::interpolation::{DEFAULT_LAMBDA, LAMBDA_PARAM};
use crate::tensor::{relu, Conv2dLayer, FeatureGrid, ParamSet, Tensor};

use super::config::ScenarioConfig;

/// Every weight the pipeline reads, as `(name, shape, fan_in)`.
pub fn param_layout(cfg: &ScenarioConfig) -> Result<Vec<(String, Vec<usize>, usize)>> {
    let mut out = Vec::new();
    let mut conv = |name: String, out_c: usize, in_c: usize, k: usize, bias: bool| {
        let fan_in = in_c * k * k;
        out.push((format!("{name}.weight"), vec![out_c, in_c, k, k], fan_in));
        if bias {
            out.push((format!("{name}.bias"), vec![out_c], fan_in));
        }
    };
    let mut in_c = cfg.height_slabs;
    for (n, layer) in cfg.encoder_layers()?.iter().enumerate() {
        conv(format!("encoder.conv{}", n + 1), layer.out_channels, in_c, 3, true);
        in_c = layer.out_channels;
    }
    let ladder = cfg.ladder()?;
    for (j, &(c, _, _)) in ladder.levels().iter().enumerate() {
        conv(format!("query.l{j}.conv1"), cfg.query_hidden, c, 1, true);
        conv(format!("query.l{j}.conv2"), 1, cfg.query_hidden, 1, true);
        conv(format!("gru.l{j}.reset"), c, 2 * c, 3, true);
        conv(format!("gru.l{j}.update"), c, 2 * c, 3, true);
        conv(format!("gru.l{j}.hidden"), c, c, 3, false);
        let mut widths = vec![3 * c];
        widths.extend(&cfg.edge_widths);
        widths.push(1);
        for (n, pair) in widths.windows(2).enumerate() {
            conv(format!("edge.l{j}.conv{}", n + 1), pair[1], pair[0], 1, true);
        }
        conv(format!("mgfe.l{j}.guide"), c, c, 1, true);
        if j > 0 {
            let coarse = ladder.levels()[j - 1].0;
            conv(format!("mgfe.l{j}.fuse"), c, coarse + 2 * c, 3, true);
        }
    }
    let finest = ladder.finest().0;
    conv("head.score".into(), 1, finest, 1, true);
    conv("head.box".into(), 4, finest, 1, true);
    Ok(out)
}

/// Seeded weights: every tensor uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn in
/// layout order; L2Norm scales are left at their default and `interp.lambda` at 1.
pub fn init_params(cfg: &ScenarioConfig, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut params = ParamSet::new();
    for (name, shape, fan_in) in param_layout(cfg)? {
        params.insert_uniform(name, shape, fan_in, &mut rng)?;
    }
    params.insert(LAMBDA_PARAM, Tensor::scalar(DEFAULT_LAMBDA))?;
    Ok(params)
}

/// Runs the conv stack and returns the feature of every ladder level.
pub fn encoder_forward(bev: &FeatureGrid, params: &ParamSet, cfg: &ScenarioConfig) -> Result<Vec<FeatureGrid>> {
    let layers = cfg.encoder_layers()?;
    let taps = cfg.encoder_taps()?;
    let mut outputs = Vec::with_capacity(layers.len());
    let mut x = bev.clone();
    for (n, layer) in layers.iter().enumerate() {
        let conv = Conv2dLayer::from_params(
            params,
            &format!("encoder.conv{}", n + 1),
            layer.out_channels,
            x.channels(),
            3,
            layer.stride,
        )?;
        x = relu(&conv.forward(&x)?);
        outputs.push(x.clone());
    }
    Ok(taps.into_iter().map(|i| outputs[i].clone()).collect())
}
