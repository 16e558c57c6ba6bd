//! The end-to-end network: shared encoder, correlation, guided hourglass
//! aggregation, top-k regression at quarter resolution and superpixel
//! upsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate, init_aggregator};
use crate::config::StereoConfig;
use crate::cost_volume::correlate;
use crate::error::{dim_err, Result};
use crate::features::{init_encoder, shared_encode};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::regression::{init_superpixel_head, superpixel_head, superpixel_upsample, topk_soft_argmax};
use crate::tensor::Tensor;

/// Fixed gain on the mean-dot correlation.
pub const CORRELATION_GAIN: f64 = 10.0;

/// Subtracts the per-pixel channel mean from a `[c, h, w]` map.
fn center_channels(g: &mut Graph, f: Var) -> Result<Var> {
    let &[c, h, w] = g.shape(f) else {
        return Err(dim_err!("expected [c,h,w] features, got {:?}", g.shape(f)));
    };
    let sum = g.sum_axis(f, 0)?;
    let sum = g.reshape(sum, &[1, h, w])?;
    let mean = g.scale(sum, 1.0 / c as f64);
    g.sub(f, mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoModel {
    pub config: StereoConfig,
    pub params: ParamStore,
}

/// Intermediate and final nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `[1, Dq, h, w]` correlation volume.
    pub correlation: Var,
    /// `[Dq, h, w]` aggregated logits, with the correlation added back.
    pub costs: Var,
    /// `[h, w]` quarter-resolution disparity in quarter-resolution pixels.
    pub coarse: Var,
    /// `[H, W]` full-resolution disparity in pixels.
    pub disparity: Var,
}

impl StereoModel {
    /// Fresh parameters, initialized from `seed`.
    pub fn new(config: StereoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, config.feature_widths, &mut rng);
        init_aggregator(&mut params, &config, &mut rng);
        init_superpixel_head(&mut params, config.feature_widths[0], &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: StereoConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(dim_err!("parameter {name} has shape {:?}, expected {:?}", p.shape(), t.shape()))
                }
                None => return Err(crate::Error::Contract(format!("checkpoint lacks parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass for one `[3, H, W]` pair, regressing with `k`.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, left: Var, right: Var, k: usize) -> Result<ModelOutput> {
        let dq = self.config.quarter_disparities();
        let (pl, pr) = shared_encode(g, left, right, params)?;
        let fl = center_channels(g, pl.level(4))?;
        let fr = center_channels(g, pr.level(4))?;
        let raw = correlate(g, fl, fr, dq)?;
        let correlation = g.scale(raw, CORRELATION_GAIN);
        let agg = aggregate(g, correlation, &pl, params, &self.config)?;
        let [_, _, h, w] = crate::cost_volume::volume_dims(g, agg)?;
        let agg = g.add(agg, correlation)?;
        let costs = g.reshape(agg, &[dq, h, w])?;
        let coarse = topk_soft_argmax(g, costs, k)?;
        let spx = superpixel_head(g, pl.level(4), left, params)?;
        let disparity = superpixel_upsample(g, coarse, spx)?;
        Ok(ModelOutput { correlation, costs, coarse, disparity })
    }

    /// Full-resolution disparity for one pair, without recording gradients.
    pub fn predict(&self, left: &Tensor, right: &Tensor, k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
        let out = self.forward(&mut g, &p, l, r, k)?;
        Ok(g.value(out.disparity).clone())
    }
}
