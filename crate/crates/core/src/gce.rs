//! Guided cost-volume excitation.
//!
//! A 1×1 conv on same-scale image features yields one sigmoid gate per
//! pixel and cost-volume channel; the gate multiplies every disparity
//! slice alike. The additive variant adds the projection instead.

use rand::Rng;

use crate::cost_volume::volume_dims;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};

/// Gates `[c, 1, h, w]` in `(0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceWeights(pub Var);

pub fn init_guidance<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    feat_channels: usize,
    cost_channels: usize,
    rng: &mut R,
) {
    store.init_weight(&format!("{prefix}.w"), &[cost_channels, feat_channels, 1, 1], feat_channels, rng);
    store.init_zeros(&format!("{prefix}.b"), &[cost_channels]);
}

/// 1×1 projection of `[c_I, h, w]` features to `[c, 1, h, w]`.
fn project(g: &mut Graph, feat: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(feat).to_vec();
    let &[ci, h, wd] = shape.as_slice() else {
        return Err(dim_err!("guidance features must be [c,h,w], got {shape:?}"));
    };
    let y = g.conv2d(feat, w, Some(b), 1, 0)?;
    let c = g.shape(y)[0];
    g.count_muls("gce_weights", (ci * c * h * wd) as u64);
    g.reshape(y, &[c, 1, h, wd])
}

pub fn guidance(g: &mut Graph, feat: Var, w: Var, b: Var) -> Result<GuidanceWeights> {
    let logits = project(g, feat, w, b)?;
    Ok(GuidanceWeights(g.sigmoid(logits)))
}

fn check_gate(g: &Graph, cost: Var, gate: Var) -> Result<[usize; 4]> {
    let dims = volume_dims(g, cost)?;
    let [c, _, h, w] = dims;
    if g.shape(gate) != [c, 1, h, w] {
        return Err(dim_err!(
            "guidance {:?} does not match cost volume {dims:?}",
            g.shape(gate)
        ));
    }
    Ok(dims)
}

/// `out[ch, i, y, x] = alpha[ch, 0, y, x] * cost[ch, i, y, x]`
pub fn excite(g: &mut Graph, cost: Var, alpha: GuidanceWeights) -> Result<Var> {
    let [c, d, h, w] = check_gate(g, cost, alpha.0)?;
    g.count_muls("gce_update", (c * d * h * w) as u64);
    g.mul(alpha.0, cost)
}

/// Guidance followed by excitation, with parameters `{prefix}.w`, `{prefix}.b`.
pub fn gce_block(g: &mut Graph, params: &BoundParams, prefix: &str, cost: Var, feat: Var) -> Result<Var> {
    let w = params.var(&format!("{prefix}.w"))?;
    let b = params.var(&format!("{prefix}.b"))?;
    let alpha = guidance(g, feat, w, b)?;
    excite(g, cost, alpha)
}

/// `cost + broadcast(conv1x1(feat))` across disparity.
pub fn additive_skip(g: &mut Graph, cost: Var, feat: Var, w: Var, b: Var) -> Result<Var> {
    let proj = project(g, feat, w, b)?;
    check_gate(g, cost, proj)?;
    g.add(cost, proj)
}

pub fn additive_block(g: &mut Graph, params: &BoundParams, prefix: &str, cost: Var, feat: Var) -> Result<Var> {
    let w = params.var(&format!("{prefix}.w"))?;
    let b = params.var(&format!("{prefix}.b"))?;
    additive_skip(g, cost, feat, w, b)
}
