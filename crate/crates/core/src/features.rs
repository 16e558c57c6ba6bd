//! Shared multi-scale feature encoder.
//!
//! A stride-2 trunk reduces the image to 1/32, then a top-down merge path
//! brings coarse context back to every finer level through a 1×1 lateral
//! conv, 2× nearest upsampling and an additive skip.

use rand::Rng;

use crate::config::validate_extents;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore, LEAKY_SLOPE};

pub const SCALES: [usize; 4] = [4, 8, 16, 32];

/// Image features at 1/4, 1/8, 1/16 and 1/32 resolution.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    levels: [Var; 4],
}

impl FeaturePyramid {
    /// Feature map at `scale` ∈ {4, 8, 16, 32}.
    pub fn level(&self, scale: usize) -> Var {
        let i = SCALES.iter().position(|&s| s == scale).expect("scale is one of 4, 8, 16, 32");
        self.levels[i]
    }

    pub fn levels(&self) -> [Var; 4] {
        self.levels
    }
}

const TRUNK: [&str; 5] = ["enc.down0", "enc.down1", "enc.down2", "enc.down3", "enc.down4"];

/// Trunk and merge-path widths: `(cin, cout)` per trunk conv.
fn trunk_channels(widths: [usize; 4]) -> [(usize, usize); 5] {
    let [c4, c8, c16, c32] = widths;
    [(3, c4), (c4, c4), (c4, c8), (c8, c16), (c16, c32)]
}

/// Adds encoder parameters for the given level widths.
pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, widths: [usize; 4], rng: &mut R) {
    for (name, (cin, cout)) in TRUNK.iter().zip(trunk_channels(widths)) {
        store.init_weight(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng);
        store.init_zeros(&format!("{name}.b"), &[cout]);
    }
    // Laterals feed level i from level i+1.
    for i in 0..3 {
        let (cin, cout) = (widths[i + 1], widths[i]);
        let name = format!("enc.lat{}", SCALES[i]);
        store.init_weight(&format!("{name}.w"), &[cout, cin, 1, 1], cin, rng);
        store.init_zeros(&format!("{name}.b"), &[cout]);
    }
}

fn conv_block(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.conv2d(x, w, Some(b), stride, pad)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

/// Encodes one `[3, H, W]` image with values in `[-1, 1]`.
pub fn encode(g: &mut Graph, image: Var, params: &BoundParams) -> Result<FeaturePyramid> {
    let shape = g.shape(image).to_vec();
    let &[3, h, w] = shape.as_slice() else {
        return Err(dim_err!("encoder expects a [3,H,W] image, got {shape:?}"));
    };
    validate_extents(h, w)?;

    let mut x = image;
    let mut trunk = Vec::with_capacity(5);
    for name in TRUNK {
        x = conv_block(g, params, name, x, 2, 1)?;
        trunk.push(x);
    }
    // trunk[1..] are the 1/4 .. 1/32 levels.
    let mut merged = [trunk[4]; 4];
    for i in (0..3).rev() {
        let name = format!("enc.lat{}", SCALES[i]);
        let lw = params.var(&format!("{name}.w"))?;
        let lb = params.var(&format!("{name}.b"))?;
        // 1×1 conv commutes with nearest upsampling; run it at the coarse level.
        let lat = g.conv2d(merged[i + 1], lw, Some(lb), 1, 0)?;
        let up = g.upsample_nearest(lat, 2)?;
        let sum = g.add(trunk[i + 1], up)?;
        merged[i] = g.leaky_relu(sum, LEAKY_SLOPE);
    }
    Ok(FeaturePyramid { levels: merged })
}

/// Encodes a stereo pair with one set of weights.
pub fn shared_encode(
    g: &mut Graph,
    left: Var,
    right: Var,
    params: &BoundParams,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    Ok((encode(g, left, params)?, encode(g, right, params)?))
}
