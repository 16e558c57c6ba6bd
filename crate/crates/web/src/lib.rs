//! Browser bindings for the demo page in `www/`.
//!
//! Three things are exposed: synthetic stereogram generation with a
//! disparity preview, the top-k soft-argmax regression on a user-edited cost
//! vector, and the multiply-count model of the two aggregation schemes.

use volstereo::data::rds_generate;
use volstereo::neighborhood::{flops_gce, flops_neighborhood};
use volstereo::regression::{select_top_k, soft_argmax, topk_soft_argmax};
use volstereo::{Graph, Tensor};
use wasm_bindgen::prelude::*;

/// One generated pair as RGBA bytes, ready for `ImageData`.
#[wasm_bindgen]
pub struct Stereogram {
    width: usize,
    height: usize,
    left: Vec<u8>,
    right: Vec<u8>,
    disparity: Vec<u8>,
}

#[wasm_bindgen]
impl Stereogram {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn left(&self) -> Vec<u8> {
        self.left.clone()
    }

    pub fn right(&self) -> Vec<u8> {
        self.right.clone()
    }

    /// Ground truth as greyscale, brighter is nearer; occluded pixels are red.
    pub fn disparity(&self) -> Vec<u8> {
        self.disparity.clone()
    }
}

fn view_rgba(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        for c in 0..3 {
            let v = t.data()[c * h * w + p];
            out.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
        out.push(255);
    }
    out
}

/// Random-dot stereogram of `height × width` with integer disparities below
/// `max_disparity`. Extents must be multiples of 32.
#[wasm_bindgen]
pub fn generate_stereogram(height: usize, width: usize, max_disparity: usize, seed: u64) -> Result<Stereogram, JsError> {
    let s = rds_generate(height, width, max_disparity, seed).map_err(|e| JsError::new(&e.to_string()))?;
    let scale = 255.0 / max_disparity.max(1) as f64;
    let mut disparity = Vec::with_capacity(height * width * 4);
    for (p, &d) in s.gt.values.data().iter().enumerate() {
        if s.gt.valid[p] {
            let v = (d * scale).round().clamp(0.0, 255.0) as u8;
            disparity.extend([v, v, v, 255]);
        } else {
            disparity.extend([200, 40, 40, 255]);
        }
    }
    Ok(Stereogram { width, height, left: view_rgba(&s.left), right: view_rgba(&s.right), disparity })
}

/// Regression over one pixel's cost vector.
///
/// Returns `[estimate, weight_0, …, weight_{D-1}]`; weights of entries outside
/// the top `k` are zero. `k = costs.len()` gives the plain soft-argmax.
#[wasm_bindgen]
pub fn regress(costs: Vec<f64>, k: usize) -> Result<Vec<f64>, JsError> {
    let d = costs.len();
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(&[d, 1, 1], costs.clone()).map_err(|e| JsError::new(&e.to_string()))?);
    let est = topk_soft_argmax(&mut g, c, k).map_err(|e| JsError::new(&e.to_string()))?;
    let chosen = select_top_k(&costs, k);
    let m = chosen.iter().map(|&i| costs[i]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = chosen.iter().map(|&i| (costs[i] - m).exp()).sum();
    let mut out = vec![g.value(est).data()[0]];
    out.extend((0..d).map(|i| if chosen.contains(&i) { (costs[i] - m).exp() / z } else { 0.0 }));
    Ok(out)
}

/// Plain soft-argmax estimate over the whole vector, for comparison.
#[wasm_bindgen]
pub fn full_soft_argmax(costs: Vec<f64>) -> Result<f64, JsError> {
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(&[costs.len(), 1, 1], costs).map_err(|e| JsError::new(&e.to_string()))?);
    let est = soft_argmax(&mut g, c).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(g.value(est).data()[0])
}

/// `[excitation multiplies, neighbourhood multiplies, ratio]`.
#[wasm_bindgen]
pub fn cost_model(c_i: u32, c: u32, d: u32, h: u32, w: u32, n: u32) -> Vec<f64> {
    let [c_i, c, d, h, w, n] = [c_i, c, d, h, w, n].map(u64::from);
    let gce = flops_gce(c_i, c, d, h, w);
    let neigh = flops_neighborhood(c_i, c, d, h, w, n);
    vec![gce as f64, neigh as f64, if gce == 0 { f64::NAN } else { neigh as f64 / gce as f64 }]
}
