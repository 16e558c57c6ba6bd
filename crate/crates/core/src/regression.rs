//! Disparity regression from an aggregated cost volume, and learned
//! superpixel upsampling back to full resolution.

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Per-pixel disparity in pixels of its own resolution, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    /// `[h, w]`.
    pub values: Tensor,
    /// Downsampling factor relative to the input image (1 or 4).
    pub scale: usize,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(values: Tensor, scale: usize, valid: Vec<bool>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(dim_err!("disparity map must be [h,w], got {:?}", values.shape()));
        }
        if valid.len() != values.numel() {
            return Err(dim_err!("validity mask length {} vs {} pixels", valid.len(), values.numel()));
        }
        Ok(Self { values, scale, valid })
    }

    /// Fully valid map.
    pub fn dense(values: Tensor, scale: usize) -> Result<Self> {
        let n = values.numel();
        Self::new(values, scale, vec![true; n])
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn cost_dims(g: &Graph, costs: Var) -> Result<[usize; 3]> {
    match *g.shape(costs) {
        [d, h, w] if d >= 2 => Ok([d, h, w]),
        ref s => Err(dim_err!("regression expects [D>=2,h,w] costs, got {s:?}")),
    }
}

/// Expected disparity index under the softmax over axis 0 of `[D, h, w]`.
pub fn soft_argmax(g: &mut Graph, costs: Var) -> Result<Var> {
    let [d, _, _] = cost_dims(g, costs)?;
    let prob = g.softmax(costs, 0)?;
    let idx = g.constant(Tensor::from_fn(&[d, 1, 1], |i| i as f64));
    let weighted = g.mul(prob, idx)?;
    g.sum_axis(weighted, 0)
}

/// Top-k indices of `vals`, largest first with ties to the smaller index,
/// returned in ascending index order.
pub fn select_top_k(vals: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Soft-argmax restricted to the `k` largest costs of each pixel.
///
/// Entries outside the selection receive no weight and no gradient; the
/// selection itself is treated as constant. `k = 1` degenerates to argmax.
pub fn topk_soft_argmax(g: &mut Graph, costs: Var, k: usize) -> Result<Var> {
    let [d, h, w] = cost_dims(g, costs)?;
    if k == 0 || k > d {
        return Err(config_err!("top-k {k} outside 1..={d}"));
    }
    let c = g.value(costs);
    if !c.all_finite() {
        return Err(Error::Numeric("cost volume is not finite".into()));
    }
    let c = c.data();
    let hw = h * w;
    let mut sel = Vec::with_capacity(k * hw);
    let mut weights = Vec::with_capacity(k * hw);
    let mut out = Vec::with_capacity(hw);
    let mut column = vec![0.0; d];
    for p in 0..hw {
        for (i, v) in column.iter_mut().enumerate() {
            *v = c[i * hw + p];
        }
        let chosen = select_top_k(&column, k);
        let m = chosen.iter().map(|&i| column[i]).fold(f64::NEG_INFINITY, f64::max);
        let es: Vec<f64> = chosen.iter().map(|&i| (column[i] - m).exp()).collect();
        let z: f64 = es.iter().sum();
        let mut est = 0.0;
        for (&i, e) in chosen.iter().zip(&es) {
            let wgt = e / z;
            est += wgt * i as f64;
            weights.push(wgt);
            sel.push(i as u32);
        }
        out.push(est);
    }
    let value = Tensor::new(&[h, w], out)?;
    Ok(g.custom(&[costs], value, move |args| {
        let est = args.output.data();
        let gout = args.grad_output;
        let mut gc = vec![0.0; d * hw];
        for p in 0..hw {
            for t in 0..k {
                let i = sel[p * k + t] as usize;
                gc[i * hw + p] = gout[p] * weights[p * k + t] * (i as f64 - est[p]);
            }
        }
        vec![Some(gc)]
    }))
}

/// Per-pixel weights `[9, H, W]` over the 3×3 coarse cells around each pixel.
#[derive(Debug, Clone, Copy)]
pub struct SuperpixelWeights(pub Var);

pub const SPX_HIDDEN: usize = 8;
const TAPS: usize = 9;

pub fn init_superpixel_head<R: Rng + ?Sized>(store: &mut ParamStore, feat_channels: usize, rng: &mut R) {
    store.init_weight("spx.feat.w", &[SPX_HIDDEN, feat_channels, 1, 1], feat_channels, rng);
    store.init_zeros("spx.feat.b", &[SPX_HIDDEN]);
    store.init_weight("spx.img.w", &[SPX_HIDDEN, 3, 3, 3], 27, rng);
    store.init_zeros("spx.img.b", &[SPX_HIDDEN]);
    store.init_weight("spx.out.w", &[TAPS, SPX_HIDDEN, 1, 1], SPX_HIDDEN, rng);
    store.init_zeros("spx.out.b", &[TAPS]);
}

/// Predicts superpixel weights from quarter-scale features and the full image.
///
/// Features go through a 1×1 conv and are upsampled 4×; the image goes
/// through a 3×3 conv; their sum is activated and projected to 9 logits,
/// then normalized per pixel.
pub fn superpixel_head(g: &mut Graph, feat4: Var, image: Var, params: &BoundParams) -> Result<SuperpixelWeights> {
    let (fs, is) = (g.shape(feat4).to_vec(), g.shape(image).to_vec());
    let (&[_, h, w], &[3, hh, ww]) = (fs.as_slice(), is.as_slice()) else {
        return Err(dim_err!("superpixel head expects [c,h,w] features and [3,H,W] image, got {fs:?}, {is:?}"));
    };
    if hh != 4 * h || ww != 4 * w {
        return Err(dim_err!("image {hh}×{ww} is not 4× features {h}×{w}"));
    }
    let a = g.conv2d(feat4, params.var("spx.feat.w")?, Some(params.var("spx.feat.b")?), 1, 0)?;
    let a = g.upsample_nearest(a, 4)?;
    let b = g.conv2d(image, params.var("spx.img.w")?, Some(params.var("spx.img.b")?), 1, 1)?;
    let hid = g.add(a, b)?;
    let hid = g.leaky_relu(hid, LEAKY_SLOPE);
    let logits = g.conv2d(hid, params.var("spx.out.w")?, Some(params.var("spx.out.b")?), 1, 0)?;
    Ok(SuperpixelWeights(g.softmax(logits, 0)?))
}

fn coarse_tap(j: usize, qy: usize, qx: usize, h: usize, w: usize) -> Option<usize> {
    let (dy, dx) = (j as isize / 3 - 1, j as isize % 3 - 1);
    let (y, x) = (qy as isize + dy, qx as isize + dx);
    (y >= 0 && y < h as isize && x >= 0 && x < w as isize).then(|| y as usize * w + x as usize)
}

/// Full-resolution disparity as `4 ×` the weighted mean of the 3×3 coarse
/// neighbourhood, renormalized over in-bounds neighbours.
pub fn superpixel_upsample(g: &mut Graph, coarse: Var, weights: SuperpixelWeights) -> Result<Var> {
    let (cs, ws) = (g.shape(coarse).to_vec(), g.shape(weights.0).to_vec());
    let (&[h, w], &[TAPS, hh, ww]) = (cs.as_slice(), ws.as_slice()) else {
        return Err(dim_err!("superpixel upsample expects [h,w] and [9,H,W], got {cs:?}, {ws:?}"));
    };
    if hh != 4 * h || ww != 4 * w {
        return Err(dim_err!("weights {hh}×{ww} are not 4× coarse {h}×{w}"));
    }
    let cd = g.value(coarse).data();
    let wd = g.value(weights.0).data();
    let n = hh * ww;
    let mut out = vec![0.0; n];
    let mut dens = vec![0.0; n];
    for py in 0..hh {
        for px in 0..ww {
            let p = py * ww + px;
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..TAPS {
                if let Some(q) = coarse_tap(j, py / 4, px / 4, h, w) {
                    num += wd[j * n + p] * cd[q];
                    den += wd[j * n + p];
                }
            }
            out[p] = 4.0 * num / den;
            dens[p] = den;
        }
    }
    let value = Tensor::new(&[hh, ww], out)?;
    Ok(g.custom(&[coarse, weights.0], value, move |args| {
        let (cd, wd) = (args.inputs[0].data(), args.inputs[1].data());
        let est = args.output.data();
        let gout = args.grad_output;
        let mut gc = vec![0.0; h * w];
        let mut gw = vec![0.0; TAPS * n];
        for py in 0..hh {
            for px in 0..ww {
                let p = py * ww + px;
                let scale = 4.0 * gout[p] / dens[p];
                for j in 0..TAPS {
                    if let Some(q) = coarse_tap(j, py / 4, px / 4, h, w) {
                        gc[q] += scale * wd[j * n + p];
                        gw[j * n + p] = scale * (cd[q] - est[p] / 4.0);
                    }
                }
            }
        }
        vec![args.needs[0].then_some(gc), args.needs[1].then_some(gw)]
    }))
}
