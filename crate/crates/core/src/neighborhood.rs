//! Image-guided 3×3 neighbourhood aggregation, the spatially varying
//! alternative to channel excitation, and the multiply-count model that
//! compares the two.
//!
//! For voxel `i` with window neighbours `j`:
//!
//! ```text
//! ê_ji = MLP([I_i ‖ I_j ‖ MLP(p_i - p_j)])        per channel
//! e_ji = softmax_j(ê_ji)                          over in-bounds j
//! m_i  = Σ_j e_ji ⊙ C_j
//! C'_i = ξ(W1·C_i + W2·m_i + b)
//! ```
//!
//! Edges are computed per pixel and shared across disparity. The window is
//! evaluated densely over a zero-padded volume.

use rand::Rng;

use crate::cost_volume::volume_dims;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Window side.
pub const WINDOW: usize = 3;
const TAPS: usize = WINDOW * WINDOW;
pub const POS_HIDDEN: usize = 8;
pub const POS_OUT: usize = 8;
pub const EDGE_HIDDEN: usize = 16;

/// `(dy, dx)` of tap `j`, row-major over the window.
pub fn tap_offset(j: usize) -> (isize, isize) {
    ((j / WINDOW) as isize - 1, (j % WINDOW) as isize - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

/// Normalized edge weights `[9, c, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeWeights(pub Var);

/// Bound parameters of one neighbourhood-aggregation site.
#[derive(Debug, Clone, Copy)]
pub struct NeighParams {
    pub pos1_w: Var,
    pub pos1_b: Var,
    pub pos2_w: Var,
    pub pos2_b: Var,
    pub edge1_w: Var,
    pub edge1_b: Var,
    pub edge2_w: Var,
    pub edge2_b: Var,
    pub w_self: Var,
    pub w_neigh: Var,
    pub bias: Var,
    pub xi: Activation,
}

const NAMES: [&str; 11] = [
    "pos1.w", "pos1.b", "pos2.w", "pos2.b", "edge1.w", "edge1.b", "edge2.w", "edge2.b", "w_self",
    "w_neigh", "b",
];

pub fn init_neighborhood<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    feat_channels: usize,
    cost_channels: usize,
    rng: &mut R,
) {
    let c = cost_channels;
    let pair = 2 * feat_channels + POS_OUT;
    let n = |s: &str| format!("{prefix}.{s}");
    store.init_weight(&n("pos1.w"), &[POS_HIDDEN, 2], 2, rng);
    store.init_zeros(&n("pos1.b"), &[POS_HIDDEN, 1]);
    store.init_weight(&n("pos2.w"), &[POS_OUT, POS_HIDDEN], POS_HIDDEN, rng);
    store.init_zeros(&n("pos2.b"), &[POS_OUT, 1]);
    store.init_weight(&n("edge1.w"), &[EDGE_HIDDEN, pair], pair, rng);
    store.init_zeros(&n("edge1.b"), &[EDGE_HIDDEN, 1]);
    store.init_weight(&n("edge2.w"), &[c, EDGE_HIDDEN], EDGE_HIDDEN, rng);
    store.init_zeros(&n("edge2.b"), &[c, 1]);
    store.init_weight(&n("w_self"), &[c, c], c, rng);
    store.init_weight(&n("w_neigh"), &[c, c], c, rng);
    store.init_zeros(&n("b"), &[c, 1]);
}

impl NeighParams {
    pub fn bind(params: &BoundParams, prefix: &str) -> Result<Self> {
        let v: Vec<Var> = NAMES
            .iter()
            .map(|s| params.var(&format!("{prefix}.{s}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            pos1_w: v[0],
            pos1_b: v[1],
            pos2_w: v[2],
            pos2_b: v[3],
            edge1_w: v[4],
            edge1_b: v[5],
            edge2_w: v[6],
            edge2_b: v[7],
            w_self: v[8],
            w_neigh: v[9],
            bias: v[10],
            xi: Activation::LeakyRelu(LEAKY_SLOPE),
        })
    }
}

/// `[2, 9]` relative positions `p_i - p_j` for every tap.
fn relative_positions() -> Tensor {
    let mut t = Tensor::zeros(&[2, TAPS]);
    for j in 0..TAPS {
        let (dy, dx) = tap_offset(j);
        t.set(&[0, j], -dy as f64);
        t.set(&[1, j], -dx as f64);
    }
    t
}

/// `[2c_I + P, 9, h, w]` stacking `I_i`, zero-padded `I_j` and the tap's encoding.
fn pair_features(g: &mut Graph, feat: Var, pe: Var) -> Result<Var> {
    let [ci, h, w] = match *g.shape(feat) {
        [a, b, c] => [a, b, c],
        ref s => return Err(dim_err!("image features must be [c,h,w], got {s:?}")),
    };
    let p = g.shape(pe)[0];
    let hw = h * w;
    let rows = 2 * ci + p;
    let f = g.value(feat).data();
    let e = g.value(pe).data();
    let mut out = vec![0.0; rows * TAPS * hw];
    for j in 0..TAPS {
        let (dy, dx) = tap_offset(j);
        for ch in 0..ci {
            let own = &mut out[(ch * TAPS + j) * hw..(ch * TAPS + j + 1) * hw];
            own.copy_from_slice(&f[ch * hw..(ch + 1) * hw]);
            let base = ((ci + ch) * TAPS + j) * hw;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[base + y * w + x] = f[ch * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        for q in 0..p {
            let base = ((2 * ci + q) * TAPS + j) * hw;
            out[base..base + hw].iter_mut().for_each(|v| *v = e[q * TAPS + j]);
        }
    }
    let value = Tensor::new(&[rows, TAPS, h, w], out)?;
    Ok(g.custom(&[feat, pe], value, move |args| {
        let gout = args.grad_output;
        let gf = args.needs[0].then(|| {
            let mut gf = vec![0.0; ci * hw];
            for j in 0..TAPS {
                let (dy, dx) = tap_offset(j);
                for ch in 0..ci {
                    let own = &gout[(ch * TAPS + j) * hw..(ch * TAPS + j + 1) * hw];
                    gf[ch * hw..(ch + 1) * hw].iter_mut().zip(own).for_each(|(a, b)| *a += b);
                    let base = ((ci + ch) * TAPS + j) * hw;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                gf[ch * hw + sy as usize * w + sx as usize] += gout[base + y * w + x];
                            }
                        }
                    }
                }
            }
            gf
        });
        let ge = args.needs[1].then(|| {
            let mut ge = vec![0.0; p * TAPS];
            for q in 0..p {
                for j in 0..TAPS {
                    let base = ((2 * ci + q) * TAPS + j) * hw;
                    ge[q * TAPS + j] = gout[base..base + hw].iter().sum();
                }
            }
            ge
        });
        vec![gf, ge]
    }))
}

fn tap_in_bounds(j: usize, y: usize, x: usize, h: usize, w: usize) -> bool {
    let (dy, dx) = tap_offset(j);
    let (sy, sx) = (y as isize + dy, x as isize + dx);
    sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize
}

/// Softmax over in-bounds taps of `[c, 9, h, w]` logits, emitted as `[9, c, h, w]`.
fn window_softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    let [c, taps, h, w] = volume_dims(g, logits)?;
    if taps != TAPS {
        return Err(dim_err!("window softmax expects {TAPS} taps, got {taps}"));
    }
    let hw = h * w;
    let l = g.value(logits).data();
    let mut out = vec![0.0; TAPS * c * hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut m = f64::NEG_INFINITY;
                for j in 0..TAPS {
                    if tap_in_bounds(j, y, x, h, w) {
                        m = m.max(l[(ch * TAPS + j) * hw + p]);
                    }
                }
                let mut z = 0.0;
                for j in 0..TAPS {
                    if tap_in_bounds(j, y, x, h, w) {
                        let e = (l[(ch * TAPS + j) * hw + p] - m).exp();
                        out[(j * c + ch) * hw + p] = e;
                        z += e;
                    }
                }
                for j in 0..TAPS {
                    out[(j * c + ch) * hw + p] /= z;
                }
            }
        }
    }
    let value = Tensor::new(&[TAPS, c, h, w], out)?;
    Ok(g.custom(&[logits], value, move |args| {
        let y = args.output.data();
        let gout = args.grad_output;
        let mut gl = vec![0.0; c * TAPS * hw];
        for ch in 0..c {
            for p in 0..hw {
                let dot: f64 = (0..TAPS)
                    .map(|j| gout[(j * c + ch) * hw + p] * y[(j * c + ch) * hw + p])
                    .sum();
                for j in 0..TAPS {
                    let k = (j * c + ch) * hw + p;
                    gl[(ch * TAPS + j) * hw + p] = y[k] * (gout[k] - dot);
                }
            }
        }
        vec![Some(gl)]
    }))
}

/// Edge weights from `[c_I, h, w]` image features.
pub fn edge_weights(g: &mut Graph, feat: Var, params: &NeighParams) -> Result<EdgeWeights> {
    let [_, h, w] = match *g.shape(feat) {
        [a, b, c] => [a, b, c],
        ref s => return Err(dim_err!("image features must be [c,h,w], got {s:?}")),
    };
    let rel = g.constant(relative_positions());
    let pe = g.matmul(params.pos1_w, rel)?;
    let pe = g.add(pe, params.pos1_b)?;
    let pe = g.leaky_relu(pe, LEAKY_SLOPE);
    let pe = g.matmul(params.pos2_w, pe)?;
    let pe = g.add(pe, params.pos2_b)?;

    let pair = pair_features(g, feat, pe)?;
    let rows = g.shape(pair)[0];
    let pair = g.reshape(pair, &[rows, TAPS * h * w])?;
    let hid = g.matmul(params.edge1_w, pair)?;
    let hid = g.add(hid, params.edge1_b)?;
    let hid = g.leaky_relu(hid, LEAKY_SLOPE);
    let logits = g.matmul(params.edge2_w, hid)?;
    let logits = g.add(logits, params.edge2_b)?;
    let c = g.shape(logits)[0];
    let logits = g.reshape(logits, &[c, TAPS, h, w])?;
    Ok(EdgeWeights(window_softmax(g, logits)?))
}

/// `m[ch, i, y, x] = Σ_j e[j, ch, y, x] * C[ch, i, y+dy_j, x+dx_j]` with zero padding.
pub fn window_sum(g: &mut Graph, cost: Var, edges: EdgeWeights) -> Result<Var> {
    let [c, d, h, w] = volume_dims(g, cost)?;
    if g.shape(edges.0) != [TAPS, c, h, w] {
        return Err(dim_err!(
            "edge weights {:?} do not match cost volume [{c},{d},{h},{w}]",
            g.shape(edges.0)
        ));
    }
    let (hw, pw) = (h * w, w + 2);
    let phw = (h + 2) * pw;
    let cv = g.value(cost).data();
    let e = g.value(edges.0).data();
    // Zero-padded planes, one per (channel, disparity).
    let mut padded = vec![0.0; c * d * phw];
    for plane in 0..c * d {
        for y in 0..h {
            let src = &cv[plane * hw + y * w..plane * hw + (y + 1) * w];
            padded[plane * phw + (y + 1) * pw + 1..plane * phw + (y + 1) * pw + 1 + w].copy_from_slice(src);
        }
    }
    let mut out = vec![0.0; c * d * hw];
    for ch in 0..c {
        for i in 0..d {
            let plane = ch * d + i;
            let src = &padded[plane * phw..(plane + 1) * phw];
            let dst = &mut out[plane * hw..(plane + 1) * hw];
            for j in 0..TAPS {
                let (dy, dx) = tap_offset(j);
                let ew = &e[(j * c + ch) * hw..(j * c + ch + 1) * hw];
                for y in 0..h {
                    let row = ((y as isize + 1 + dy) as usize) * pw;
                    let col = (1 + dx) as usize;
                    let s = &src[row + col..row + col + w];
                    let er = &ew[y * w..(y + 1) * w];
                    dst[y * w..(y + 1) * w]
                        .iter_mut()
                        .zip(er.iter().zip(s))
                        .for_each(|(o, (a, b))| *o += a * b);
                }
            }
        }
    }
    g.count_muls("neigh_update", (TAPS * c * d * hw) as u64);
    let value = Tensor::new(&[c, d, h, w], out)?;
    Ok(g.custom(&[cost, edges.0], value, move |args| {
        let e = args.inputs[1].data();
        let gout = args.grad_output;
        let mut gpad = vec![0.0; c * d * phw];
        let mut ge = vec![0.0; TAPS * c * hw];
        for ch in 0..c {
            for i in 0..d {
                let plane = ch * d + i;
                let gsrc = &gout[plane * hw..(plane + 1) * hw];
                for j in 0..TAPS {
                    let (dy, dx) = tap_offset(j);
                    let eoff = (j * c + ch) * hw;
                    for y in 0..h {
                        let row = plane * phw + ((y as isize + 1 + dy) as usize) * pw + (1 + dx) as usize;
                        for x in 0..w {
                            let go = gsrc[y * w + x];
                            gpad[row + x] += e[eoff + y * w + x] * go;
                            ge[eoff + y * w + x] += padded[row + x] * go;
                        }
                    }
                }
            }
        }
        let gc = args.needs[0].then(|| {
            let mut gc = vec![0.0; c * d * hw];
            for plane in 0..c * d {
                for y in 0..h {
                    let s = plane * phw + (y + 1) * pw + 1;
                    gc[plane * hw + y * w..plane * hw + (y + 1) * w].copy_from_slice(&gpad[s..s + w]);
                }
            }
            gc
        });
        vec![gc, args.needs[1].then_some(ge)]
    }))
}

/// One neighbourhood update of a `[c, d, h, w]` cost volume.
pub fn aggregate_step(g: &mut Graph, cost: Var, edges: EdgeWeights, params: &NeighParams) -> Result<Var> {
    let [c, d, h, w] = volume_dims(g, cost)?;
    let m = window_sum(g, cost, edges)?;
    let flat_c = g.reshape(cost, &[c, d * h * w])?;
    let flat_m = g.reshape(m, &[c, d * h * w])?;
    let own = g.matmul(params.w_self, flat_c)?;
    let nb = g.matmul(params.w_neigh, flat_m)?;
    let s = g.add(own, nb)?;
    let s = g.add(s, params.bias)?;
    let s = params.xi.apply(g, s);
    g.reshape(s, &[c, d, h, w])
}

/// Edge computation plus update at one site.
pub fn neighborhood_block(
    g: &mut Graph,
    params: &BoundParams,
    prefix: &str,
    cost: Var,
    feat: Var,
) -> Result<Var> {
    let np = NeighParams::bind(params, prefix)?;
    let edges = edge_weights(g, feat, &np)?;
    aggregate_step(g, cost, edges, &np)
}

/// Multiplies for guided excitation: weight computation plus the gated update.
pub fn flops_gce(c_i: u64, c: u64, d: u64, h: u64, w: u64) -> u64 {
    c_i * c * h * w + c * d * h * w
}

/// Lower bound on multiplies for an `n × n` neighbourhood aggregation with
/// point-wise weight computation.
pub fn flops_neighborhood(c_i: u64, c: u64, d: u64, h: u64, w: u64, n: u64) -> u64 {
    c_i * n * n * c * h * w + n * n * c * d * h * w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(g: &mut Graph, ci: usize, c: usize, xi: Activation) -> NeighParams {
        let z = |g: &mut Graph, s: &[usize]| g.constant(Tensor::zeros(s));
        let eye = |g: &mut Graph| g.constant(Tensor::from_fn(&[c, c], |k| if k / c == k % c { 1.0 } else { 0.0 }));
        NeighParams {
            pos1_w: z(g, &[POS_HIDDEN, 2]),
            pos1_b: z(g, &[POS_HIDDEN, 1]),
            pos2_w: z(g, &[POS_OUT, POS_HIDDEN]),
            pos2_b: z(g, &[POS_OUT, 1]),
            edge1_w: z(g, &[EDGE_HIDDEN, 2 * ci + POS_OUT]),
            edge1_b: z(g, &[EDGE_HIDDEN, 1]),
            edge2_w: z(g, &[c, EDGE_HIDDEN]),
            edge2_b: z(g, &[c, 1]),
            w_self: eye(g),
            w_neigh: eye(g),
            bias: z(g, &[c, 1]),
            xi,
        }
    }

    #[test]
    fn uniform_edges_on_constant_features() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[3, 4, 5], 0.7));
        let p = zero_params(&mut g, 3, 2, Activation::Identity);
        let e = edge_weights(&mut g, f, &p).unwrap();
        let ev = g.value(e.0).clone();
        assert_eq!(ev.shape(), &[9, 2, 4, 5]);
        let expect = |y: usize, x: usize| {
            let edge_y = y == 0 || y == 3;
            let edge_x = x == 0 || x == 4;
            match (edge_y, edge_x) {
                (true, true) => 1.0 / 4.0,
                (true, false) | (false, true) => 1.0 / 6.0,
                _ => 1.0 / 9.0,
            }
        };
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let mut s = 0.0;
                    for j in 0..9 {
                        let v = ev.get(&[j, ch, y, x]);
                        s += v;
                        if tap_in_bounds(j, y, x, 4, 5) {
                            assert!((v - expect(y, x)).abs() < 1e-15);
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn neutral_step_adds_neighbour_mean() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[3, 4, 5], 0.2));
        let p = zero_params(&mut g, 3, 2, Activation::Identity);
        let e = edge_weights(&mut g, f, &p).unwrap();
        let cv = Tensor::full(&[2, 3, 4, 5], 1.25);
        let cost = g.constant(cv);
        let out = aggregate_step(&mut g, cost, e, &p).unwrap();
        // Constant input: neighbour mean over in-bounds taps equals the constant.
        assert!(g.value(out).data().iter().all(|&v| (v - 2.5).abs() < 1e-14));
        assert_eq!(g.mul_count("neigh_update"), 9 * 2 * 3 * 4 * 5);
    }

    #[test]
    fn cost_model_fixture() {
        assert_eq!(flops_gce(32, 8, 48, 72, 96), 1_769_472 + 2_654_208);
        assert_eq!(flops_gce(32, 8, 48, 72, 96), 4_423_680);
        assert_eq!(flops_neighborhood(32, 8, 48, 72, 96, 3), 39_813_120);
        assert_eq!(flops_neighborhood(32, 8, 48, 72, 96, 1), flops_gce(32, 8, 48, 72, 96));
        assert_eq!(flops_gce(32, 8, 0, 72, 96), 32 * 8 * 72 * 96);
        assert_eq!(flops_gce(32, 8, 48, 144, 96), 2 * flops_gce(32, 8, 48, 72, 96));
    }
}
