#![allow(clippy::needless_range_loop)]

//! Nested-loop reference implementations, written straight from the index
//! formulas with no shared code from the library.

#![allow(dead_code)]

use volstereo::Tensor;

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.1 * x
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [cin, h, wd] = *x.shape() else { panic!() };
    let [cout, _, kh, kw] = *w.shape() else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b[o];
                for i in 0..cin {
                    for a in 0..kh {
                        for c in 0..kw {
                            let iy = (y * stride + a) as isize - pad as isize;
                            let ix = (xx * stride + c) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.get(&[o, i, a, c]) * x.get(&[i, iy as usize, ix as usize]);
                        }
                    }
                }
                out.set(&[o, y, xx], s);
            }
        }
    }
    out
}

pub fn conv3d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [cin, d, h, wd] = *x.shape() else { panic!() };
    let [cout, _, k, _, _] = *w.shape() else { panic!() };
    let o_ext = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o_ext(d), o_ext(h), o_ext(wd));
    let dims = [d as isize, h as isize, wd as isize];
    let mut out = Tensor::zeros(&[cout, od, oh, ow]);
    for o in 0..cout {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for i in 0..cin {
                        for a in 0..k {
                            for bb in 0..k {
                                for c in 0..k {
                                    let p = [z * stride + a, y * stride + bb, xx * stride + c]
                                        .map(|v| v as isize - pad as isize);
                                    if (0..3).any(|t| p[t] < 0 || p[t] >= dims[t]) {
                                        continue;
                                    }
                                    s += w.get(&[o, i, a, bb, c]) * x.get(&[i, p[0] as usize, p[1] as usize, p[2] as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, z, y, xx], s);
                }
            }
        }
    }
    out
}

/// Transposed 3-D conv: every input voxel scatters `w[i, o]` into the output.
pub fn deconv3d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [cin, d, h, wd] = *x.shape() else { panic!() };
    let [_, cout, k, _, _] = *w.shape() else { panic!() };
    let o_ext = |n: usize| (n - 1) * stride + k - 2 * pad;
    let (od, oh, ow) = (o_ext(d), o_ext(h), o_ext(wd));
    let mut out = Tensor::zeros(&[cout, od, oh, ow]);
    for o in 0..cout {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    out.set(&[o, z, y, xx], b[o]);
                }
            }
        }
    }
    let odims = [od as isize, oh as isize, ow as isize];
    for i in 0..cin {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.get(&[i, z, y, xx]);
                    for o in 0..cout {
                        for a in 0..k {
                            for bb in 0..k {
                                for c in 0..k {
                                    let p = [z * stride + a, y * stride + bb, xx * stride + c]
                                        .map(|t| t as isize - pad as isize);
                                    if (0..3).any(|t| p[t] < 0 || p[t] >= odims[t]) {
                                        continue;
                                    }
                                    let idx = [o, p[0] as usize, p[1] as usize, p[2] as usize];
                                    out.set(&idx, out.get(&idx) + v * w.get(&[i, o, a, bb, c]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn correlate(fl: &Tensor, fr: &Tensor, dq: usize) -> Tensor {
    let [c, h, w] = *fl.shape() else { panic!() };
    let mut out = Tensor::zeros(&[1, dq, h, w]);
    for i in 0..dq {
        for y in 0..h {
            for x in i..w {
                let s: f64 = (0..c).map(|ch| fl.get(&[ch, y, x]) * fr.get(&[ch, y, x - i])).sum();
                out.set(&[0, i, y, x], s / c as f64);
            }
        }
    }
    out
}

/// `leaky(W_self·C + W_neigh·m + b)` with `m` the edge-weighted 3×3 window sum.
pub fn aggregate_step(cost: &Tensor, edges: &Tensor, w_self: &Tensor, w_neigh: &Tensor, bias: &Tensor) -> Tensor {
    let [c, d, h, w] = *cost.shape() else { panic!() };
    let at = |k: usize, i: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            cost.get(&[k, i, y as usize, x as usize])
        }
    };
    let mut m = Tensor::zeros(&[c, d, h, w]);
    for k in 0..c {
        for i in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for j in 0..9 {
                        let (dy, dx) = (j as isize / 3 - 1, j as isize % 3 - 1);
                        s += edges.get(&[j, k, y, x]) * at(k, i, y as isize + dy, x as isize + dx);
                    }
                    m.set(&[k, i, y, x], s);
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[c, d, h, w]);
    for o in 0..c {
        for i in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias.data()[o];
                    for k in 0..c {
                        s += w_self.get(&[o, k]) * cost.get(&[k, i, y, x]) + w_neigh.get(&[o, k]) * m.get(&[k, i, y, x]);
                    }
                    out.set(&[o, i, y, x], leaky(s));
                }
            }
        }
    }
    out
}

/// `Σ_i i·softmax(c)_i` along axis 0 of a `[d, h, w]` stack, computed per column.
pub fn soft_argmax(costs: &Tensor) -> Tensor {
    let [d, h, w] = *costs.shape() else { panic!() };
    Tensor::from_fn(&[h, w], |p| {
        let col: Vec<f64> = (0..d).map(|i| costs.data()[i * h * w + p]).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / z
    })
}
