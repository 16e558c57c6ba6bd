//! 2-D and 3-D convolution and 3-D transposed convolution.
//!
//! All three share one index relation between a "dense" side `o` and a
//! "sampled" side `i`: `i = o * stride + k - pad`. Convolution gathers
//! `i → o`; transposed convolution scatters `o → i`; each op's backward
//! is the other traversal plus a weight-gradient accumulation.

use std::ops::Range;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    /// Channels on the `o` side.
    a: usize,
    /// Channels on the `i` side.
    b: usize,
    o: [usize; 3],
    i: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl Geometry {
    fn o_vol(&self) -> usize {
        self.o.iter().product()
    }

    fn i_vol(&self) -> usize {
        self.i.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }

    /// Values of `o` along `axis` whose partner `o*s + k - p` lies in `[0, i)`.
    fn range(&self, axis: usize, k: usize) -> Range<usize> {
        let (ni, no, s, p) = (self.i[axis], self.o[axis], self.s[axis], self.p[axis]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if ni + p <= k {
            return 0..0;
        }
        let hi = ((ni - 1 + p - k) / s + 1).min(no);
        lo..hi.max(lo)
    }

    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
        // f(a, b, widx, o_row_base, i_row_base, ox_range_start, ox_range_end, ix0)
        let (o1, o2) = (self.o[1], self.o[2]);
        let (i1, i2) = (self.i[1], self.i[2]);
        let (k0, k1, k2) = (self.k[0], self.k[1], self.k[2]);
        for a in 0..self.a {
            for b in 0..self.b {
                for kz in 0..k0 {
                    let rz = self.range(0, kz);
                    for ky in 0..k1 {
                        let ry = self.range(1, ky);
                        for kx in 0..k2 {
                            let rx = self.range(2, kx);
                            if rx.is_empty() {
                                continue;
                            }
                            let widx = (((a * self.b + b) * k0 + kz) * k1 + ky) * k2 + kx;
                            let ix0 = rx.start * self.s[2] + kx - self.p[2];
                            for oz in rz.clone() {
                                let iz = oz * self.s[0] + kz - self.p[0];
                                for oy in ry.clone() {
                                    let iy = oy * self.s[1] + ky - self.p[1];
                                    let obase = (a * self.o[0] + oz) * o1 * o2 + oy * o2;
                                    let ibase = (b * self.i[0] + iz) * i1 * i2 + iy * i2;
                                    f(a, b, widx, obase, ibase, rx.start, rx.end, ix0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out[a, o] += w[a, b, k] * x[b, o*s + k - p]`
    fn gather(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let sx = self.s[2];
        self.for_each_row(|_, _, widx, ob, ib, x0, x1, ix0| {
            let wv = w[widx];
            let orow = &mut out[ob + x0..ob + x1];
            if sx == 1 {
                let irow = &x[ib + ix0..ib + ix0 + orow.len()];
                orow.iter_mut().zip(irow).for_each(|(o, &v)| *o += wv * v);
            } else {
                for (t, o) in orow.iter_mut().enumerate() {
                    *o += wv * x[ib + ix0 + t * sx];
                }
            }
        });
    }

    /// `gx[b, o*s + k - p] += w[a, b, k] * g[a, o]`
    fn scatter(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let sx = self.s[2];
        self.for_each_row(|_, _, widx, ob, ib, x0, x1, ix0| {
            let wv = w[widx];
            let grow = &g[ob + x0..ob + x1];
            if sx == 1 {
                let xrow = &mut gx[ib + ix0..ib + ix0 + grow.len()];
                xrow.iter_mut().zip(grow).for_each(|(d, &v)| *d += wv * v);
            } else {
                for (t, &v) in grow.iter().enumerate() {
                    gx[ib + ix0 + t * sx] += wv * v;
                }
            }
        });
    }

    /// `gw[a, b, k] += Σ_o g[a, o] * x[b, o*s + k - p]`
    fn weight_grad(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let sx = self.s[2];
        self.for_each_row(|_, _, widx, ob, ib, x0, x1, ix0| {
            let grow = &g[ob + x0..ob + x1];
            let acc: f64 = if sx == 1 {
                grow.iter().zip(&x[ib + ix0..ib + ix0 + grow.len()]).map(|(a, b)| a * b).sum()
            } else {
                grow.iter().enumerate().map(|(t, &v)| v * x[ib + ix0 + t * sx]).sum()
            };
            gw[widx] += acc;
        });
    }
}

fn conv_out_extent(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    if n + 2 * p < k {
        return Err(dim_err!("kernel {k} larger than padded extent {}", n + 2 * p));
    }
    Ok((n + 2 * p - k) / s + 1)
}

fn split4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(dim_err!("{what} must be rank 4, got {shape:?}")),
    }
}

fn split5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    match shape {
        &[a, b, d, h, w] => Ok([a, b, d, h, w]),
        _ => Err(dim_err!("{what} must be rank 5, got {shape:?}")),
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], vol: usize) {
    for (c, chunk) in out.chunks_mut(vol).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias[c]);
    }
}

fn bias_grad(g: &[f64], channels: usize, vol: usize) -> Vec<f64> {
    (0..channels).map(|c| g[c * vol..(c + 1) * vol].iter().sum()).collect()
}

fn check_bias(g: &Graph, bias: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if g.shape(b) != [channels] {
            return Err(dim_err!("bias shape {:?}, expected [{channels}]", g.shape(b)));
        }
    }
    Ok(())
}

impl Graph {
    /// 2-D cross-correlation of `[cin, h, w]` with `[cout, cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (&[cin, h, w], &[cout, wcin, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(dim_err!("conv2d expects [cin,h,w] and [cout,cin,kh,kw], got {xs:?}, {ws:?}"));
        };
        if cin != wcin {
            return Err(dim_err!("conv2d input has {cin} channels, weight expects {wcin}"));
        }
        let x4 = self.reshape(input, &[cin, 1, h, w])?;
        let w5 = self.reshape(weight, &[cout, cin, 1, kh, kw])?;
        let y = self.conv_general(x4, w5, bias, [1, stride, stride], [0, pad, pad], "conv2d")?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3]])
    }

    /// 3-D cross-correlation of `[cin, d, h, w]` with `[cout, cin, kd, kh, kw]`,
    /// same stride and padding on every axis.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv3d_axes(input, weight, bias, [stride; 3], [pad; 3])
    }

    /// [`Graph::conv3d`] with per-axis stride and padding `(d, h, w)`.
    pub fn conv3d_axes(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        self.conv_general(input, weight, bias, stride, pad, "conv3d")
    }

    fn conv_general(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
        label: &'static str,
    ) -> Result<Var> {
        let [cin, d, h, w] = split4(self.shape(input), "conv input")?;
        let [cout, wcin, kd, kh, kw] = split5(self.shape(weight), "conv weight")?;
        if cin != wcin {
            return Err(dim_err!("{label} input has {cin} channels, weight expects {wcin}"));
        }
        check_bias(self, bias, cout)?;
        let k = [kd, kh, kw];
        let n = [d, h, w];
        let mut o = [0; 3];
        for ax in 0..3 {
            o[ax] = conv_out_extent(n[ax], k[ax], stride[ax], pad[ax])?;
        }
        let geo = Geometry { a: cout, b: cin, o, i: n, k, s: stride, p: pad };
        let mut out = vec![0.0; cout * geo.o_vol()];
        geo.gather(self.value(input).data(), self.value(weight).data(), &mut out);
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b).data(), geo.o_vol());
        }
        self.count_muls(label, (cout * cin * geo.k_vol() * geo.o_vol()) as u64);
        let value = Tensor::new(&[cout, o[0], o[1], o[2]], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.custom(&inputs, value, move |args| {
            let g = args.grad_output;
            let gx = args.needs[0].then(|| {
                let mut gx = vec![0.0; cin * geo.i_vol()];
                geo.scatter(g, args.inputs[1].data(), &mut gx);
                gx
            });
            let gw = args.needs[1].then(|| {
                let mut gw = vec![0.0; cout * cin * geo.k_vol()];
                geo.weight_grad(g, args.inputs[0].data(), &mut gw);
                gw
            });
            let mut res = vec![gx, gw];
            if args.inputs.len() == 3 {
                res.push(args.needs[2].then(|| bias_grad(g, cout, geo.o_vol())));
            }
            res
        }))
    }

    /// 3-D transposed convolution of `[cin, d, h, w]` with `[cin, cout, kd, kh, kw]`.
    ///
    /// Output extent per axis is `(n - 1) * stride - 2 * pad + k`; with
    /// `k = 4, stride = 2, pad = 1` that is exactly `2n`.
    pub fn deconv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [cin, d, h, w] = split4(self.shape(input), "deconv input")?;
        let [wcin, cout, kd, kh, kw] = split5(self.shape(weight), "deconv weight")?;
        if cin != wcin {
            return Err(dim_err!("deconv3d input has {cin} channels, weight expects {wcin}"));
        }
        if stride == 0 {
            return Err(dim_err!("stride must be positive"));
        }
        check_bias(self, bias, cout)?;
        let k = [kd, kh, kw];
        let n = [d, h, w];
        let mut o = [0; 3];
        for ax in 0..3 {
            let full = (n[ax] - 1) * stride + k[ax];
            if full <= 2 * pad {
                return Err(dim_err!("deconv3d output extent is not positive on axis {ax}"));
            }
            o[ax] = full - 2 * pad;
            // Every output index must be reachable from the input grid.
            if conv_out_extent(o[ax], k[ax], stride, pad)? != n[ax] {
                return Err(dim_err!(
                    "deconv3d configuration k={}, s={stride}, p={pad} is not the adjoint of a convolution on axis {ax}",
                    k[ax]
                ));
            }
        }
        // Relation seen from the convolution this transposes: dense side is
        // the deconv input, sampled side is the deconv output.
        let geo = Geometry { a: cin, b: cout, o: n, i: o, k, s: [stride; 3], p: [pad; 3] };
        let mut out = vec![0.0; cout * geo.i_vol()];
        geo.scatter(self.value(input).data(), self.value(weight).data(), &mut out);
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b).data(), geo.i_vol());
        }
        self.count_muls("deconv3d", (cin * cout * geo.k_vol() * geo.o_vol()) as u64);
        let value = Tensor::new(&[cout, o[0], o[1], o[2]], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.custom(&inputs, value, move |args| {
            let g = args.grad_output;
            let gx = args.needs[0].then(|| {
                let mut gx = vec![0.0; cin * geo.o_vol()];
                geo.gather(g, args.inputs[1].data(), &mut gx);
                gx
            });
            let gw = args.needs[1].then(|| {
                let mut gw = vec![0.0; cin * cout * geo.k_vol()];
                geo.weight_grad(args.inputs[0].data(), g, &mut gw);
                gw
            });
            let mut res = vec![gx, gw];
            if args.inputs.len() == 3 {
                res.push(args.needs[2].then(|| bias_grad(g, cout, geo.i_vol())));
            }
            res
        }))
    }
}
