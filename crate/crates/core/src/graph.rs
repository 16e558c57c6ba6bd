//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] as they are evaluated. Each node
//! owns its output value; values are never mutated after recording, so a
//! node's inputs always precede it on the tape and a single reverse sweep
//! computes every gradient.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// A backward rule returns one optional gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// The recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    muls: BTreeMap<&'static str, u64>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a node computed outside the built-in op set.
    ///
    /// `backward` receives the input values, this node's value and the
    /// incoming gradient. It is dropped when no input requires a gradient.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds `n` to the multiply counter named `label`.
    pub fn count_muls(&mut self, label: &'static str, n: u64) {
        *self.muls.entry(label).or_insert(0) += n;
    }

    pub fn mul_count(&self, label: &str) -> u64 {
        self.muls.get(label).copied().unwrap_or(0)
    }

    pub fn mul_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.muls
    }

    pub fn reset_mul_counts(&mut self) {
        self.muls.clear();
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every node on a path from a `requires_grad` leaf to `loss` receives a
    /// gradient; contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = &node.backward else { continue };
            let Some(gout) = grads[id].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let args = BackwardArgs {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad_output: &gout,
                needs,
            };
            let input_grads = rule(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[inp.0].value.numel());
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("grad shape"))
                })
                .collect(),
        })
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let (value, maps) = if sa == sb {
            let d = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(&out_shape, d)?, None)
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            let d = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
            (Tensor::new(&out_shape, d)?, Some((ma, mb)))
        };
        Ok(self.custom(&[a, b], value, move |args| {
            let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
            let g = args.grad_output;
            let mut ga = args.needs[0].then(|| vec![0.0; x.len()]);
            let mut gb = args.needs[1].then(|| vec![0.0; y.len()]);
            for k in 0..g.len() {
                let (i, j) = match &maps {
                    Some((ma, mb)) => (ma[k], mb[k]),
                    None => (k, k),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] += g[k] * da(x[i], y[j]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += g[k] * db(x[i], y[j]);
                }
            }
            vec![ga, gb]
        }))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.custom(&[a], value, move |args| {
            let x = args.inputs[0].data();
            let y = args.output.data();
            let g = args
                .grad_output
                .iter()
                .enumerate()
                .map(|(i, &g)| g * df(x[i], y[i]))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.custom(&[a], value, move |args| {
            vec![Some(args.grad_output.iter().map(|g| g * s).collect())]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, move |x| x + s, |_, _| 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.custom(&[a], value, move |args| {
            let x = args.inputs[0].data();
            let g = args
                .grad_output
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > 0.0 { g } else { slope * g })
                .collect();
            vec![Some(g)]
        })
    }

    /// `x * scale + shift` with broadcasting; a normalization-free affine.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let y = self.mul(x, scale)?;
        self.add(y, shift)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let n = self.value(a).numel();
        self.custom(&[a], value, move |args| {
            vec![Some(vec![args.grad_output[0]; n])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.custom(&[a], value, |args| vec![Some(args.grad_output.to_vec())]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let m = (0..n)
                    .map(|j| xd[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xd[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.custom(&[a], value, move |args| {
            let y = args.output.data();
            let g = args.grad_output;
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..n {
                        let k = base + j * inner;
                        gi[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("sum axis {axis} out of range for {shape:?}"));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.custom(&[a], value, move |args| {
            let g = args.grad_output;
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    gi[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.count_muls("matmul", (m * k * n) as u64);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.custom(&[a, b], value, move |args| {
            let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
            let g = args.grad_output;
            let ga = args.needs[0].then(|| {
                // g [m,n] · yᵀ [n,k]
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let yrow = &y[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        ga[i * k + p] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    }
                }
                ga
            });
            let gb = args.needs[1].then(|| {
                // xᵀ [k,m] · g [m,n]
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let s = x[i * k + p];
                        if s == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        gb[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, g)| *d += s * g);
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Nearest-neighbour upsampling of the last two axes of `[c, h, w]`.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || factor == 0 {
            return Err(dim_err!("upsample_nearest expects [c,h,w], got {shape:?}"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let src = &x[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let dst = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / factor];
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.custom(&[a], value, move |args| {
            let g = args.grad_output;
            let mut gi = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho {
                    for xo in 0..wo {
                        gi[(ch * h + y / factor) * w + xo / factor] += g[(ch * ho + y) * wo + xo];
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(dim_err!("concat0 of {first:?} and {s:?}"));
            }
            lead += s[0];
            sizes.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first.clone();
        shape[0] = lead;
        let value = Tensor::new(&shape, data)?;
        Ok(self.custom(parts, value, move |args| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&args.needs)
                .map(|(&n, &need)| {
                    let g = need.then(|| args.grad_output[off..off + n].to_vec());
                    off += n;
                    g
                })
                .collect()
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += s * b);
        }
    }
    out
}
