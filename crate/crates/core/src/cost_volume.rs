//! Correlation cost volume.

use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Extents `[c, d, h, w]` of a cost volume.
pub fn volume_dims(g: &Graph, v: Var) -> Result<[usize; 4]> {
    match *g.shape(v) {
        [c, d, h, w] => Ok([c, d, h, w]),
        ref s => Err(dim_err!("cost volume must be [c,d,h,w], got {s:?}")),
    }
}

/// Correlation of left and right `[c, h, w]` features over `dq` shifts.
///
/// `out[0, i, y, x] = mean_ch fl[ch, y, x] * fr[ch, y, x - i]`, zero where
/// `x < i`. Disparity `i` compares a left pixel with the right pixel `i`
/// columns to its left.
pub fn correlate(g: &mut Graph, fl: Var, fr: Var, dq: usize) -> Result<Var> {
    let sl = g.shape(fl).to_vec();
    if sl != g.shape(fr) {
        return Err(dim_err!("correlate: left {sl:?} vs right {:?}", g.shape(fr)));
    }
    let &[c, h, w] = sl.as_slice() else {
        return Err(dim_err!("correlate expects [c,h,w] features, got {sl:?}"));
    };
    if dq == 0 || dq > w {
        return Err(config_err!("{dq} disparities do not fit width {w}"));
    }
    let (l, r) = (g.value(fl).data(), g.value(fr).data());
    let hw = h * w;
    let inv_c = 1.0 / c as f64;
    let mut out = vec![0.0; dq * hw];
    for i in 0..dq {
        for ch in 0..c {
            for y in 0..h {
                let lrow = &l[ch * hw + y * w..ch * hw + (y + 1) * w];
                let rrow = &r[ch * hw + y * w..ch * hw + (y + 1) * w];
                let orow = &mut out[i * hw + y * w..i * hw + (y + 1) * w];
                for x in i..w {
                    orow[x] += lrow[x] * rrow[x - i];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv_c);
    g.count_muls("correlate", (dq * c * hw) as u64);
    let value = Tensor::new(&[1, dq, h, w], out)?;
    Ok(g.custom(&[fl, fr], value, move |args| {
        let (l, r) = (args.inputs[0].data(), args.inputs[1].data());
        let gout = args.grad_output;
        let mut gl = vec![0.0; c * hw];
        let mut gr = vec![0.0; c * hw];
        for i in 0..dq {
            for ch in 0..c {
                for y in 0..h {
                    let row = ch * hw + y * w;
                    for x in i..w {
                        let go = gout[i * hw + y * w + x] * inv_c;
                        gl[row + x] += go * r[row + x - i];
                        gr[row + x - i] += go * l[row + x];
                    }
                }
            }
        }
        vec![args.needs[0].then_some(gl), args.needs[1].then_some(gr)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_channel_dot_product() {
        let mut g = Graph::new();
        // [c=2, h=1, w=2]: fl at x=1 is [1,2]; fr at x=0 is [3,4].
        let fl = g.constant(Tensor::new(&[2, 1, 2], vec![0.0, 1.0, 0.0, 2.0]).unwrap());
        let fr = g.constant(Tensor::new(&[2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        let out = correlate(&mut g, fl, fr, 2).unwrap();
        let cv = g.value(out).clone();
        assert_eq!(cv.get(&[0, 1, 0, 1]), 5.5);
        assert_eq!(cv.get(&[0, 1, 0, 0]), 0.0);
    }

    #[test]
    fn self_similarity_peaks_at_zero() {
        let mut g = Graph::new();
        let (c, h, w) = (3, 2, 6);
        let raw = Tensor::from_fn(&[c, h, w], |i| ((i * 7919) % 13) as f64 - 6.0);
        // Normalize each pixel's feature vector to unit mean-square so the
        // channel mean of its self-product is 1.
        let mut f = raw.clone();
        for y in 0..h {
            for x in 0..w {
                let n: f64 = (0..c).map(|ch| raw.get(&[ch, y, x]).powi(2)).sum::<f64>() / c as f64;
                for ch in 0..c {
                    f.set(&[ch, y, x], raw.get(&[ch, y, x]) / n.sqrt());
                }
            }
        }
        let v = g.constant(f);
        let out = correlate(&mut g, v, v, 4).unwrap();
        let cv = g.value(out).clone();
        for y in 0..h {
            for x in 0..w {
                assert!((cv.get(&[0, 0, y, x]) - 1.0).abs() < 1e-12);
                for i in 1..4 {
                    assert!(cv.get(&[0, i, y, x]) <= cv.get(&[0, 0, y, x]) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn too_many_disparities() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(correlate(&mut g, v, v, 5), Err(crate::Error::Config(_))));
        let u = g.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(matches!(correlate(&mut g, v, u, 2), Err(crate::Error::Dimension(_))));
    }
}
