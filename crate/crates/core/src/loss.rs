//! Smooth-L1 supervision and disparity error metrics.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::regression::DisparityMap;
use crate::tensor::Tensor;

/// `0.5 x²` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn check_same(pred: &[usize], gt: &DisparityMap) -> Result<()> {
    if pred != gt.values.shape() {
        return Err(dim_err!("prediction {pred:?} vs ground truth {:?}", gt.values.shape()));
    }
    Ok(())
}

/// Mean smooth-L1 of `gt - pred` over valid pixels.
pub fn smooth_l1_loss(g: &mut Graph, pred: Var, gt: &DisparityMap) -> Result<Var> {
    check_same(g.shape(pred), gt)?;
    let n = gt.valid_count();
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    let p = g.value(pred).data();
    let t = gt.values.data();
    let valid = gt.valid.clone();
    let total: f64 = (0..p.len()).filter(|&i| valid[i]).map(|i| smooth_l1(t[i] - p[i])).sum();
    let inv_n = 1.0 / n as f64;
    let target = t.to_vec();
    Ok(g.custom(&[pred], Tensor::scalar(total * inv_n), move |args| {
        let p = args.inputs[0].data();
        let go = args.grad_output[0] * inv_n;
        let gp = (0..p.len())
            .map(|i| if valid[i] { -go * smooth_l1_grad(target[i] - p[i]) } else { 0.0 })
            .collect();
        vec![Some(gp)]
    }))
}

/// End-point error and outlier percentages over valid pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    /// Mean absolute disparity error in pixels.
    pub epe: f64,
    /// Percentage of pixels with error above 3 px.
    pub out3: f64,
    /// Percentage of pixels with error above both 3 px and 5 % of ground truth.
    pub d1: f64,
    pub count: usize,
}

/// Pools metrics over many maps.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    abs_sum: f64,
    out3: usize,
    d1: usize,
    count: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &Tensor, gt: &DisparityMap) -> Result<()> {
        check_same(pred.shape(), gt)?;
        for ((&p, &t), &v) in pred.data().iter().zip(gt.values.data()).zip(&gt.valid) {
            if !v {
                continue;
            }
            let e = (p - t).abs();
            self.abs_sum += e;
            self.count += 1;
            if e > 3.0 {
                self.out3 += 1;
                if e > 0.05 * t.abs() {
                    self.d1 += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::EmptySupervision);
        }
        let n = self.count as f64;
        Ok(Metrics {
            epe: self.abs_sum / n,
            out3: 100.0 * self.out3 as f64 / n,
            d1: 100.0 * self.d1 as f64 / n,
            count: self.count,
        })
    }
}

pub fn metrics(pred: &Tensor, gt: &DisparityMap) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> DisparityMap {
        DisparityMap::dense(Tensor::new(&[1, v.len()], v.to_vec()).unwrap(), 1).unwrap()
    }

    fn loss_of(pred: f64, gt: f64) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 1], vec![pred]).unwrap());
        let l = smooth_l1_loss(&mut g, p, &map(&[gt])).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn smooth_l1_fixtures() {
        assert_eq!(loss_of(0.0, 0.5), 0.125);
        assert_eq!(loss_of(0.0, 2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(0.5 * 1.0f64 * 1.0, 0.5);
        assert_eq!(loss_of(3.0, 3.0), 0.0);
    }

    #[test]
    fn empty_supervision() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 2]));
        let gt = DisparityMap::new(Tensor::zeros(&[1, 2]), 1, vec![false, false]).unwrap();
        assert!(matches!(smooth_l1_loss(&mut g, p, &gt), Err(Error::EmptySupervision)));
    }

    #[test]
    fn metric_fixtures() {
        let m = metrics(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), &map(&[1.0, 4.0])).unwrap();
        assert_eq!(m.epe, 1.0);
        assert_eq!(m.out3, 0.0);

        let m = metrics(&Tensor::new(&[1, 1], vec![104.0]).unwrap(), &map(&[100.0])).unwrap();
        assert_eq!(m.out3, 100.0);
        assert_eq!(m.d1, 0.0);

        let gt = map(&[3.0, 7.0, 0.5]);
        let m = metrics(&gt.values, &gt).unwrap();
        assert_eq!((m.epe, m.out3, m.d1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn invalid_pixels_ignored() {
        let gt = DisparityMap::new(Tensor::new(&[1, 2], vec![1.0, 50.0]).unwrap(), 1, vec![true, false]).unwrap();
        let m = metrics(&Tensor::new(&[1, 2], vec![1.5, 0.0]).unwrap(), &gt).unwrap();
        assert_eq!(m.epe, 0.5);
        assert_eq!(m.count, 1);
    }
}
