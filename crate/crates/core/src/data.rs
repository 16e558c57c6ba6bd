//! Synthetic random-texture stereo pairs with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::validate_extents;
use crate::error::{config_err, dim_err, Result};
use crate::regression::DisparityMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    /// `[3, H, W]` in `[-1, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// Full-resolution disparity of the left view; occluded pixels invalid.
    pub gt: DisparityMap,
    pub seed: u64,
}

/// Per-pixel uniform RGB noise in `[-1, 1]`, blurred with a separable
/// `[1, 2, 1] / 4` kernel and clamped borders.
fn texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    blur(Tensor::uniform(&[3, h, w], -1.0, 1.0, rng))
}

fn blur(raw: Tensor) -> Tensor {
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let mut tmp = Tensor::zeros(&[3, h, w]);
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let l = raw.get(&[c, y, x.saturating_sub(1)]);
                let r = raw.get(&[c, y, (x + 1).min(w - 1)]);
                tmp.set(&[c, y, x], 0.25 * l + 0.5 * raw.get(&[c, y, x]) + 0.25 * r);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let u = tmp.get(&[c, y.saturating_sub(1), x]);
                let d = tmp.get(&[c, (y + 1).min(h - 1), x]);
                out.set(&[c, y, x], 0.25 * u + 0.5 * tmp.get(&[c, y, x]) + 0.25 * d);
            }
        }
    }
    out
}

/// Piecewise-constant integer disparity: a background level and 3–6 rectangles.
fn disparity_field<R: Rng + ?Sized>(h: usize, w: usize, max_disp: usize, rng: &mut R) -> Vec<usize> {
    let mut field = vec![rng.gen_range(0..max_disp); h * w];
    let n = rng.gen_range(3..=6);
    for _ in 0..n {
        let rw = rng.gen_range(w / 8..=w / 2);
        let rh = rng.gen_range(h / 8..=h / 2);
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        let d = rng.gen_range(0..max_disp);
        for y in y0..y0 + rh {
            field[y * w + x0..y * w + x0 + rw].iter_mut().for_each(|v| *v = d);
        }
    }
    field
}

/// Builds a stereo pair from a left-view disparity field (row-major `h × w`).
///
/// Left content moves `d` pixels leftward into the right view. Where several
/// left pixels land on one right pixel the larger disparity wins; losers and
/// pixels leaving the frame are marked invalid. Right pixels nobody reaches
/// get fresh texture.
pub fn rds_from_disparity(field: &[usize], h: usize, w: usize, seed: u64) -> Result<StereoSample> {
    if field.len() != h * w {
        return Err(dim_err!("disparity field has {} entries for {h}×{w}", field.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e47);
    let left = texture(h, w, &mut rng);
    let fill = texture(h, w, &mut rng);
    let mut right = fill;
    let mut valid = vec![false; h * w];
    let mut owner: Vec<Option<usize>> = vec![None; w];
    for y in 0..h {
        owner.iter_mut().for_each(|o| *o = None);
        for x in 0..w {
            let d = field[y * w + x];
            if d > x {
                continue;
            }
            let t = x - d;
            match owner[t] {
                Some(prev) if field[y * w + prev] >= d => {}
                _ => owner[t] = Some(x),
            }
        }
        for (t, o) in owner.iter().enumerate() {
            if let Some(x) = *o {
                valid[y * w + x] = true;
                for c in 0..3 {
                    right.set(&[c, y, t], left.get(&[c, y, x]));
                }
            }
        }
    }
    let gt = Tensor::new(&[h, w], field.iter().map(|&d| d as f64).collect())?;
    Ok(StereoSample {
        left,
        right,
        gt: DisparityMap::new(gt, 1, valid)?,
        seed,
    })
}

/// Random stereo pair of `h × w` with disparities in `[0, max_disp)`.
pub fn rds_generate(h: usize, w: usize, max_disp: usize, seed: u64) -> Result<StereoSample> {
    validate_extents(h, w)?;
    if max_disp == 0 || !max_disp.is_multiple_of(4) {
        return Err(config_err!("max disparity {max_disp} must be a positive multiple of 4"));
    }
    if max_disp > w / 2 {
        return Err(config_err!("max disparity {max_disp} exceeds half the width {w}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = disparity_field(h, w, max_disp, &mut rng);
    rds_from_disparity(&field, h, w, seed)
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    /// Window `[y0, y0+ch) × [x0, x0+cw)`; pixels whose match leaves the
    /// window become invalid.
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<StereoSample> {
        let (h, w) = (self.height(), self.width());
        if y0 + ch > h || x0 + cw > w {
            return Err(dim_err!("crop exceeds {h}×{w}"));
        }
        let cut = |t: &Tensor| {
            let mut out = Tensor::zeros(&[3, ch, cw]);
            for c in 0..3 {
                for y in 0..ch {
                    for x in 0..cw {
                        out.set(&[c, y, x], t.get(&[c, y0 + y, x0 + x]));
                    }
                }
            }
            out
        };
        let mut gt = Tensor::zeros(&[ch, cw]);
        let mut valid = vec![false; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                let d = self.gt.values.get(&[y0 + y, x0 + x]);
                gt.set(&[y, x], d);
                valid[y * cw + x] = self.gt.valid[(y0 + y) * w + x0 + x] && d <= x as f64;
            }
        }
        Ok(StereoSample {
            left: cut(&self.left),
            right: cut(&self.right),
            gt: DisparityMap::new(gt, 1, valid)?,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_copies_left() {
        let s = rds_from_disparity(&vec![0; 32 * 64], 32, 64, 9).unwrap();
        assert_eq!(s.left, s.right);
        assert!(s.gt.valid.iter().all(|&v| v));
    }

    #[test]
    fn constant_shift() {
        let (h, w, d) = (32, 64, 5);
        let s = rds_from_disparity(&vec![d; h * w], h, w, 4).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w - d {
                    assert_eq!(s.right.get(&[c, y, x]), s.left.get(&[c, y, x + d]));
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                assert_eq!(s.gt.valid[y * w + x], x >= d);
            }
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = rds_generate(64, 128, 32, 77).unwrap();
        let b = rds_generate(64, 128, 32, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, rds_generate(64, 128, 32, 78).unwrap());
        assert!(a.gt.values.data().iter().all(|&d| (0.0..=31.0).contains(&d)));
        assert!(a.left.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn occluded_pixels_invalid() {
        // A near strip at disparity 6 in front of a far background at 2.
        let (h, w) = (32, 64);
        let mut field = vec![2; h * w];
        for y in 0..h {
            for x in 20..30 {
                field[y * w + x] = 6;
            }
        }
        let s = rds_from_disparity(&field, h, w, 1).unwrap();
        // Background pixels x in 16..20 land on 14..18, inside the strip's
        // targets 14..24, so they are occluded.
        for x in 16..20 {
            assert!(!s.gt.valid[5 * w + x], "x={x}");
        }
        assert!(s.gt.valid[5 * w + 25]);
        assert!(s.gt.valid[5 * w + 40]);
    }

    #[test]
    fn too_large_disparity() {
        assert!(matches!(rds_generate(32, 64, 36, 0), Err(crate::Error::Config(_))));
    }
}
