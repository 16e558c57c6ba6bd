//! Built-in fixture and gradient suites behind the `selftest` and
//! `gradcheck` commands.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AggBaseline, Config, GceMode};
use crate::cost_volume::correlate;
use crate::data::{rds_from_disparity, rds_generate};
use crate::error::Result;
use crate::gce::{additive_skip, excite, guidance, GuidanceWeights};
use crate::gradcheck::{grad_check, grad_check_inputs, sample_probes, Probe, DEFAULT_EPS};
use crate::graph::{Graph, Var};
use crate::io::{read_pfm_from, Image};
use crate::loss::{metrics, smooth_l1};
use crate::model::StereoModel;
use crate::neighborhood::{aggregate_step, edge_weights, flops_gce, flops_neighborhood, window_sum, Activation, EdgeWeights, NeighParams};
use crate::optim::Adam;
use crate::params::{BoundParams, ParamStore};
use crate::regression::{soft_argmax, superpixel_upsample, topk_soft_argmax, DisparityMap, SuperpixelWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Error text when the fixture itself failed to run.
    pub detail: String,
}

fn run(name: &'static str, f: impl FnOnce() -> Result<bool>) -> Check {
    match f() {
        Ok(passed) => Check { name, passed, detail: String::new() },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn column(g: &mut Graph, v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(&[v.len(), 1, 1], v.to_vec())?))
}

fn scalar_of(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Closed-form fixtures for every module.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    out.push(run("conv2d identity kernel", || {
        let mut g = Graph::new();
        let x = Tensor::uniform(&[1, 4, 5], -1.0, 1.0, &mut rng);
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(xv, w, None, 1, 0)?;
        Ok(g.value(y) == &x)
    }));
    out.push(run("conv2d window sum", || {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 5, 5], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0)?;
        Ok(g.value(y).data().iter().all(|&v| v == 9.0))
    }));
    out.push(run("conv3d window sum", || {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let y = g.conv3d(x, w, None, 1, 1)?;
        let v = g.value(y);
        Ok(v.get(&[0, 1, 1, 1]) == 27.0 && v.get(&[0, 2, 2, 2]) == 27.0)
    }));
    out.push(run("deconv3d output extents", || {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 4, 4, 4]));
        let y = g.deconv3d(x, w, None, 2, 1)?;
        Ok(g.shape(y) == [1, 4, 4, 4])
    }));
    out.push(run("deconv3d delta places the kernel", || {
        let mut g = Graph::new();
        let mut x = Tensor::zeros(&[1, 2, 2, 2]);
        x.set(&[0, 1, 1, 1], 1.0);
        let w = Tensor::uniform(&[1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let (xv, wv) = (g.constant(x), g.constant(w.clone()));
        let y = g.deconv3d(xv, wv, None, 2, 1)?;
        let v = g.value(y);
        let mut ok = true;
        for o in 0..2 {
            for z in 0..4 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        // Input voxel 1 lands on outputs 1..4 through taps 0..3.
                        let want = if z >= 1 && yy >= 1 && xx >= 1 { w.get(&[0, o, z - 1, yy - 1, xx - 1]) } else { 0.0 };
                        ok &= v.get(&[o, z, yy, xx]) == want;
                    }
                }
            }
        }
        Ok(ok)
    }));
    out.push(run("softmax fixtures", || {
        let mut g = Graph::new();
        let a = column(&mut g, &[0.0; 4])?;
        let s = g.softmax(a, 0)?;
        let b = column(&mut g, &[0.0, 3f64.ln()])?;
        let t = g.softmax(b, 0)?;
        let c = column(&mut g, &[0.3, -1.0, 2.0])?;
        let c17 = g.add_scalar(c, 17.0);
        let (u, v) = (g.softmax(c, 0)?, g.softmax(c17, 0)?);
        Ok(g.value(s).data().iter().all(|&p| close(p, 0.25, 1e-15))
            && close(g.value(t).data()[1], 0.75, 1e-15)
            && g.value(u).max_abs_diff(g.value(v)) < 1e-15)
    }));
    out.push(run("sigmoid and gate broadcast", || {
        let mut g = Graph::new();
        let gate = g.constant(Tensor::full(&[2, 1, 3, 3], 0.5));
        let cost = g.constant(Tensor::full(&[2, 4, 3, 3], 2.0));
        let y = excite(&mut g, cost, GuidanceWeights(gate))?;
        Ok(crate::graph::sigmoid(0.0) == 0.5 && g.shape(y) == [2, 4, 3, 3] && g.value(y).data().iter().all(|&v| v == 1.0))
    }));
    out.push(run("gradcheck on sum of squares", || {
        let r = grad_check(
            |g, v| {
                let s = g.mul(v, v)?;
                Ok(g.sum(s))
            },
            &Tensor::new(&[2], vec![1.0, 2.0])?,
            DEFAULT_EPS,
            1e-9,
        )?;
        Ok(r.passed && r.analytic == [2.0, 4.0])
    }));
    out.push(run("encoder shapes and determinism", || {
        let model = StereoModel::new(Config::default().stereo(), 0)?;
        let img = Tensor::uniform(&[3, 64, 128], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let (l, r) = (g.constant(img.clone()), g.constant(img));
        let (pl, pr) = crate::features::shared_encode(&mut g, l, r, &p)?;
        let expect = [[16, 16, 32], [24, 8, 16], [32, 4, 8], [48, 2, 4]];
        let shapes_ok = pl.levels().iter().zip(expect).all(|(&v, e)| g.shape(v) == e);
        let same = pl.levels().iter().zip(pr.levels()).all(|(&a, b)| g.value(a) == g.value(b));
        Ok(shapes_ok && same)
    }));
    out.push(run("correlation self-similarity and padding", || {
        let mut g = Graph::new();
        let mut f = Tensor::uniform(&[3, 4, 8], -1.0, 1.0, &mut rng);
        // Unit-norm feature vectors, so cost(0) is the mean of squares, 1/c.
        for p in 0..32 {
            let n: f64 = (0..3).map(|c| f.data()[c * 32 + p].powi(2)).sum::<f64>().sqrt();
            (0..3).for_each(|c| f.data_mut()[c * 32 + p] /= n);
        }
        let fv = g.constant(f);
        let cv = correlate(&mut g, fv, fv, 4)?;
        let v = g.value(cv);
        let mut ok = true;
        for y in 0..4 {
            for x in 0..8 {
                let c0 = v.get(&[0, 0, y, x]);
                ok &= close(3.0 * c0, 1.0, 1e-12);
                ok &= (1..4).all(|i| v.get(&[0, i, y, x]) <= c0 + 1e-12);
                ok &= (x + 1..4).all(|i| v.get(&[0, i, y, x]) == 0.0);
            }
        }
        Ok(ok)
    }));
    out.push(run("guidance gate limits", || {
        let mut g = Graph::new();
        let feat = g.constant(Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng));
        let w = g.constant(Tensor::zeros(&[2, 3, 1, 1]));
        let b0 = g.constant(Tensor::zeros(&[2]));
        let b20 = g.constant(Tensor::full(&[2], 20.0));
        let half = guidance(&mut g, feat, w, b0)?;
        let one = guidance(&mut g, feat, w, b20)?;
        let cost = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let cv = g.constant(cost.clone());
        let passed = excite(&mut g, cv, one)?;
        Ok(g.value(half.0).data().iter().all(|&a| a == 0.5)
            && g.value(one.0).data().iter().all(|&a| a > 1.0 - 1e-8)
            && g.value(passed).max_abs_diff(&cost) < 1e-7)
    }));
    out.push(run("excitation and additive skip keep argmax", || {
        let mut g = Graph::new();
        let cost = Tensor::uniform(&[2, 5, 3, 3], -1.0, 1.0, &mut rng);
        let cv = g.constant(cost.clone());
        let gate = g.constant(Tensor::uniform(&[2, 1, 3, 3], 0.01, 1.0, &mut rng));
        let ex = excite(&mut g, cv, GuidanceWeights(gate))?;
        let feat = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[2, 1, 1, 1], 0.7));
        let b = g.constant(Tensor::zeros(&[2]));
        let add = additive_skip(&mut g, cv, feat, w, b)?;
        let wz = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let same = additive_skip(&mut g, cv, feat, wz, b)?;
        let am = |t: &Tensor| crate::verify::argmax_disparity(t);
        Ok(am(g.value(ex)) == am(&cost) && am(g.value(add)) == am(&cost) && g.value(same) == &cost)
    }));
    out.push(run("aggregator shapes in every mode", || {
        let mut ok = true;
        for mode in [GceMode::Off, GceMode::One, GceMode::Full, GceMode::Additive] {
            let cfg = Config { gce_mode: mode, ..Config::default() };
            let model = StereoModel::new(cfg.stereo(), 0)?;
            let mut g = Graph::new();
            let p = model.params.bind_frozen(&mut g);
            let img = g.constant(Tensor::uniform(&[3, 64, 128], -1.0, 1.0, &mut rng));
            let out = model.forward(&mut g, &p, img, img, 2)?;
            ok &= g.shape(out.costs) == [8, 16, 32];
        }
        Ok(ok)
    }));
    out.push(run("soft-argmax and top-k fixtures", || {
        let mut g = Graph::new();
        let z = column(&mut g, &[0.0; 4])?;
        let z = soft_argmax(&mut g, z)?;
        let c = column(&mut g, &[1.0, 3.0, 2.0, 0.0])?;
        let c5 = column(&mut g, &[1.0, 3.0, 2.0, -5.0])?;
        let shifted = g.add_scalar(c, 4.5);
        let full = soft_argmax(&mut g, c)?;
        let full_shift = soft_argmax(&mut g, shifted)?;
        let k4 = topk_soft_argmax(&mut g, c, 4)?;
        let k1 = topk_soft_argmax(&mut g, c, 1)?;
        let k2 = topk_soft_argmax(&mut g, c, 2)?;
        let k2b = topk_soft_argmax(&mut g, c5, 2)?;
        Ok(close(scalar_of(&g, z), 1.5, 1e-15)
            && close(scalar_of(&g, full), scalar_of(&g, full_shift), 1e-12)
            && close(scalar_of(&g, k4), scalar_of(&g, full), 1e-12)
            && scalar_of(&g, k1) == 1.0
            && scalar_of(&g, k2) == scalar_of(&g, k2b))
    }));
    out.push(run("superpixel head and upsampling", || {
        let mut store = ParamStore::new();
        crate::regression::init_superpixel_head(&mut store, 4, &mut rng);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let feat = g.constant(Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng));
        let img = g.constant(Tensor::uniform(&[3, 8, 12], -1.0, 1.0, &mut rng));
        let wts = crate::regression::superpixel_head(&mut g, feat, img, &p)?;
        let uniform = g.value(wts.0).data().iter().all(|&v| close(v, 1.0 / 9.0, 1e-15));
        let coarse = g.constant(Tensor::full(&[2, 3], 1.75));
        let up = superpixel_upsample(&mut g, coarse, wts)?;
        let constant = g.value(up).data().iter().all(|&v| close(v, 7.0, 1e-12));

        let mut onehot = Tensor::zeros(&[9, 8, 12]);
        onehot.data_mut()[4 * 96..5 * 96].iter_mut().for_each(|v| *v = 1.0);
        let oh = g.constant(onehot);
        let cm = Tensor::uniform(&[2, 3], 0.0, 7.0, &mut rng);
        let cv = g.constant(cm.clone());
        let nn = superpixel_upsample(&mut g, cv, SuperpixelWeights(oh))?;
        let v = g.value(nn);
        let nearest = (0..8).all(|y| (0..12).all(|x| v.get(&[y, x]) == 4.0 * cm.get(&[y / 4, x / 4])));
        Ok(uniform && constant && nearest)
    }));
    out.push(run("neighbourhood window sum", || {
        let mut g = Graph::new();
        let cost = g.constant(Tensor::full(&[1, 2, 3, 3], 3.0));
        let e = g.constant(Tensor::full(&[9, 1, 3, 3], 1.0));
        let s = window_sum(&mut g, cost, EdgeWeights(e))?;
        let v = g.value(s);
        Ok(v.get(&[0, 0, 1, 1]) == 27.0 && v.get(&[0, 1, 0, 0]) == 12.0 && g.mul_count("neigh_update") == 9 * 2 * 9)
    }));
    out.push(run("neighbourhood uniform edges and neutral update", || {
        let mut store = ParamStore::new();
        crate::neighborhood::init_neighborhood(&mut store, "n", 2, 2, &mut rng);
        for (name, t) in store.iter_mut() {
            let eye = name.ends_with("w_self") || name.ends_with("w_neigh");
            let n = t.shape()[0];
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if eye && i % (n + 1) == 0 { 1.0 } else { 0.0 });
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let mut np = NeighParams::bind(&p, "n")?;
        np.xi = Activation::Identity;
        let feat = g.constant(Tensor::full(&[2, 4, 5], 0.3));
        let e = edge_weights(&mut g, feat, &np)?;
        let ev = g.value(e.0);
        let expect = |y: usize, x: usize| {
            let inside = |v: usize, n: usize| if v == 0 || v == n - 1 { 2.0 } else { 3.0 };
            1.0 / (inside(y, 4) * inside(x, 5))
        };
        let mut uniform = true;
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let total: f64 = (0..9).map(|j| ev.get(&[j, ch, y, x])).sum();
                    uniform &= close(total, 1.0, 1e-12);
                    uniform &= (0..9).all(|j| {
                        let v = ev.get(&[j, ch, y, x]);
                        v == 0.0 || close(v, expect(y, x), 1e-12)
                    });
                }
            }
        }
        let cost = g.constant(Tensor::full(&[2, 3, 4, 5], 1.25));
        let out = aggregate_step(&mut g, cost, e, &np)?;
        let doubled = g.value(out).data().iter().all(|&v| close(v, 2.5, 1e-12));
        Ok(uniform && doubled)
    }));
    out.push(run("superpixel output bound", || {
        let mut store = ParamStore::new();
        crate::regression::init_superpixel_head(&mut store, 4, &mut rng);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let feat = g.constant(Tensor::uniform(&[4, 4, 6], -1.0, 1.0, &mut rng));
        let img = g.constant(Tensor::uniform(&[3, 16, 24], -1.0, 1.0, &mut rng));
        let wts = crate::regression::superpixel_head(&mut g, feat, img, &p)?;
        let coarse = g.constant(Tensor::uniform(&[4, 6], 0.0, 7.0, &mut rng));
        let up = superpixel_upsample(&mut g, coarse, wts)?;
        Ok(g.value(up).data().iter().all(|&v| (0.0..=28.0).contains(&v)))
    }));
    out.push(run("cost model identities", || {
        let (ci, c, d, h, w) = (32, 8, 48, 72, 96);
        let gce = flops_gce(ci, c, d, h, w);
        Ok(gce == 4_423_680
            && flops_neighborhood(ci, c, d, h, w, 3) == 39_813_120
            && flops_gce(ci, c, 0, h, w) == ci * c * h * w
            && flops_gce(ci, c, d, 2 * h, w) == 2 * gce
            && flops_neighborhood(ci, c, d, h, w, 1) == gce)
    }));
    out.push(run("stereogram fixtures", || {
        let zero = rds_from_disparity(&[0; 32 * 64], 32, 64, 1)?;
        let shift = rds_from_disparity(&[3; 32 * 64], 32, 64, 2)?;
        let shift_ok = (0..3).all(|c| (0..32).all(|y| (0..61).all(|x| shift.right.get(&[c, y, x]) == shift.left.get(&[c, y, x + 3]))));
        Ok(zero.left == zero.right
            && zero.gt.valid.iter().all(|&v| v)
            && shift_ok
            && rds_generate(32, 64, 16, 5)? == rds_generate(32, 64, 16, 5)?)
    }));
    out.push(run("loss and metric fixtures", || {
        let m = metrics(&Tensor::new(&[1, 2], vec![1.0, 2.0])?, &DisparityMap::dense(Tensor::new(&[1, 2], vec![1.0, 4.0])?, 1)?)?;
        let gt = DisparityMap::dense(Tensor::new(&[1, 3], vec![2.0, 9.0, 0.0])?, 1)?;
        let z = metrics(&gt.values, &gt)?;
        let d1 = metrics(&Tensor::new(&[1, 1], vec![104.0])?, &DisparityMap::dense(Tensor::full(&[1, 1], 100.0), 1)?)?;
        Ok(smooth_l1(0.5) == 0.125
            && smooth_l1(2.0) == 1.5
            && smooth_l1(1.0) == 0.5
            && close(smooth_l1(1.0 - 1e-12), 0.5, 1e-11)
            && m.epe == 1.0
            && m.out3 == 0.0
            && (z.epe, z.out3, z.d1) == (0.0, 0.0, 0.0)
            && d1.out3 == 100.0
            && d1.d1 == 0.0)
    }));
    out.push(run("adam first step and zero gradient", || {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::full(&[1], 1.0));
        let mut adam = Adam::new(&p);
        let grads = [("x".to_string(), Tensor::full(&[1], 0.25))].into_iter().collect();
        adam.step(&mut p, &grads, 0.01)?;
        let moved = 1.0 - p.get("x").map_or(0.0, |t| t.data()[0]);
        let mut q = ParamStore::new();
        q.insert("x", Tensor::full(&[1], 1.0));
        let mut adam = Adam::new(&q);
        let zero = [("x".to_string(), Tensor::zeros(&[1]))].into_iter().collect();
        adam.step(&mut q, &zero, 0.01)?;
        Ok(close(moved, 0.01, 1e-6) && q.get("x").map(|t| t.data()[0]) == Some(1.0))
    }));
    out.push(run("image and disparity formats", || {
        let data = (0..12).map(|i| (i * 5000) as u16).collect();
        let img = Image::new(4, 3, 1, 65535, data)?;
        let mut buf = Vec::new();
        img.write_to(&mut buf)?;
        let back = Image::read_from(&buf[..])?;
        let mut pfm = b"Pf\n1 1\n-1.0\n".to_vec();
        pfm.extend(2.5f32.to_le_bytes());
        let range = Image::from_tensor(&Tensor::full(&[1, 1], 2.0), 0.0, 1.0, 255);
        Ok(back == img && read_pfm_from(&pfm[..])?.data() == [2.5] && matches!(range, Err(crate::Error::Range(_))))
    }));
    out
}

/// Per-pixel argmax over axis 1 of a `[c, d, h, w]` volume.
pub(crate) fn argmax_disparity(t: &Tensor) -> Vec<usize> {
    let [c, d, h, w] = *t.shape() else {
        return Vec::new();
    };
    let hw = h * w;
    (0..c * hw)
        .map(|q| {
            let (ch, p) = (q / hw, q % hw);
            (0..d)
                .max_by(|&a, &b| {
                    let (x, y) = (t.data()[(ch * d + a) * hw + p], t.data()[(ch * d + b) * hw + p]);
                    x.total_cmp(&y).then(b.cmp(&a))
                })
                .unwrap_or(0)
        })
        .collect()
}

/// Outcome of one gradient check in the suite.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn projected(inputs: &[Tensor], eps: f64, tol: f64, name: &'static str, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradResult> {
    let probes: Vec<Probe> = inputs
        .iter()
        .enumerate()
        .flat_map(|(input, t)| (0..t.numel()).map(move |element| Probe { input, element }))
        .collect();
    let r = grad_check_inputs(
        |g, v| {
            let out = f(g, v)?;
            let w = Tensor::from_fn(g.shape(out), |i| ((i * 7919) % 13) as f64 / 6.5 - 1.0);
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        },
        inputs,
        &probes,
        eps,
        tol,
    )?;
    Ok(GradResult { name, max_rel_error: r.max_rel_error, tol, passed: r.passed })
}

fn jittered(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    store
        .iter()
        .map(|(_, t)| {
            let noise = Tensor::uniform(t.shape(), -0.1, 0.1, rng);
            Tensor::from_fn(t.shape(), |i| t.data()[i] + noise.data()[i])
        })
        .collect()
}

/// Finite-difference checks of every differentiable op (tolerance 1e-6)
/// and of the full training loss over a 200-parameter sample (1e-4).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let tol = 1e-6;
    let e = DEFAULT_EPS;
    let mut out = vec![
        projected(&[u(&[2, 3]), u(&[2, 3])], e, tol, "add/sub/mul", |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            g.mul(s, v[1])
        })?,
        projected(&[u(&[2, 3, 4]), u(&[3, 1]), u(&[1, 4])], e, tol, "broadcast scale_shift", |g, v| {
            g.scale_shift(v[0], v[1], v[2])
        })?,
        projected(&[u(&[3, 4])], e, tol, "sigmoid/exp/leaky", |g, v| {
            let a = g.sigmoid(v[0]);
            let b = g.exp(v[0]);
            let c = g.leaky_relu(v[0], 0.1);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })?,
        projected(&[u(&[4, 2, 3])], e, tol, "softmax", |g, v| g.softmax(v[0], 0))?,
        projected(&[u(&[4, 2, 3])], e, tol, "sum_axis/mean", |g, v| {
            let s = g.sum_axis(v[0], 1)?;
            let m = g.mean(v[0]);
            g.add(s, m)
        })?,
        projected(&[u(&[3, 4]), u(&[4, 5])], e, tol, "matmul", |g, v| g.matmul(v[0], v[1]))?,
        projected(&[u(&[2, 3, 2])], e, tol, "upsample_nearest", |g, v| g.upsample_nearest(v[0], 2))?,
        projected(&[u(&[2, 3]), u(&[1, 3])], e, tol, "concat", |g, v| g.concat0(&[v[0], v[1]]))?,
        projected(&[u(&[2, 6, 5]), u(&[3, 2, 3, 3]), u(&[3])], e, tol, "conv2d", |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        })?,
        projected(&[u(&[2, 4, 4, 4]), u(&[2, 2, 3, 3, 3]), u(&[2])], e, tol, "conv3d", |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), 2, 1)
        })?,
        projected(&[u(&[2, 2, 2, 2]), u(&[2, 1, 4, 4, 4]), u(&[1])], e, tol, "deconv3d", |g, v| {
            g.deconv3d(v[0], v[1], Some(v[2]), 2, 1)
        })?,
        projected(&[u(&[3, 3, 6]), u(&[3, 3, 6])], e, tol, "correlate", |g, v| correlate(g, v[0], v[1], 4))?,
        projected(&[u(&[2, 3, 2, 3]), u(&[3, 2, 3]), u(&[2, 3, 1, 1]), u(&[2])], e, tol, "guidance+excite", |g, v| {
            let a = guidance(g, v[1], v[2], v[3])?;
            excite(g, v[0], a)
        })?,
        projected(&[u(&[2, 3, 2, 3]), u(&[3, 2, 3]), u(&[2, 3, 1, 1]), u(&[2])], e, tol, "additive_skip", |g, v| {
            additive_skip(g, v[0], v[1], v[2], v[3])
        })?,
        projected(&[u(&[2, 2, 3, 4]), u(&[9, 2, 3, 4])], e, tol, "window_sum", |g, v| {
            window_sum(g, v[0], EdgeWeights(v[1]))
        })?,
        projected(&[u(&[5, 2, 3]).map(|v| 3.0 * v)], e, tol, "soft_argmax", |g, v| soft_argmax(g, v[0]))?,
        projected(
            &[Tensor::from_fn(&[5, 2, 3], |i| ((i * 7) % 11) as f64 * 0.4)],
            e,
            tol,
            "topk_soft_argmax (stable selection)",
            |g, v| topk_soft_argmax(g, v[0], 2),
        )?,
        projected(&[u(&[2, 2]).map(|v| v + 3.0), u(&[9, 8, 8]).map(|v| v + 1.5)], e, tol, "superpixel_upsample", |g, v| {
            superpixel_upsample(g, v[0], SuperpixelWeights(v[1]))
        })?,
    ];

    let gt = DisparityMap::dense(Tensor::zeros(&[1, 4]), 1)?;
    let pred = Tensor::new(&[1, 4], vec![0.999, 1.001, -0.4, 2.0])?;
    let r = grad_check_inputs(
        |g, v| crate::loss::smooth_l1_loss(g, v[0], &gt),
        std::slice::from_ref(&pred),
        &(0..4).map(|element| Probe { input: 0, element }).collect::<Vec<_>>(),
        1e-6,
        tol,
    )?;
    out.push(GradResult { name: "smooth_l1_loss", max_rel_error: r.max_rel_error, tol, passed: r.passed });

    for (name, mode, base) in [
        ("end-to-end (gce full)", GceMode::Full, AggBaseline::Gce),
        ("end-to-end (neighbourhood)", GceMode::Full, AggBaseline::Neighborhood),
    ] {
        let cfg = Config {
            height: 32,
            width: 64,
            max_disparity: 32,
            feature_widths: [3, 3, 4, 4],
            agg_widths: [2, 2, 2, 2],
            gce_mode: mode,
            agg_baseline: base,
            ..Config::default()
        };
        let model = StereoModel::new(cfg.stereo(), seed)?;
        let sample = rds_generate(32, 64, 32, seed)?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let inputs = jittered(&model.params, &mut rng);
        let probes = sample_probes(&inputs, 200, &mut rng);
        let r = grad_check_inputs(
            |g, v| {
                let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(v.iter().copied()));
                let l = g.constant(sample.left.clone());
                let rt = g.constant(sample.right.clone());
                let o = model.forward(g, &bound, l, rt, 8)?;
                crate::loss::smooth_l1_loss(g, o.disparity, &sample.gt)
            },
            &inputs,
            &probes,
            1e-6,
            1e-4,
        )?;
        out.push(GradResult { name, max_rel_error: r.max_rel_error, tol: 1e-4, passed: r.passed });
    }
    Ok(out)
}
