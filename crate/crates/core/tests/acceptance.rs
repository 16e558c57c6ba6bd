//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 train nine desk-scale models; they run concurrently on
//! all available cores and take a while on a small machine.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volstereo::cost_volume::correlate;
use volstereo::data::{rds_from_disparity, rds_generate};
use volstereo::gce::{additive_skip, excite, guidance, gce_block};
use volstereo::io::{image_to_view, read_pfm_from, view_to_image, write_pfm_to, Image};
use volstereo::loss::{metrics, smooth_l1, Metrics};
use volstereo::neighborhood::{
    aggregate_step, flops_gce, flops_neighborhood, init_neighborhood, neighborhood_block, EdgeWeights, NeighParams,
};
use volstereo::params::ParamStore;
use volstereo::regression::{soft_argmax, topk_soft_argmax};
use volstereo::train::{evaluate, generate_set, thread_pool, train_seed_base, TrainState};
use volstereo::verify::gradient_suite;
use volstereo::{Config, DisparityMap, GceMode, Graph, StereoModel, Tensor};

enum Verdict {
    Pass,
    Fail,
    /// Statistical criterion that did not hold; reported, not fatal.
    Flag,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=4);
        let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=1));

        let x = rand_t(&[cin, 8, 8], &mut rng);
        let w = rand_t(&[cout, cin, 3, 3], &mut rng);
        let b = rand_t(&[cout], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        worst = worst.max(g.value(y).max_abs_diff(&common::conv2d(&x, &w, b.data(), stride, pad)));

        let x = rand_t(&[cin, 4, 8, 8], &mut rng);
        let w = rand_t(&[cout, cin, 3, 3, 3], &mut rng);
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3d(xv, wv, Some(bv), stride, 1).unwrap();
        worst = worst.max(g.value(y).max_abs_diff(&common::conv3d(&x, &w, b.data(), stride, 1)));

        let fl = rand_t(&[cin, 8, 8], &mut rng);
        let fr = rand_t(&[cin, 8, 8], &mut rng);
        let dq = rng.gen_range(1..=8);
        let (l, r) = (g.constant(fl.clone()), g.constant(fr.clone()));
        let y = correlate(&mut g, l, r, dq).unwrap();
        worst = worst.max(g.value(y).max_abs_diff(&common::correlate(&fl, &fr, dq)));

        let mut store = ParamStore::new();
        init_neighborhood(&mut store, "n", 3, cout, &mut rng);
        store.get_mut("n.b").unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let cost = rand_t(&[cout, 4, 8, 8], &mut rng);
        let edges = rand_t(&[9, cout, 8, 8], &mut rng);
        let bound = store.bind_frozen(&mut g);
        let np = NeighParams::bind(&bound, "n").unwrap();
        let (cv, ev) = (g.constant(cost.clone()), g.constant(edges.clone()));
        let y = aggregate_step(&mut g, cv, EdgeWeights(ev), &np).unwrap();
        let want = common::aggregate_step(
            &cost,
            &edges,
            store.get("n.w_self").unwrap(),
            store.get("n.w_neigh").unwrap(),
            store.get("n.b").unwrap(),
        );
        worst = worst.max(g.value(y).max_abs_diff(&want));
    }
    let t = t0.elapsed();
    outcome(worst <= 1e-12 && t < Duration::from_secs(10), format!("max deviation {worst:.2e}, {t:.2?}"))
}

fn degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let dq = 16;
    let mut worst = 0.0f64;
    let mut argmax_ok = true;
    let mut grad_zero = true;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..dq).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let c = g.param(Tensor::new(&[dq, 1, 1], v.clone()).unwrap());
        let full = soft_argmax(&mut g, c).unwrap();
        let kd = topk_soft_argmax(&mut g, c, dq).unwrap();
        worst = worst.max((g.value(full).data()[0] - g.value(kd).data()[0]).abs());

        let k1 = topk_soft_argmax(&mut g, c, 1).unwrap();
        let best = (0..dq).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        argmax_ok &= g.value(k1).data()[0] == best as f64;
        let s = g.sum(k1);
        let grads = g.backward(s).unwrap();
        grad_zero &= grads.get(c).is_none_or(|t| t.data().iter().all(|&x| x == 0.0));
    }
    outcome(
        worst <= 1e-12 && argmax_ok && grad_zero,
        format!("k=Dq vs soft-argmax {worst:.2e}; k=1 exact argmax {argmax_ok}, zero gradient {grad_zero}"),
    )
}

fn masking_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut topk_unchanged, mut full_changed, mut cases) = (true, true, 0);
    for _ in 0..100 {
        let d = rng.gen_range(4..=16);
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let selected = volstereo::regression::select_top_k(&v, 2);
        let run = |vals: &[f64], k: Option<usize>| {
            let mut g = Graph::new();
            let c = g.constant(Tensor::new(&[vals.len(), 1, 1], vals.to_vec()).unwrap());
            let out = match k {
                Some(k) => topk_soft_argmax(&mut g, c, k).unwrap(),
                None => soft_argmax(&mut g, c).unwrap(),
            };
            g.value(out).data()[0]
        };
        let (base_k, base_full) = (run(&v, Some(2)), run(&v, None));
        for j in (0..d).filter(|j| !selected.contains(j)) {
            let mut p = v.clone();
            p[j] -= 10.0;
            topk_unchanged &= run(&p, Some(2)).to_bits() == base_k.to_bits();
            full_changed &= run(&p, None) != base_full;
            cases += 1;
        }
    }
    outcome(
        topk_unchanged && full_changed,
        format!("{cases} perturbations: k=2 bitwise unchanged {topk_unchanged}, full soft-argmax changed {full_changed}"),
    )
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let results = gradient_suite(7).unwrap();
    let t = t0.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let worst_op = results.iter().filter(|r| r.tol < 1e-5).map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_e2e = results.iter().filter(|r| r.tol >= 1e-5).map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && t < Duration::from_secs(120),
        format!("{} checks, worst per-op {worst_op:.2e}, worst end-to-end {worst_e2e:.2e}, {t:.2?}; failed {failed:?}", results.len()),
    )
}

/// Per-(channel, y, x) argmax over disparity of a `[c, d, h, w]` volume.
fn argmaxes(t: &Tensor) -> Vec<usize> {
    let [c, d, h, w] = *t.shape() else { panic!() };
    let mut out = Vec::new();
    for ch in 0..c {
        for p in 0..h * w {
            let col: Vec<f64> = (0..d).map(|i| t.data()[(ch * d + i) * h * w + p]).collect();
            out.push((0..d).fold(0, |b, i| if col[i] > col[b] { i } else { b }));
        }
    }
    out
}

fn gce_identity() -> Outcome {
    // Saturated gates: every guidance projection emits logit 40, and
    // sigmoid(40) rounds to exactly 1.0 in double precision.
    let cfg = Config::default();
    let full = StereoModel::new(Config { gce_mode: GceMode::Full, ..cfg.clone() }.stereo(), 3).unwrap();
    let mut saturated = full.params.clone();
    for (name, t) in saturated.iter_mut() {
        if name.contains(".gce.") {
            let v = if name.ends_with(".b") { 40.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
    let saturated = StereoModel::from_params(full.config.clone(), saturated).unwrap();
    let mut plain = ParamStore::new();
    for (name, t) in saturated.params.iter().filter(|(n, _)| !n.contains(".gce.")) {
        plain.insert(name, t.clone());
    }
    let off = StereoModel::from_params(Config { gce_mode: GceMode::Off, ..cfg }.stereo(), plain).unwrap();
    let s = rds_generate(64, 128, 32, 77).unwrap();
    let a = saturated.predict(&s.left, &s.right, 2).unwrap();
    let b = off.predict(&s.left, &s.right, 2).unwrap();
    let bitwise = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut preserved = true;
    for _ in 0..32 {
        let (c, d, h, w, ci) = (rng.gen_range(1..=4), rng.gen_range(2..=12), rng.gen_range(1..=6), rng.gen_range(1..=6), 3);
        let cost = rand_t(&[c, d, h, w], &mut rng);
        let mut g = Graph::new();
        let cv = g.constant(cost.clone());
        let feat = g.constant(rand_t(&[ci, h, w], &mut rng).map(|v| 3.0 * v));
        let fw = g.constant(rand_t(&[c, ci, 1, 1], &mut rng).map(|v| 3.0 * v));
        let fb = g.constant(rand_t(&[c], &mut rng));
        let alpha = guidance(&mut g, feat, fw, fb).unwrap();
        let ex = excite(&mut g, cv, alpha).unwrap();
        let add = additive_skip(&mut g, cv, feat, fw, fb).unwrap();
        let want = argmaxes(&cost);
        preserved &= argmaxes(g.value(ex)) == want && argmaxes(g.value(add)) == want;
    }
    outcome(bitwise && preserved, format!("saturated gates bit-identical to the unguided hourglass {bitwise}; argmax kept on 32 volumes {preserved}"))
}

fn cost_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut ratio_ok = true;
    for _ in 0..50 {
        let dims: [u64; 5] = std::array::from_fn(|_| rng.gen_range(1..=256));
        let n = rng.gen_range(1..=9);
        let [ci, c, d, h, w] = dims;
        ratio_ok &= flops_neighborhood(ci, c, d, h, w, n) == n * n * flops_gce(ci, c, d, h, w);
    }

    let (ci, c, d, h, w) = (5usize, 3usize, 6usize, 4usize, 7usize);
    let mut g = Graph::new();
    let feat = g.constant(rand_t(&[ci, h, w], &mut rng));
    let mut store = ParamStore::new();
    volstereo::gce::init_guidance(&mut store, "s", ci, c, &mut rng);
    init_neighborhood(&mut store, "n", ci, c, &mut rng);
    let bound = store.bind_frozen(&mut g);
    let cost = g.constant(rand_t(&[c, d, h, w], &mut rng));
    g.reset_mul_counts();
    gce_block(&mut g, &bound, "s", cost, feat).unwrap();
    let (cm, dm, hm, wm, cim) = (c as u64, d as u64, h as u64, w as u64, ci as u64);
    let gce_counted = g.mul_count("gce_weights") + g.mul_count("gce_update");
    let gce_ok = gce_counted == flops_gce(cim, cm, dm, hm, wm)
        && g.mul_count("gce_update") == cm * dm * hm * wm;

    let np = NeighParams::bind(&bound, "n").unwrap();
    let edges = g.constant(Tensor::full(&[9, c, h, w], 1.0 / 9.0));
    g.reset_mul_counts();
    aggregate_step(&mut g, cost, EdgeWeights(edges), &np).unwrap();
    let update_term = flops_neighborhood(cim, cm, dm, hm, wm, 3) - cim * 9 * cm * hm * wm;
    let neigh_ok = g.mul_count("neigh_update") == update_term;
    outcome(
        ratio_ok && gce_ok && neigh_ok,
        format!("ratio n² on 50 tuples {ratio_ok}; excite counters {gce_ok}; aggregate_step counter {neigh_ok}"),
    )
}

fn loss_fixtures() -> Outcome {
    let h = 1e-7;
    let left_slope = (smooth_l1(1.0) - smooth_l1(1.0 - h)) / h;
    let right_slope = (smooth_l1(1.0 + h) - smooth_l1(1.0)) / h;
    let c1 = (left_slope - 1.0).abs() < 1e-6 && (right_slope - 1.0).abs() < 1e-6;
    let c0 = (smooth_l1(1.0 - 1e-12) - smooth_l1(1.0 + 1e-12)).abs() < 1e-11 && smooth_l1(1.0) == 0.5;
    let m = |p: Vec<f64>, t: Vec<f64>| -> Metrics {
        let n = p.len();
        metrics(&Tensor::new(&[1, n], p).unwrap(), &DisparityMap::dense(Tensor::new(&[1, n], t).unwrap(), 1).unwrap()).unwrap()
    };
    let a = m(vec![1.0, 2.0], vec![1.0, 4.0]);
    let b = m(vec![104.0], vec![100.0]);
    let z = m(vec![3.0, 7.5, 0.0], vec![3.0, 7.5, 0.0]);
    let ok = smooth_l1(0.5) == 0.125
        && smooth_l1(2.0) == 1.5
        && c0
        && c1
        && a.epe == 1.0
        && a.out3 == 0.0
        && b.out3 == 100.0
        && b.d1 == 0.0
        && (z.epe, z.out3, z.d1) == (0.0, 0.0, 0.0);
    outcome(ok, format!("smooth-L1 fixtures, C¹ at |x|=1 (slopes {left_slope:.6}, {right_slope:.6}), EPE/out-3/D1 fixtures"))
}

struct Run {
    name: String,
    seed: u64,
    mode: GceMode,
    k: usize,
}

struct Trained {
    model: StereoModel,
    /// Held-out EPE at the training k, and at k=2.
    epe: f64,
    epe_k2: f64,
    secs: f64,
}

fn desk_config() -> Config {
    Config::default()
}

fn train_one(run: &Run) -> Trained {
    let t0 = Instant::now();
    let cfg = Config { seed: run.seed, gce_mode: run.mode, top_k: run.k, eval_interval: 0, ..desk_config() };
    let pool = thread_pool(1).unwrap();
    let train = generate_set(&cfg, train_seed_base(&cfg), cfg.train_samples, &pool).unwrap();
    let held_out = generate_set(&cfg, cfg.eval_seed_base, cfg.eval_samples, &pool).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    while state.step < state.config.steps {
        state.step(&train, &pool).unwrap();
    }
    let epe = evaluate(&state.model, &held_out, run.k, &pool).unwrap().epe;
    let epe_k2 = if run.k == 2 { epe } else { evaluate(&state.model, &held_out, 2, &pool).unwrap().epe };
    eprintln!("  trained {} seed {}: EPE {epe:.3} (k=2: {epe_k2:.3}) in {:.0?}", run.name, run.seed, t0.elapsed());
    Trained { model: state.model, epe, epe_k2, secs: t0.elapsed().as_secs_f64() }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

fn training_criteria() -> (Outcome, Outcome) {
    let dq = desk_config().max_disparity / 4;
    let mut runs = Vec::new();
    for seed in 0..3 {
        runs.push(Run { name: "full/k2".into(), seed, mode: GceMode::Full, k: 2 });
        runs.push(Run { name: "off/k2".into(), seed, mode: GceMode::Off, k: 2 });
        runs.push(Run { name: format!("full/k{dq}"), seed, mode: GceMode::Full, k: dq });
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Trained>>> = runs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = runs.get(i) else { break };
                *slots[i].lock().unwrap() = Some(train_one(run));
            });
        }
    });
    let trained: Vec<Trained> = slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect();
    let pick = |name: &str| -> Vec<&Trained> {
        runs.iter().zip(&trained).filter(|(r, _)| r.name == name).map(|(_, t)| t).collect()
    };
    let full = pick("full/k2");
    let off = pick("off/k2");
    let kd = pick(&format!("full/k{dq}"));

    // Criterion 8 is the seed-0 reference run, plus inference on a
    // zero-disparity stereogram written to and read back from disk.
    let reference = full[0];
    let zero = rds_from_disparity(&vec![0; 64 * 128], 64, 128, 4242).unwrap();
    let roundtrip = |t: &Tensor| {
        let mut buf = Vec::new();
        view_to_image(t).unwrap().write_to(&mut buf).unwrap();
        image_to_view(&Image::read_from(&buf[..]).unwrap())
    };
    let pred = reference.model.predict(&roundtrip(&zero.left), &roundtrip(&zero.right), 2).unwrap();
    let mut pfm = Vec::new();
    write_pfm_to(&pred, &mut pfm).unwrap();
    let pred = read_pfm_from(&pfm[..]).unwrap();
    let zero_epe = metrics(&pred, &zero.gt).unwrap().epe;
    let c8 = outcome(
        reference.epe < 1.5 && zero_epe < 1.0,
        format!(
            "held-out EPE {:.3} px after {} steps ({:.0} s); zero-disparity inference EPE {zero_epe:.3} px",
            reference.epe,
            desk_config().steps,
            reference.secs
        ),
    );

    let e = |v: &[&Trained], f: fn(&Trained) -> f64| v.iter().map(|t| f(t)).collect::<Vec<f64>>();
    let (full_m, full_s) = mean_std(&e(&full, |t| t.epe));
    let (off_m, off_s) = mean_std(&e(&off, |t| t.epe));
    let (kd_m, kd_s) = mean_std(&e(&kd, |t| t.epe));
    // Paired gain from switching a k=Dq model to k=2 at test time.
    let gains: Vec<f64> = kd.iter().map(|t| t.epe - t.epe_k2).collect();
    let (gain_m, gain_s) = mean_std(&gains);
    let gce_helps = full_m <= off_m;
    let topk_helps = full_m <= kd_m;
    let no_swap_gain = gain_m <= gain_s;
    let detail = format!(
        "EPE full {full_m:.3}±{full_s:.3} vs off {off_m:.3}±{off_s:.3} [{}]; k=2 {full_m:.3} vs k={dq} {kd_m:.3}±{kd_s:.3} [{}]; \
         k={dq} model at k=2 gains {gain_m:.3}±{gain_s:.3} [{}]",
        if gce_helps { "ok" } else { "inverted" },
        if topk_helps { "ok" } else { "inverted" },
        if no_swap_gain { "within noise" } else { "beyond 1σ" },
    );
    let c9 = Outcome { verdict: if gce_helps && topk_helps && no_swap_gain { Verdict::Pass } else { Verdict::Flag }, detail };
    (c8, c9)
}

fn median_time(mut f: impl FnMut()) -> Duration {
    let mut times: Vec<Duration> = (0..9)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}

fn aggregation_speed() -> Outcome {
    // One guided step at the finest hourglass site of the default model.
    let (ci, c, d, h, w) = (16, 4, 8, 16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut store = ParamStore::new();
    volstereo::gce::init_guidance(&mut store, "s", ci, c, &mut rng);
    init_neighborhood(&mut store, "n", ci, c, &mut rng);
    let feat = rand_t(&[ci, h, w], &mut rng);
    let cost = rand_t(&[c, d, h, w], &mut rng);
    let step = |neigh: bool| {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let f = g.constant(feat.clone());
        let cv = g.param(cost.clone());
        let out = if neigh {
            neighborhood_block(&mut g, &bound, "n", cv, f).unwrap()
        } else {
            gce_block(&mut g, &bound, "s", cv, f).unwrap()
        };
        let s = g.sum(out);
        g.backward(s).unwrap();
    };
    let t_gce = median_time(|| step(false));
    let t_neigh = median_time(|| step(true));
    let ratio = t_neigh.as_secs_f64() / t_gce.as_secs_f64();
    outcome(ratio >= 2.0, format!("forward+backward per step: excitation {t_gce:.2?}, neighbourhood {t_neigh:.2?}, {ratio:.1}× slower"))
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "oracle equivalence", oracle_equivalence()),
        (2, "top-k degeneracy", degeneracy()),
        (3, "masking independence", masking_independence()),
        (4, "gradient suite", gradient_checks()),
        (5, "excitation identity and invariance", gce_identity()),
        (6, "cost model", cost_model()),
        (7, "loss and metric fixtures", loss_fixtures()),
    ];
    for (n, name, o) in &results {
        print_line(*n, name, o);
    }
    let (c8, c9) = training_criteria();
    print_line(8, "desk-scale training", &c8);
    print_line(9, "directional ablations", &c9);
    let c10 = aggregation_speed();
    print_line(10, "excitation vs neighbourhood speed", &c10);
    results.extend([(8, "", c8), (9, "", c9), (10, "", c10)]);

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| matches!(o.verdict, Verdict::Fail)).map(|r| r.0).collect();
    println!("acceptance finished in {:.0?}", t0.elapsed());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn print_line(n: u32, name: &str, o: &Outcome) {
    let tag = match o.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Flag => "FAIL (flagged, statistical)",
    };
    println!("{tag} criterion {n}: {name}: {}", o.detail);
}
