//! Training and evaluation loops.
//!
//! Each step draws `batch_size` random crops, records one graph per crop and
//! sums the per-crop gradients in batch order. Work is spread over a rayon
//! pool but the merge order is fixed, so results are identical for any
//! thread count.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::config::Config;
use crate::data::{rds_generate, StereoSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{smooth_l1_loss, Metrics, MetricsAccumulator};
use crate::model::StereoModel;
use crate::optim::Adam;
use crate::params::{ParamGrads, ParamStore};
use crate::snapshot::{read_snapshot, write_snapshot};
use crate::tensor::Tensor;

pub struct TrainState {
    pub model: StereoModel,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: usize,
    pub config: Config,
}

/// One row of the metrics log. `metrics` is present on evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,loss,epe,out3,d1";

    pub fn to_csv(&self) -> String {
        match self.metrics {
            Some(m) => format!("{},{:.6},{:.6},{:.4},{:.4}", self.step, self.loss, m.epe, m.out3, m.d1),
            None => format!("{},{:.6},,,", self.step, self.loss),
        }
    }
}

pub fn thread_pool(threads: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Samples for seeds `seed_base..seed_base + count`, in seed order.
pub fn generate_set(config: &Config, seed_base: u64, count: usize, pool: &ThreadPool) -> Result<Vec<StereoSample>> {
    pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| rds_generate(config.height, config.width, config.max_disparity, seed_base + i))
            .collect()
    })
}

/// First training sample seed for a run: `seed * 10_000`.
pub fn train_seed_base(config: &Config) -> u64 {
    config.seed.wrapping_mul(10_000)
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(model: &StereoModel, sample: &StereoSample, k: usize) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let l = g.constant(sample.left.clone());
    let r = g.constant(sample.right.clone());
    let out = model.forward(&mut g, &p, l, r, k)?;
    let loss = smooth_l1_loss(&mut g, out.disparity, &sample.gt)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    Ok((value, p.collect_grads(&g, &mut grads)))
}

/// Pooled metrics of `model` over `samples`, regressing with `k`.
pub fn evaluate(model: &StereoModel, samples: &[StereoSample], k: usize, pool: &ThreadPool) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let preds: Vec<Tensor> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| model.predict(&s.left, &s.right, k))
            .collect::<Result<_>>()
    })?;
    let mut acc = MetricsAccumulator::default();
    for (p, s) in preds.iter().zip(samples) {
        acc.add(p, &s.gt)?;
    }
    acc.finish()
}

impl TrainState {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        if config.top_k == 1 {
            warn!("top_k = 1 passes no gradient through the disparity regression");
        }
        let model = StereoModel::new(config.stereo(), config.seed)?;
        let adam = Adam::new(&model.params);
        Ok(Self { model, adam, step: 0, config })
    }

    /// One optimizer step over a fresh random batch; returns the mean loss.
    pub fn step(&mut self, train_set: &[StereoSample], pool: &ThreadPool) -> Result<f64> {
        if train_set.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, self.step);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &train_set[rng.gen_range(0..train_set.len())];
            let y0 = rng.gen_range(0..=s.height() - cfg.crop_height);
            let x0 = rng.gen_range(0..=s.width() - cfg.crop_width);
            batch.push(s.crop(y0, x0, cfg.crop_height, cfg.crop_width)?);
        }
        let k = cfg.top_k;
        let model = &self.model;
        let results: Vec<(f64, ParamGrads)> = pool.install(|| {
            batch
                .par_iter()
                .map(|s| match sample_gradients(model, s, k) {
                    // A crop with every pixel occluded contributes nothing.
                    Err(Error::EmptySupervision) => Ok((0.0, model.params.zeros_like())),
                    other => other,
                })
                .collect::<Result<_>>()
        })?;

        let scale = 1.0 / batch.len() as f64;
        let mut total = model.params.zeros_like();
        let mut loss = 0.0;
        for (l, grads) in results {
            loss += l * scale;
            for (name, acc) in total.iter_mut() {
                let g = &grads[name];
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b * scale);
            }
        }
        if !loss.is_finite() || total.values().any(|t| !t.all_finite()) {
            return Err(Error::Numeric(format!("non-finite loss or gradient at step {}", self.step)));
        }
        let lr = cfg.lr_at(self.step);
        self.adam.step(&mut self.model.params, &total, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining steps. `on_log` receives every row; evaluation
    /// rows come every `eval_interval` steps and after the final step.
    pub fn run(
        &mut self,
        train_set: &[StereoSample],
        eval_set: &[StereoSample],
        pool: &ThreadPool,
        mut on_log: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        let k_eval = self.config.eval_k();
        while self.step < self.config.steps {
            let loss = self.step(train_set, pool)?;
            let done = self.step == self.config.steps;
            let interval = self.config.eval_interval;
            let metrics = if done || (interval > 0 && self.step.is_multiple_of(interval)) {
                let m = evaluate(&self.model, eval_set, k_eval, pool)?;
                info!("step {} loss {:.4} epe {:.3} out3 {:.2}% d1 {:.2}%", self.step, loss, m.epe, m.out3, m.d1);
                Some(m)
            } else {
                None
            };
            let row = LogRow { step: self.step, loss, metrics };
            on_log(&row);
            log.push(row);
        }
        Ok(log)
    }

    /// Parameters plus Adam moments and the step counter in one snapshot.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = Tensor::new(&[2], vec![self.step as f64, self.adam.t as f64])?;
        let mut list: Vec<(String, &Tensor)> = vec![("meta.step".into(), &meta)];
        for (name, t) in self.model.params.iter() {
            list.push((format!("param.{name}"), t));
        }
        for (name, t) in &self.adam.m {
            list.push((format!("adam_m.{name}"), t));
        }
        for (name, t) in &self.adam.v {
            list.push((format!("adam_v.{name}"), t));
        }
        let refs: Vec<(&str, &Tensor)> = list.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let file = std::fs::File::create(path)?;
        write_snapshot(std::io::BufWriter::new(file), &refs)
    }

    pub fn load_checkpoint(config: Config, path: &Path) -> Result<Self> {
        let list = read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut state = Self::new(config)?;
        let mut params = ParamStore::new();
        let mut meta = None;
        for (name, t) in list {
            if let Some(n) = name.strip_prefix("param.") {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix("adam_m.") {
                state.adam.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam_v.") {
                state.adam.v.insert(n.to_string(), t);
            } else if name == "meta.step" {
                meta = Some(t);
            }
        }
        let meta = meta.ok_or_else(|| Error::Format("checkpoint lacks meta.step".into()))?;
        state.step = meta.data()[0] as usize;
        state.adam.t = meta.data()[1] as u64;
        state.model = StereoModel::from_params(state.config.stereo(), params)?;
        for (name, t) in state.model.params.iter() {
            for moments in [&state.adam.m, &state.adam.v] {
                if moments.get(name).map(Tensor::shape) != Some(t.shape()) {
                    return Err(Error::Format(format!("checkpoint moments for {name} missing or misshapen")));
                }
            }
        }
        Ok(state)
    }
}

/// Loads a model from either a checkpoint or a bare parameter snapshot.
pub fn load_model(config: &Config, path: &Path) -> Result<StereoModel> {
    let list = read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let prefixed = list.iter().any(|(n, _)| n.starts_with("param."));
    let mut params = ParamStore::new();
    for (name, t) in list {
        match name.strip_prefix("param.") {
            Some(n) => params.insert(n, t),
            None if !prefixed => params.insert(name, t),
            None => {}
        }
    }
    StereoModel::from_params(config.stereo(), params)
}
