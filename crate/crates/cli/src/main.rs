use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use volstereo::io::{disparity_preview, image_to_view, read_dataset, read_pfm, write_dataset, write_pfm, Image};
use volstereo::loss::metrics;
use volstereo::neighborhood::{flops_gce, flops_neighborhood};
use volstereo::train::{evaluate, generate_set, load_model, thread_pool, train_seed_base, LogRow, TrainState};
use volstereo::{AggBaseline, Config, DisparityMap, Error, GceMode, Result, StereoSample};

const CHECKPOINT: &str = "checkpoint.snap";

#[derive(Parser)]
#[command(name = "volstereo", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("VOLSTEREO_BUILD"), ")"))]
#[command(about = "Train and run a small volumetric stereo network on synthetic stereograms")]
struct Cli {
    /// JSON experiment config. Every key is optional; see `volstereo config` for defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Output does not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelFlags {
    /// Top-k for regression (training k for `train`, test-time k otherwise).
    #[arg(long)]
    k: Option<usize>,
    /// off | one | full | additive
    #[arg(long, value_parser = parse_enum::<GceMode>)]
    gce_mode: Option<GceMode>,
    /// gce | neighborhood
    #[arg(long, value_parser = parse_enum::<AggBaseline>)]
    baseline: Option<AggBaseline>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Write the training and held-out stereogram sets to disk.
    GenData {
        /// Target directory; `train/` and `eval/` are created inside it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        eval_samples: Option<usize>,
    },
    /// Train a model, writing a checkpoint and `log.csv` to the output directory.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset root written by `gen-data`; generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out set.
    Eval {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict disparity for one stereo pair.
    Infer {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Directory for `disp.pfm` and `disp.pgm`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Ground-truth PFM; prints EPE when given.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every op and the full model.
    Gradcheck,
    /// Multiply counts of one guided and one neighbourhood aggregation step.
    Costmodel {
        #[arg(long = "cI", default_value_t = 32)]
        c_i: u64,
        #[arg(long, default_value_t = 8)]
        c: u64,
        #[arg(long, default_value_t = 48)]
        d: u64,
        #[arg(long, default_value_t = 72)]
        h: u64,
        #[arg(long, default_value_t = 96)]
        w: u64,
        #[arg(long, default_value_t = 3)]
        n: u64,
    },
    /// Run the built-in fixtures.
    Selftest,
}

/// `4423680` → `4,423,680`.
fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Json(_) => 4,
        Error::Io(_) => 5,
        Error::Format(_) => 6,
        Error::Dimension(_) => 7,
        Error::Contract(_) => 8,
        Error::Numeric(_) => 9,
        Error::Range(_) => 10,
        Error::EmptySupervision => 11,
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => with_path(p, Config::load(p))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

impl ModelFlags {
    fn apply(&self, cfg: &mut Config, training: bool) {
        if let Some(k) = self.k {
            if training {
                cfg.top_k = k;
            } else {
                cfg.eval_top_k = Some(k);
            }
        }
        if let Some(m) = self.gce_mode {
            cfg.gce_mode = m;
        }
        if let Some(b) = self.baseline {
            cfg.agg_baseline = b;
        }
    }
}

fn load_split(cfg: &Config, root: Option<&Path>, split: &str, train: bool) -> Result<Vec<StereoSample>> {
    let pool = thread_pool(cfg.threads)?;
    match root.or(cfg.data_dir.as_deref()) {
        Some(root) => {
            let dir = root.join(split);
            let set = with_path(&dir, read_dataset(&dir))?;
            if set.is_empty() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{}: no samples", dir.display()),
                )));
            }
            Ok(set)
        }
        None if train => generate_set(cfg, train_seed_base(cfg), cfg.train_samples, &pool),
        None => generate_set(cfg, cfg.eval_seed_base, cfg.eval_samples, &pool),
    }
}

fn read_view(path: &Path) -> Result<volstereo::Tensor> {
    let img = with_path(path, Image::read(path))?;
    Ok(image_to_view(&img))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Config => {
            cfg.validate()?;
            writeln!(out, "{}", cfg.to_json())?;
        }
        Command::GenData { out: dir, train_samples, eval_samples } => {
            cfg.train_samples = train_samples.unwrap_or(cfg.train_samples);
            cfg.eval_samples = eval_samples.unwrap_or(cfg.eval_samples);
            cfg.validate()?;
            let root = dir.or(cfg.data_dir.clone()).unwrap_or_else(|| PathBuf::from("data"));
            let pool = thread_pool(cfg.threads)?;
            let train = generate_set(&cfg, train_seed_base(&cfg), cfg.train_samples, &pool)?;
            let eval = generate_set(&cfg, cfg.eval_seed_base, cfg.eval_samples, &pool)?;
            write_dataset(&root.join("train"), &train)?;
            write_dataset(&root.join("eval"), &eval)?;
            writeln!(out, "wrote {} training and {} held-out samples to {}", train.len(), eval.len(), root.display())?;
        }
        Command::Train { model, steps, lr, out: dir, data, resume } => {
            model.apply(&mut cfg, true);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.out_dir = dir.unwrap_or(cfg.out_dir);
            cfg.validate()?;
            let train = load_split(&cfg, data.as_deref(), "train", true)?;
            let eval = load_split(&cfg, data.as_deref(), "eval", false)?;
            let pool = thread_pool(cfg.threads)?;
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("config.json"), cfg.to_json())?;
            let mut state = match &resume {
                Some(p) => with_path(p, TrainState::load_checkpoint(cfg.clone(), p))?,
                None => TrainState::new(cfg.clone())?,
            };
            let log_path = cfg.out_dir.join("log.csv");
            let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
            writeln!(log, "{}", LogRow::CSV_HEADER)?;
            let mut io_err = None;
            state.run(&train, &eval, &pool, |row| {
                if let Err(e) = writeln!(log, "{}", row.to_csv()) {
                    io_err.get_or_insert(e);
                }
                if let Some(m) = row.metrics {
                    let _ = writeln!(out, "step {:>5}  loss {:.4}  epe {:.3}  >3px {:.2}%  d1 {:.2}%", row.step, row.loss, m.epe, m.out3, m.d1);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            log.flush()?;
            let ckpt = cfg.out_dir.join(CHECKPOINT);
            state.save_checkpoint(&ckpt)?;
            info!("checkpoint written to {}", ckpt.display());
            writeln!(out, "checkpoint {}", ckpt.display())?;
        }
        Command::Eval { model, checkpoint, data } => {
            model.apply(&mut cfg, false);
            cfg.validate()?;
            let net = with_path(&checkpoint, load_model(&cfg, &checkpoint))?;
            let eval = load_split(&cfg, data.as_deref(), "eval", false)?;
            let pool = thread_pool(cfg.threads)?;
            let m = evaluate(&net, &eval, cfg.eval_k(), &pool)?;
            writeln!(
                out,
                "{{\"samples\":{},\"k\":{},\"epe\":{},\"out3\":{},\"d1\":{}}}",
                eval.len(),
                cfg.eval_k(),
                m.epe,
                m.out3,
                m.d1
            )?;
        }
        Command::Infer { model, checkpoint, left, right, out: dir, gt } => {
            model.apply(&mut cfg, false);
            let (l, r) = (read_view(&left)?, read_view(&right)?);
            if l.shape() != r.shape() {
                return Err(Error::Dimension(format!("left is {:?} but right is {:?}", l.shape(), r.shape())));
            }
            cfg.height = l.shape()[1];
            cfg.width = l.shape()[2];
            cfg.validate()?;
            let net = with_path(&checkpoint, load_model(&cfg, &checkpoint))?;
            let d = net.predict(&l, &r, cfg.eval_k())?;
            fs::create_dir_all(&dir)?;
            write_pfm(&d, &dir.join("disp.pfm"))?;
            disparity_preview(&d, cfg.max_disparity as f64)?.write(&dir.join("disp.pgm"))?;
            writeln!(out, "wrote {} and {}", dir.join("disp.pfm").display(), dir.join("disp.pgm").display())?;
            if let Some(gt) = gt {
                let t = with_path(&gt, read_pfm(&gt))?;
                let m = metrics(&d, &DisparityMap::dense(t, 1)?)?;
                writeln!(out, "epe {:.4}  >3px {:.2}%  d1 {:.2}%", m.epe, m.out3, m.d1)?;
            }
        }
        Command::Gradcheck => {
            let results = volstereo::verify::gradient_suite(cfg.seed)?;
            let mut failed = 0;
            for r in &results {
                failed += usize::from(!r.passed);
                let verdict = if r.passed { "ok  " } else { "FAIL" };
                writeln!(out, "{verdict} {:<40} max rel err {:.3e} (tol {:.0e})", r.name, r.max_rel_error, r.tol)?;
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", results.len())));
            }
        }
        Command::Costmodel { c_i, c, d, h, w, n } => {
            let gce = flops_gce(c_i, c, d, h, w);
            let neigh = flops_neighborhood(c_i, c, d, h, w, n);
            writeln!(out, "guided excitation:      {} multiplies", grouped(gce))?;
            writeln!(out, "neighbourhood (n = {n}): {} multiplies", grouped(neigh))?;
            if gce > 0 {
                writeln!(out, "ratio: {}", neigh as f64 / gce as f64)?;
            }
        }
        Command::Selftest => {
            let checks = volstereo::verify::selftest();
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
            for c in &checks {
                let verdict = if c.passed { "ok  " } else { "FAIL" };
                writeln!(out, "{verdict} {} {}", c.name, c.detail)?;
            }
            if !failed.is_empty() {
                return Err(Error::Contract(format!("{} of {} fixtures failed", failed.len(), checks.len())));
            }
            writeln!(out, "{} fixtures passed", checks.len())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("volstereo: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
