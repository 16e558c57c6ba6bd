//! Trains a small model on random-dot stereograms and reports held-out error.
//!
//! `cargo run --release --example quick_train -- [steps]`

use volstereo::loss::metrics;
use volstereo::train::{generate_set, thread_pool, train_seed_base, TrainState};
use volstereo::Config;

fn main() -> volstereo::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps must be an integer"));
    let cfg = Config { steps, train_samples: 50, eval_samples: 8, eval_interval: 0, ..Config::default() };
    let pool = thread_pool(std::thread::available_parallelism().map_or(1, |n| n.get()))?;
    let train = generate_set(&cfg, train_seed_base(&cfg), cfg.train_samples, &pool)?;
    let held_out = generate_set(&cfg, cfg.eval_seed_base, cfg.eval_samples, &pool)?;

    let mut state = TrainState::new(cfg)?;
    while state.step < state.config.steps {
        let loss = state.step(&train, &pool)?;
        if state.step % 50 == 0 {
            println!("step {:>5}  loss {loss:.3}", state.step);
        }
    }
    for (i, s) in held_out.iter().enumerate() {
        let pred = state.model.predict(&s.left, &s.right, state.config.top_k)?;
        println!("held-out {i}: EPE {:.3} px", metrics(&pred, &s.gt)?.epe);
    }
    Ok(())
}
