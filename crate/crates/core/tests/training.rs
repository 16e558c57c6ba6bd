use volstereo::data::rds_generate;
use volstereo::train::{evaluate, thread_pool, TrainState};
use volstereo::Config;

#[test]
fn memorises_a_single_sample() {
    let cfg = Config { steps: 500, batch_size: 1, crop_width: 128, eval_interval: 0, ..Config::default() };
    let pool = thread_pool(1).unwrap();
    let set = vec![rds_generate(64, 128, 32, 5).unwrap()];
    let mut state = TrainState::new(cfg).unwrap();
    let before = evaluate(&state.model, &set, 2, &pool).unwrap().epe;
    while state.step < state.config.steps {
        state.step(&set, &pool).unwrap();
    }
    let after = evaluate(&state.model, &set, 2, &pool).unwrap().epe;
    assert!(before > 5.0 && after < 1.5, "EPE {before:.3} -> {after:.3}");
}
