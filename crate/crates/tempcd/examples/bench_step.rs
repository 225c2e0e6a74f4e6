// temporary: time training steps at the default config
use tempcd::config::Config;
use tempcd::train::{train, TrainOptions};
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    cfg.optim.steps = 10;
    let opts = TrainOptions { quiet: true, ..Default::default() };
    let t0 = Instant::now();
    let out = train(cfg, &opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("10 steps in {:.2}s -> {:.3}s/step; first loss {:.4} last {:.4}",
        dt, dt / 10.0, out.first_loss.total, out.last_loss.total);
    println!("projected 2000 steps: {:.1} min wall", dt / 10.0 * 2000.0 / 60.0);
}
