//! Time one training step (forward, backward) at several widths.
//!
//! `cargo run --release -p msnn --example bench_step`

use std::time::Instant;

use msnn::data::{synthetic_dataset, QuantMode, Split};
use msnn::model::{build_network, NetworkConfig};
use msnn::noise::{CurrentConfig, NoiseConfig, NANOAMP};
use msnn::trainer::{compute_step, TrainConfig};

const REPEATS: usize = 3;

fn main() -> msnn::Result<()> {
    let batch = synthetic_dataset(64, 10, 0, Split::Train).quantized(4, QuantMode::Round);
    for (c1, c2, f) in [(16, 32, 64), (32, 64, 128), (65, 120, 390)] {
        let net = NetworkConfig {
            conv1_filters: c1,
            conv2_filters: c2,
            fc1_units: f,
            ..NetworkConfig::default()
        };
        let state = build_network(&net, 0)?;
        for noisy in [false, true] {
            let mut cfg = TrainConfig::default();
            if noisy {
                cfg.noise = NoiseConfig::accurate(CurrentConfig::uniform(NANOAMP));
            }
            let mut rng = msnn::rng::stream(0, 0);
            let start = Instant::now();
            for _ in 0..REPEATS {
                compute_step(&state, &batch.images, &batch.labels, &cfg, &mut rng)?;
            }
            let per = start.elapsed().as_secs_f64() / REPEATS as f64;
            println!("{c1}/{c2}/{f} noise={}: {per:.3} s per batch of 64", if noisy { "accurate" } else { "none" });
        }
    }
    Ok(())
}
