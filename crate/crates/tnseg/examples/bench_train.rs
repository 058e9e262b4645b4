use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
use tnseg::data::synth::{synth_domain_pair, SynthConfig};
use tnseg::data::Dataset;
use tnseg::nets::NormKind;
use tnseg::train::{prepare, sample_batch, train_step, TrainConfig, TrainState};

fn main() {
    let synth = SynthConfig { image_size: 128, seed: 1, ..SynthConfig::default() };
    let (source, mut targets) = synth_domain_pair(&synth, 4, 4).unwrap();
    let target_test = targets.split_off(2);
    let dataset = Dataset { source, target_train: targets, target_test };

    for (depth, base, batch) in [(2usize, 8usize, 8usize), (2, 8, 16), (3, 16, 64)] {
        let cfg = TrainConfig {
            iters: 100,
            batch_src: batch,
            batch_tgt: batch,
            depth,
            base_channels: base,
            norm: NormKind::Tn,
            lambda_d: 1e-3,
            ..TrainConfig::default()
        };
        let data = prepare(&dataset).unwrap();
        let mut state = TrainState::new(&cfg);
        // warmup
        let b = sample_batch(&data, &cfg, 0).unwrap();
        train_step(&mut state, &b, &cfg, 0).unwrap();
        let t0 = Instant::now();
        let reps = 5;
        for i in 1..=reps {
            let b = sample_batch(&data, &cfg, i).unwrap();
            train_step(&mut state, &b, &cfg, i).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("depth {depth} base {base} batch {batch}+{batch}: {:.0} ms/iter -> 2000 iters = {:.1} min", dt * 1e3, dt * 2000.0 / 60.0);
    }
}
