use tnseg::data::preprocess::preprocess;
use tnseg::data::synth::{synth_domain_pair, SynthConfig};

fn main() {
    for size in [96usize, 128, 256] {
        let cfg = SynthConfig { image_size: size, seed: 2, ..SynthConfig::default() };
        let (sources, targets) = synth_domain_pair(&cfg, 5, 5).unwrap();
        let mut all_p90 = Vec::new();
        let mut imgs: Vec<(tnseg::Tensor, tnseg::Tensor)> = sources.into_iter().map(|s| (s.pixels, s.fov)).collect();
        imgs.extend(targets.into_iter().map(|t| (t.pixels, t.fov)));
        for (px, fov) in &imgs {
            let p1 = preprocess(px, fov).unwrap();
            let p2 = preprocess(&p1, fov).unwrap();
            let mut diffs: Vec<f64> = p1.data().iter().zip(p2.data()).zip(fov.data())
                .filter(|(_, &m)| m == 1.0)
                .map(|((a, b), _)| (a - b).abs())
                .collect();
            diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p90 = diffs[(diffs.len() as f64 * 0.9) as usize];
            let p50 = diffs[diffs.len() / 2];
            all_p90.push(p90);
            print!("[{p50:.1}/{p90:.1}] ");
        }
        let worst = all_p90.iter().cloned().fold(0.0f64, f64::max);
        println!("\nsize {size}: worst P90 = {worst:.2}");
    }
}
