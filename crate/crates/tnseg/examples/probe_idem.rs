use tnseg::data::preprocess::{clahe, preprocess, standardize_fov};
use tnseg::data::synth::{synth_domain_pair, SynthConfig};

fn stats(name: &str, a: &tnseg::Tensor, b: &tnseg::Tensor, fov: &tnseg::Tensor) {
    let (mut close, mut total, mut maxd) = (0usize, 0usize, 0.0f64);
    for ((x, y), m) in a.data().iter().zip(b.data()).zip(fov.data()) {
        if *m == 1.0 {
            total += 1;
            let d = (x - y).abs();
            maxd = maxd.max(d);
            if d < 1.0 { close += 1; }
        }
    }
    println!("{name}: stable={:.3} maxdiff={maxd:.2}", close as f64 / total as f64);
}

fn range(name: &str, t: &tnseg::Tensor, fov: &tnseg::Tensor) {
    let vals: Vec<f64> = t.data().iter().zip(fov.data()).filter(|(_, &m)| m == 1.0).map(|(&v, _)| v).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("{name}: range [{lo:.2}, {hi:.2}]");
}

fn main() {
    let cfg = SynthConfig { image_size: 256, seed: 2, ..SynthConfig::default() };
    let (sources, _) = synth_domain_pair(&cfg, 1, 0).unwrap();
    let (px, fov) = (&sources[0].pixels, &sources[0].fov);
    let p1 = preprocess(px, fov).unwrap();
    range("after pass1", &p1, fov);
    let s2 = standardize_fov(&p1, fov).unwrap();
    stats("standardize2 vs pass1", &s2, &p1, fov);
    range("after standardize2", &s2, fov);
    let c2 = clahe(&s2, 8, 2.0).unwrap();
    stats("clahe2(s2) vs s2", &c2, &s2, fov);
    let p2 = preprocess(&p1, fov).unwrap();
    stats("pass2 vs pass1", &p2, &p1, fov);
}
