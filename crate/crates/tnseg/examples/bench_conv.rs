use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tnseg::tape::Tape;
use tnseg::tensor::Tensor;

fn rt(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_case(name: &str, n: usize, cin: usize, cout: usize, hw: usize, reps: usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x = rt(&[n, cin, hw, hw], &mut rng);
    let w = rt(&[cout, cin, 3, 3], &mut rng);
    let b = rt(&[cout], &mut rng);
    // warmup
    {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
        let o = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        let l = tape.sum_all(o).unwrap();
        tape.backward(l).unwrap();
    }
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
        let o = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        let l = tape.sum_all(o).unwrap();
        tape.backward(l).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let macs_fwd = (n * cout * hw * hw * cin * 9) as f64;
    let total = macs_fwd * 3.0; // fwd + dW + dX
    println!("{name}: {:.1} ms/iter(f+b)  ~{:.2} GMAC/s", dt * 1e3, total / dt / 1e9);
}

fn main() {
    bench_case("b128 c16->16 64x64", 128, 16, 16, 64, 3);
    bench_case("b128 c192->64 16x16", 128, 192, 64, 16, 3);
    bench_case("b32 c8->8 64x64", 32, 8, 8, 64, 5);
    bench_case("b32 c48->16 32x32", 32, 48, 16, 32, 5);
}
