use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

// C [m x n] += A [m x k] * B [k x n], all row-major.
// Micro-kernel: MR x NR accumulator tile, k innermost, plain Rust.
fn gemm_tiled(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const MR: usize = 4;
    const NR: usize = 16;
    let mut j = 0;
    while j < n {
        let nr = NR.min(n - j);
        let mut i = 0;
        while i < m {
            let mr = MR.min(m - i);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..k {
                    let brow = &b[p * n + j..p * n + j + NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + p];
                        for q in 0..NR {
                            acc[r][q] += av * brow[q];
                        }
                    }
                }
                for r in 0..MR {
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for q in 0..NR {
                        crow[q] += acc[r][q];
                    }
                }
            } else {
                for r in 0..mr {
                    for p in 0..k {
                        let av = a[(i + r) * k + p];
                        let brow = &b[p * n + j..p * n + j + nr];
                        let crow = &mut c[(i + r) * n + j..(i + r) * n + j + nr];
                        for q in 0..nr {
                            crow[q] += av * brow[q];
                        }
                    }
                }
            }
            i += mr;
        }
        j += nr;
    }
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    // conv shapes: m=Cout, k=Cin*9, n=H*W
    for (m, k, n, reps) in [(16usize, 144usize, 4096usize, 50usize), (64, 576, 1024, 50), (16, 9, 4096, 50), (32, 288, 1024, 100)] {
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        let macs = (m * k * n) as f64;

        let t0 = Instant::now();
        for _ in 0..reps {
            unsafe { matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1); }
        }
        let mm = macs * reps as f64 / t0.elapsed().as_secs_f64() / 1e9;

        // transposed: C' [n x m] = B' [n x k] x A' [k x m]
        let mut ct = vec![0.0; m * n];
        let t0 = Instant::now();
        for _ in 0..reps {
            unsafe { matrixmultiply::dgemm(n, k, m, 1.0, b.as_ptr(), 1, n as isize, a.as_ptr(), 1, k as isize, 0.0, ct.as_mut_ptr(), 1, n as isize); }
        }
        let mmt = macs * reps as f64 / t0.elapsed().as_secs_f64() / 1e9;

        let t0 = Instant::now();
        for _ in 0..reps {
            c.iter_mut().for_each(|v| *v = 0.0);
            gemm_tiled(m, k, n, &a, &b, &mut c);
        }
        let tiled = macs * reps as f64 / t0.elapsed().as_secs_f64() / 1e9;

        println!("m={m:4} k={k:4} n={n:5}: dgemm {mm:6.2}  dgemm-T {mmt:6.2}  tiled {tiled:6.2}  GMAC/s");
    }
}
