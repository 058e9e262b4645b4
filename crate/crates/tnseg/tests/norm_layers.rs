//! Batch/transfer normalization contracts: worked examples, weight-sum and
//! equivariance invariants, gradient checks through the statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tnseg::gradcheck::{grad_check, DEFAULT_STEP};
use tnseg::norm::{
    bn_forward_eval, bn_forward_train, channel_distance, channel_probability, tn_forward_eval,
    tn_forward_train, tn_forward_train_frozen_eta, BnState, DistanceKind, ProbKind, TnState,
};
use tnseg::tape::Tape;
use tnseg::tensor::Tensor;
use tnseg::{Domain, Result};

fn rt(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn default_tn(channels: usize) -> TnState {
    TnState::new(channels, DistanceKind::NormalizedMean, ProbKind::StudentT)
}

#[test]
fn bn_standardizes_a_simple_channel() {
    let mut state = BnState::new(1);
    state.eps = 1e-12;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let (out, _) = bn_forward_train(&mut tape, x, &mut state).unwrap();
    let got = tape.value(out).data();
    let s = (2.0f64 / 3.0).sqrt();
    for (g, e) in got.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
        assert!((g - e).abs() < 1e-6, "{got:?}");
    }
    assert!((got[0] + 1.2247).abs() < 1e-4);
}

#[test]
fn bn_affine_applies_after_standardization() {
    let mut state = BnState::new(1);
    state.gamma = Tensor::from_vec(vec![2.0]);
    state.beta = Tensor::from_vec(vec![5.0]);
    state.eps = 1e-12;
    // already zero mean, unit variance
    let vals = vec![-1.0, 1.0, -1.0, 1.0];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vals.clone()).unwrap());
    let (out, _) = bn_forward_train(&mut tape, x, &mut state).unwrap();
    for (g, v) in tape.value(out).data().iter().zip(&vals) {
        assert!((g - (2.0 * v + 5.0)).abs() < 1e-9);
    }
}

#[test]
fn bn_constant_channel_maps_to_beta() {
    let mut state = BnState::new(2);
    state.beta = Tensor::from_vec(vec![0.25, -0.75]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2, 1, 3], vec![3.0; 6]).unwrap());
    let (out, _) = bn_forward_train(&mut tape, x, &mut state).unwrap();
    let got = tape.value(out).data();
    for &g in &got[..3] {
        assert!((g - 0.25).abs() < 1e-9);
    }
    for &g in &got[3..] {
        assert!((g + 0.75).abs() < 1e-9);
    }
}

#[test]
fn bn_train_requires_two_samples() {
    let mut state = BnState::new(1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    assert!(bn_forward_train(&mut tape, x, &mut state).is_err());
}

#[test]
fn bn_train_output_is_standardized_pre_affine() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut state = BnState::new(3); // gamma=1, beta=0
        let mut tape = Tape::new();
        let x = tape.constant(rt(&[2, 3, 4, 4], &mut rng));
        let (out, _) = bn_forward_train(&mut tape, x, &mut state).unwrap();
        let (mean, var) = tnseg::tape::batch_channel_moments(tape.value(out));
        for m in mean {
            assert!(m.abs() < 1e-9);
        }
        for v in var {
            // variance of the standardized channel is 1/(1 + eps/var_batch)
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn bn_eval_uses_running_stats_and_keeps_them() {
    let mut state = BnState::new(1);
    state.running_mean = Tensor::from_vec(vec![1.0]);
    state.running_var = Tensor::from_vec(vec![4.0]);
    state.eps = 1e-12;
    let before = state.clone();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![3.0, -1.0]).unwrap());
    let out = bn_forward_eval(&mut tape, x, &state).unwrap();
    let got = tape.value(out).data();
    assert!((got[0] - 1.0).abs() < 1e-9); // (3-1)/2
    assert!((got[1] + 1.0).abs() < 1e-9);
    assert_eq!(state.running_mean, before.running_mean);
    assert_eq!(state.running_var, before.running_var);
}

#[test]
fn bn_running_stats_update_rule() {
    let mut state = BnState::new(1);
    state.momentum = 0.1;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    bn_forward_train(&mut tape, x, &mut state).unwrap();
    // running <- 0.9 * initial + 0.1 * batch
    assert!((state.running_mean.data()[0] - 0.1 * 2.0).abs() < 1e-12);
    assert!((state.running_var.data()[0] - (0.9 + 0.1 * (2.0 / 3.0))).abs() < 1e-12);
}

#[test]
fn tn_identical_batches_double_the_bn_output() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    for round in 0..10 {
        let x = rt(&[2, 4, 3, 3], &mut rng);
        let mut tn = default_tn(4);
        // tie the affines to a shared random draw
        let gamma = rt(&[4], &mut rng);
        let beta = rt(&[4], &mut rng);
        tn.src.gamma = gamma.clone();
        tn.src.beta = beta.clone();
        tn.tgt.gamma = gamma.clone();
        tn.tgt.beta = beta.clone();
        let mut bn = BnState::new(4);
        bn.gamma = gamma;
        bn.beta = beta;

        let mut tape = Tape::new();
        let xs = tape.constant(x.clone());
        let xt = tape.constant(x.clone());
        let (os, ot, _) = tn_forward_train(&mut tape, xs, xt, &mut tn).unwrap();

        // identical sub-batches: d = 0, eta = 1 for every channel
        assert!(tn.last_d.data().iter().all(|&d| d.abs() < 1e-12), "round {round}");
        assert!(tn.last_eta.data().iter().all(|&e| (e - 1.0).abs() < 1e-12));

        let xb = tape.constant(x.clone());
        let (ob, _) = bn_forward_train(&mut tape, xb, &mut bn).unwrap();
        let (os_v, ot_v, ob_v) = (tape.value(os), tape.value(ot), tape.value(ob));
        assert_eq!(os_v.data(), ot_v.data());
        for ((s, t), b) in os_v.data().iter().zip(ot_v.data()).zip(ob_v.data()) {
            assert!((s - 2.0 * b).abs() < 1e-9);
            assert!((t - 2.0 * b).abs() < 1e-9);
        }
    }
}

#[test]
fn tn_identical_batches_with_half_gamma_recover_xhat() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let x = rt(&[1, 2, 2, 3], &mut rng);
    let mut tn = default_tn(2);
    tn.src.gamma = Tensor::from_vec(vec![0.5, 0.5]);
    tn.tgt.gamma = Tensor::from_vec(vec![0.5, 0.5]);
    tn.src.eps = 1e-13;
    tn.tgt.eps = 1e-13;
    let mut tape = Tape::new();
    let xs = tape.constant(x.clone());
    let xt = tape.constant(x.clone());
    let (os, _, _) = tn_forward_train(&mut tape, xs, xt, &mut tn).unwrap();
    // output = (1+1) * 0.5 * xhat = xhat
    let (mean, var) = tnseg::tape::batch_channel_moments(tape.value(os));
    for m in mean {
        assert!(m.abs() < 1e-9);
    }
    for v in var {
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tn_eval_target_only_doubles_standardized_input() {
    let state = default_tn(1); // running stats equal across domains -> eta = 1
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.5, -2.0]).unwrap());
    let out = tn_forward_eval(&mut tape, x, Domain::Target, &state).unwrap();
    let eps = state.tgt.eps;
    for (g, v) in tape.value(out).data().iter().zip([1.5, -2.0]) {
        assert!((g - 2.0 * v / (1.0 + eps).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn tn_single_channel_weight_is_always_one() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let mut state = default_tn(1);
    let mut tape = Tape::new();
    let xs = tape.constant(rt(&[2, 1, 3, 3], &mut rng));
    let xt = tape.constant(rt(&[2, 1, 3, 3], &mut rng).scale(3.0));
    let (os, _, _) = tn_forward_train(&mut tape, xs, xt, &mut state).unwrap();
    assert!((state.last_eta.data()[0] - 1.0).abs() < 1e-12);
    // output = 2 * (gamma xhat + beta) = 2 * xhat here
    let (_, var) = tnseg::tape::batch_channel_moments(tape.value(os));
    assert!((var[0] - 4.0).abs() < 1e-4);
}

#[test]
fn eta_sums_to_channel_count_over_random_forwards() {
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    for round in 0..100 {
        let kinds = [ProbKind::Softmax, ProbKind::Gaussian, ProbKind::StudentT];
        let dists =
            [DistanceKind::Mean, DistanceKind::Wasserstein, DistanceKind::NormalizedMean];
        let m = rng.gen_range(1..=8);
        let mut state = TnState::new(
            m,
            dists[round % dists.len()],
            kinds[round % kinds.len()],
        );
        let mut tape = Tape::new();
        let xs = tape.constant(rt(&[2, m, 3, 3], &mut rng));
        let xt = tape.constant(rt(&[2, m, 3, 3], &mut rng).scale(rng.gen_range(0.2..3.0)));
        tn_forward_train(&mut tape, xs, xt, &mut state).unwrap();
        let sum: f64 = state.last_eta.data().iter().sum();
        assert!((sum - m as f64).abs() < 1e-9, "round {round}: sum {sum} for M={m}");
        assert!(state.last_eta.data().iter().all(|&e| e > 0.0));
    }
}

#[test]
fn eta_is_permutation_equivariant() {
    let d = [0.3, 1.7, 0.05, 2.4];
    for kind in [ProbKind::Softmax, ProbKind::Gaussian, ProbKind::StudentT] {
        let eta = channel_probability(&d, kind).unwrap();
        let perm = [2usize, 0, 3, 1];
        let d_p: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
        let eta_p = channel_probability(&d_p, kind).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((eta_p[j] - eta[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn distance_kinds_match_their_formulas_on_random_stats() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    for _ in 0..50 {
        let ms = rng.gen_range(-2.0..2.0);
        let mt = rng.gen_range(-2.0..2.0);
        let vs = rng.gen_range(0.01..3.0);
        let vt = rng.gen_range(0.01..3.0);
        let eps = 1e-5;
        let d = channel_distance(&[ms], &[vs], &[mt], &[vt], DistanceKind::Mean, eps).unwrap();
        assert!((d[0] - (ms - mt).abs()).abs() < 1e-12);
        let d = channel_distance(&[ms], &[vs], &[mt], &[vt], DistanceKind::Wasserstein, eps).unwrap();
        let expect = (ms - mt) * (ms - mt) + (vs - vt) * (vs - vt);
        assert!((d[0] - expect).abs() < 1e-9);
        let d =
            channel_distance(&[ms], &[vs], &[mt], &[vt], DistanceKind::NormalizedMean, eps).unwrap();
        assert!((d[0] - (ms / (vs + eps).sqrt() - mt / (vt + eps).sqrt()).abs()).abs() < 1e-12);
    }
}

#[test]
fn bn_gradient_check_through_batch_statistics() {
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    let x = rt(&[2, 2, 3, 3], &mut rng);
    let gamma = rt(&[2], &mut rng);
    let beta = rt(&[2], &mut rng);
    let f = |tape: &mut Tape, p: &[tnseg::Var]| -> Result<tnseg::Var> {
        let mut state = BnState::new(2);
        // route the checked parameters through the state
        state.gamma = tape.value(p[1]).clone();
        state.beta = tape.value(p[2]).clone();
        // can't reuse bn_forward_train here: the checker owns the leaves, so
        // drive the underlying op directly
        let ones = [1.0, 1.0];
        let (out, _) = tape.channel_norm(p[0], p[1], p[2], tnseg::tape::NormStats::Batch, &ones, 1e-5)?;
        let sq = tape.mul(out, out)?;
        tape.sum_all(sq)
    };
    let err = grad_check(&f, &[x, gamma, beta], DEFAULT_STEP).unwrap();
    assert!(err < 1e-4, "bn gradient error {err}");
}

#[test]
fn tn_gradient_check_with_eta_frozen() {
    let mut rng = ChaCha12Rng::seed_from_u64(61);
    let xs = rt(&[2, 2, 3, 3], &mut rng);
    let xt = rt(&[2, 2, 3, 3], &mut rng).scale(1.7);

    // one live forward to obtain a realistic eta, then freeze it
    let mut state = default_tn(2);
    {
        let mut tape = Tape::new();
        let a = tape.constant(xs.clone());
        let b = tape.constant(xt.clone());
        tn_forward_train(&mut tape, a, b, &mut state).unwrap();
    }
    let eta = state.last_eta.data().to_vec();

    let f = move |tape: &mut Tape, p: &[tnseg::Var]| -> Result<tnseg::Var> {
        let mut st = default_tn(2);
        st.src.gamma = tape.value(p[2]).clone();
        st.tgt.gamma = tape.value(p[3]).clone();
        let scale: Vec<f64> = eta.iter().map(|&e| 1.0 + e).collect();
        let beta_s = tape_zero_beta(tape, 2);
        let beta_t = tape_zero_beta(tape, 2);
        let (os, _) =
            tape.channel_norm(p[0], p[2], beta_s, tnseg::tape::NormStats::Batch, &scale, 1e-5)?;
        let (ot, _) =
            tape.channel_norm(p[1], p[3], beta_t, tnseg::tape::NormStats::Batch, &scale, 1e-5)?;
        let ssq = tape.mul(os, os)?;
        let tsq = tape.mul(ot, ot)?;
        let s = tape.sum_all(ssq)?;
        let t = tape.sum_all(tsq)?;
        tape.add(s, t)
    };
    let gs = rt(&[2], &mut rng);
    let gt = rt(&[2], &mut rng);
    let err = grad_check(&f, &[xs, xt, gs, gt], DEFAULT_STEP).unwrap();
    assert!(err < 1e-4, "tn gradient error {err}");
}

fn tape_zero_beta(tape: &mut Tape, m: usize) -> tnseg::Var {
    tape.constant(Tensor::zeros(&[m]))
}

#[test]
fn tn_frozen_eta_matches_live_forward_values() {
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    let xs = rt(&[2, 3, 2, 2], &mut rng);
    let xt = rt(&[2, 3, 2, 2], &mut rng).scale(0.5);
    let mut live = default_tn(3);
    let mut tape = Tape::new();
    let a = tape.constant(xs.clone());
    let b = tape.constant(xt.clone());
    let (os, ot, _) = tn_forward_train(&mut tape, a, b, &mut live).unwrap();
    let eta = live.last_eta.data().to_vec();

    let mut frozen = default_tn(3);
    let mut tape2 = Tape::new();
    let a2 = tape2.constant(xs);
    let b2 = tape2.constant(xt);
    let (fs, ft, _) = tn_forward_train_frozen_eta(&mut tape2, a2, b2, &mut frozen, &eta).unwrap();
    assert_eq!(tape.value(os).data(), tape2.value(fs).data());
    assert_eq!(tape.value(ot).data(), tape2.value(ft).data());
}
