//! The gradient-integrity suite behind `gradcheck`: every layer family
//! checked against central differences at desk scale, in one list that the
//! CLI and the acceptance tests share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::gradcheck::{self, DEFAULT_STEP};
use crate::nets::{
    init_discriminator, init_segmenter, DiscriminatorConfig, EtaMode, NormKind, SegmenterConfig,
};
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn sample(shape: &[usize], rng: &mut ChaCha12Rng, lo: f64, hi: f64, margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sampled shape")
}

/// Runs the whole suite; each entry is one layer family or network.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut push = |name: &'static str, err: f64| {
        reports.push(CheckReport { name, max_rel_err: err, tolerance: GRAD_TOL });
    };

    // Elementwise chain: exp/log/sigmoid/leaky/abs under one scalar loss.
    {
        let x = sample(&[3, 4], &mut rng, -2.0, 2.0, 0.05);
        let pos = sample(&[3, 4], &mut rng, 0.2, 2.0, 0.0);
        let f = |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let a = tape.sigmoid(p[0]);
            let b = tape.leaky_relu(a, 0.2);
            let c = tape.abs(b);
            let d = tape.log(p[1])?;
            let e = tape.exp(d);
            let prod = tape.mul(c, e)?;
            tape.sum_all(prod)
        };
        push("elementwise", gradcheck::grad_check(&f, &[x, pos], DEFAULT_STEP)?);
    }

    // Reductions (sum/mean/var) with broadcasting.
    {
        let x = sample(&[2, 3, 4], &mut rng, -2.0, 2.0, 0.0);
        let f = |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let v = tape.var_axes(p[0], &[0, 2], false)?;
            let m = tape.mean_axes(p[0], &[1], false)?;
            let sv = tape.sum_all(v)?;
            let sm = tape.sum_all(m)?;
            tape.add(sv, sm)
        };
        push("reductions", gradcheck::grad_check(&f, &[x], DEFAULT_STEP)?);
    }

    // Convolution with stride/padding plus pooling and upsampling.
    {
        let x = sample(&[2, 2, 4, 4], &mut rng, -2.0, 2.0, 0.0);
        let w = sample(&[3, 2, 3, 3], &mut rng, -1.0, 1.0, 0.0);
        let b = sample(&[3], &mut rng, -0.5, 0.5, 0.0);
        let f = |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let c = tape.conv2d(p[0], p[1], p[2], 1, 1)?;
            let m = tape.maxpool2(c)?;
            let u = tape.upsample_nearest2(m)?;
            let a = tape.avgpool2(u)?;
            let sq = tape.mul(a, a)?;
            tape.sum_all(sq)
        };
        push("conv-pool-upsample", gradcheck::grad_check(&f, &[x, w, b], DEFAULT_STEP)?);
    }

    // Softmax -> entropy map -> masked losses.
    {
        let logits = sample(&[2, 2, 2, 2], &mut rng, -1.5, 1.5, 0.0);
        let target =
            Tensor::new(&[2, 2, 2], (0..8).map(|i| f64::from(i % 2 == 0)).collect()).expect("shape");
        let mask = Tensor::new(&[2, 2, 2], (0..8).map(|i| f64::from(i != 5)).collect()).expect("shape");
        let (tg, mk) = (target, mask);
        let f = move |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let sm = tape.softmax_channels(p[0])?;
            let ce = tape.masked_ce(sm, &tg, &mk, 1e-7)?;
            let ent = tape.entropy_channels(sm)?;
            let me = tape.masked_mean(ent, &mk)?;
            let me = tape.mul_scalar(me, 0.5);
            tape.add(ce, me)
        };
        push("softmax-entropy-losses", gradcheck::grad_check(&f, &[logits], DEFAULT_STEP)?);
    }

    // Batch normalization, gradients through the batch statistics.
    {
        let x = sample(&[2, 2, 3, 3], &mut rng, -2.0, 2.0, 0.0);
        let gamma = sample(&[2], &mut rng, 0.5, 1.5, 0.0);
        let beta = sample(&[2], &mut rng, -0.5, 0.5, 0.0);
        let f = |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let (out, _) =
                tape.channel_norm(p[0], p[1], p[2], NormStats::Batch, &[1.0, 1.0], 1e-5)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        };
        push("batch-norm", gradcheck::grad_check(&f, &[x, gamma, beta], DEFAULT_STEP)?);
    }

    // Transfer normalization with the channel weights held constant.
    {
        let x = sample(&[2, 2, 3, 3], &mut rng, -2.0, 2.0, 0.0);
        let gamma = sample(&[2], &mut rng, 0.5, 1.5, 0.0);
        let beta = sample(&[2], &mut rng, -0.5, 0.5, 0.0);
        let eta = [1.4, 0.6];
        let f = move |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let scale: Vec<f64> = eta.iter().map(|&e| 1.0 + e).collect();
            let (out, _) = tape.channel_norm(p[0], p[1], p[2], NormStats::Batch, &scale, 1e-5)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        };
        push("transfer-norm-frozen-eta", gradcheck::grad_check(&f, &[x, gamma, beta], DEFAULT_STEP)?);
    }

    // Full tiny segmenter, both norm kinds, and the discriminator.
    push("segmenter-bn", full_segmenter_check(NormKind::Bn, &mut rng)?);
    push("segmenter-tn-frozen-eta", full_segmenter_check(NormKind::Tn, &mut rng)?);
    push("discriminator", discriminator_check(&mut rng)?);

    Ok(reports)
}

fn full_segmenter_check(norm: NormKind, rng: &mut ChaCha12Rng) -> Result<f64> {
    let cfg = SegmenterConfig { depth: 1, base_channels: 2, norm, ..SegmenterConfig::default() };
    let x = sample(&[1, 1, 8, 8], rng, -1.0, 1.0, 0.0);
    let x_tgt = if norm == NormKind::Tn {
        Some(sample(&[1, 1, 8, 8], rng, -1.5, 1.5, 0.0))
    } else {
        None
    };
    let y = Tensor::new(&[1, 8, 8], (0..64).map(|i| f64::from(i % 3 == 0)).collect())?;
    let mask = Tensor::ones(&[1, 8, 8]);

    let mut primed = init_segmenter(&cfg, 33);
    if let Some(ref xt) = x_tgt {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(xt.clone());
        primed.forward_train(&mut tape, Some(a), Some(b), EtaMode::FromBatch)?;
    }
    let mut params = Vec::new();
    primed.visit_params(&mut |_, t, _| params.push(t.clone()));

    let rebuild = {
        let cfg = cfg.clone();
        let primed_bufs = {
            let mut bufs = Vec::new();
            primed.visit_buffers(&mut |_, t| bufs.push(t.clone()));
            bufs
        };
        move |vals: &[Tensor]| {
            let mut net = init_segmenter(&cfg, 0);
            let mut i = 0;
            net.visit_params_mut(&mut |_, t, _| {
                *t = vals[i].clone();
                i += 1;
            });
            i = 0;
            net.visit_buffers_mut(&mut |_, t| {
                *t = primed_bufs[i].clone();
                i += 1;
            });
            net
        }
    };

    let loss_of = {
        let (x, x_tgt, y, mask) = (x.clone(), x_tgt.clone(), y.clone(), mask.clone());
        move |tape: &mut Tape, net: &mut crate::nets::Segmenter| -> Result<(Var, Vec<(String, Var)>)> {
            let xs = tape.constant(x.clone());
            let xt = x_tgt.as_ref().map(|t| tape.constant(t.clone()));
            let out = net.forward_train(tape, Some(xs), xt, EtaMode::Frozen)?;
            let l_sup = tape.masked_ce(out.p_src.expect("source present"), &y, &mask, 1e-7)?;
            let loss = if let Some(pt) = out.p_tgt {
                let e = tape.entropy_channels(pt)?;
                let m = tape.mean_all(e)?;
                let m = tape.mul_scalar(m, 0.5);
                tape.add(l_sup, m)?
            } else {
                l_sup
            };
            Ok((loss, out.bindings))
        }
    };

    let mut analytic = Vec::new();
    {
        let mut net = rebuild(&params);
        let mut tape = Tape::new();
        let (loss, bindings) = loss_of(&mut tape, &mut net)?;
        tape.backward(loss)?;
        for (_, var) in &bindings {
            analytic.push(tape.grad_or_zeros(*var));
        }
    }
    let f = move |tape: &mut Tape, p: &[Var]| -> Result<Var> {
        let vals: Vec<Tensor> = p.iter().map(|&v| tape.value(v).clone()).collect();
        let mut net = rebuild(&vals);
        Ok(loss_of(tape, &mut net)?.0)
    };
    let numeric = gradcheck::numeric_gradients(&f, &params, DEFAULT_STEP)?;
    Ok(gradcheck::relative_error(&analytic, &numeric))
}

fn discriminator_check(rng: &mut ChaCha12Rng) -> Result<f64> {
    let cfg = DiscriminatorConfig { widths: [4, 8, 8, 1], ..DiscriminatorConfig::default() };
    let x = sample(&[1, 1, 16, 16], rng, 0.05, 0.95, 0.0);
    let template = init_discriminator(&cfg, 44);
    let mut params = Vec::new();
    template.visit_params(&mut |_, t, _| params.push(t.clone()));

    let rebuild = {
        let cfg = cfg.clone();
        move |vals: &[Tensor]| {
            let mut net = init_discriminator(&cfg, 44);
            let mut i = 0;
            net.visit_params_mut(&mut |_, t, _| {
                *t = vals[i].clone();
                i += 1;
            });
            net
        }
    };

    let mut analytic = Vec::new();
    {
        let net = rebuild(&params);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (score, bindings) = net.forward(&mut tape, xv, true)?;
        let c = tape.clamp(score, 1e-7, 1.0 - 1e-7);
        let l = tape.log(c)?;
        let m = tape.mean_all(l)?;
        let loss = tape.neg(m);
        tape.backward(loss)?;
        for (_, var) in &bindings {
            analytic.push(tape.grad_or_zeros(*var));
        }
    }
    let f = move |tape: &mut Tape, p: &[Var]| -> Result<Var> {
        let vals: Vec<Tensor> = p.iter().map(|&v| tape.value(v).clone()).collect();
        let net = rebuild(&vals);
        let xv = tape.constant(x.clone());
        let (score, _) = net.forward(tape, xv, false)?;
        let c = tape.clamp(score, 1e-7, 1.0 - 1e-7);
        let l = tape.log(c)?;
        let m = tape.mean_all(l)?;
        Ok(tape.neg(m))
    };
    let numeric = gradcheck::numeric_gradients(&f, &params, DEFAULT_STEP)?;
    Ok(gradcheck::relative_error(&analytic, &numeric))
}
