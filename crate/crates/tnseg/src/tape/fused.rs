//! Fused tape operations for the hot paths: channel softmax, entropy maps,
//! per-channel normalization with affine + residual scaling, and masked
//! scalar losses. Fusing keeps the big `[N,C,H,W]` intermediates off the tape.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

use super::{accum_parent, Node, NormSaved, Op, Tape, Var};

/// Where a channel normalization takes its statistics from.
pub enum NormStats<'a> {
    /// Mean/variance computed over `(N, H, W)` of the current batch.
    Batch,
    /// Batch statistics the caller already computed from this very input;
    /// gradients still flow through them as in [`NormStats::Batch`].
    BatchGiven { mean: &'a [f64], var: &'a [f64] },
    /// Frozen per-channel statistics (running estimates); constants of the
    /// graph, no gradient flows through them.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics computed by a batch-mode normalization.
#[derive(Debug, Clone)]
pub struct NormBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    /// Per-pixel softmax over the channel axis, stabilized by max
    /// subtraction. Requires at least two channels.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("softmax_channels")?;
        if c < 2 {
            return Err(Error::InvalidArgument(
                "softmax_channels: needs at least 2 channels".into(),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let plane = h * w;
        let img = c * plane;
        for ni in 0..n {
            for px in 0..plane {
                let base = ni * img + px;
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(src[base + ci * plane]);
                }
                let mut s = 0.0;
                for ci in 0..c {
                    let e = (src[base + ci * plane] - m).exp();
                    out[base + ci * plane] = e;
                    s += e;
                }
                for ci in 0..c {
                    out[base + ci * plane] /= s;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::SoftmaxChannels { x }, req))
    }

    /// Normalized Shannon entropy of per-pixel channel distributions:
    /// `-(1/ln C) * sum_c p_c ln p_c` with the `0 ln 0 = 0` convention.
    /// Output has a single channel.
    pub fn entropy_channels(&mut self, p: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(p).dims4("entropy_channels")?;
        if c < 2 {
            return Err(Error::InvalidArgument(
                "entropy_channels: needs at least 2 channels".into(),
            ));
        }
        let src = self.value(p).data();
        let plane = h * w;
        let img = c * plane;
        let norm = 1.0 / (c as f64).ln();
        let mut out = vec![0.0; n * plane];
        for ni in 0..n {
            for px in 0..plane {
                let base = ni * img + px;
                let mut acc = 0.0;
                for ci in 0..c {
                    let v = src[base + ci * plane];
                    if v > 0.0 {
                        acc -= v * v.ln();
                    }
                }
                out[ni * plane + px] = acc * norm;
            }
        }
        let value = Tensor::new(&[n, 1, h, w], out)?;
        let req = self.requires(p);
        Ok(self.push(value, Op::EntropyChannels { p }, req))
    }

    /// Per-channel standardization with affine and a constant per-channel
    /// output multiplier: `y = scale_m * (gamma_m * xhat_m + beta_m)`.
    ///
    /// `scale` is treated as a constant of the forward pass; no gradient
    /// flows through it. In batch mode the standardization statistics are
    /// part of the graph (gradients flow through mean and variance) and the
    /// computed statistics are returned so the caller can update running
    /// estimates.
    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
        scale: &[f64],
        eps: f64,
    ) -> Result<(Var, Option<NormBatchStats>)> {
        let (n, c, h, w) = self.value(x).dims4("channel_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::InvalidShape {
                    op: "channel_norm",
                    shape: self.value(v).shape().to_vec(),
                    msg: format!("{name} must be [{c}]"),
                });
            }
        }
        if scale.len() != c {
            return Err(Error::AxisMismatch {
                op: "channel_norm scale",
                axis: 0,
                left: scale.len(),
                right: c,
            });
        }

        let plane = h * w;
        let reduce_n = n * plane;
        let check_len = |mean: &[f64], var: &[f64]| -> Result<()> {
            if mean.len() != c || var.len() != c {
                return Err(Error::AxisMismatch {
                    op: "channel_norm stats",
                    axis: 0,
                    left: mean.len(),
                    right: c,
                });
            }
            Ok(())
        };
        let (mean, var, batch, returned) = match stats {
            NormStats::Batch => {
                if reduce_n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "channel_norm: batch statistics need N*H*W >= 2, got {reduce_n}"
                    )));
                }
                let (m, v) = batch_channel_moments(self.value(x));
                (m.clone(), v.clone(), true, Some(NormBatchStats { mean: m, var: v }))
            }
            NormStats::BatchGiven { mean, var } => {
                if reduce_n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "channel_norm: batch statistics need N*H*W >= 2, got {reduce_n}"
                    )));
                }
                check_len(mean, var)?;
                (mean.to_vec(), var.to_vec(), true, None)
            }
            NormStats::Running { mean, var } => {
                check_len(mean, var)?;
                (mean.to_vec(), var.to_vec(), false, None)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, inv) = (mean[ci], inv_std[ci]);
                let (a, b) = (scale[ci] * gm[ci], scale[ci] * bt[ci]);
                for i in base..base + plane {
                    let xh = (src[i] - mu) * inv;
                    xhat[i] = xh;
                    out[i] = a * xh + b;
                }
            }
        }

        let saved = Box::new(NormSaved {
            xhat: Tensor::new(&[n, c, h, w], xhat)?,
            inv_std,
            scale: scale.to_vec(),
            batch,
        });
        let value = Tensor::new(&[n, c, h, w], out)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let var_out = self.push(value, Op::ChannelNorm { x, gamma, beta, saved }, req);
        Ok((var_out, returned))
    }

    /// Mean over masked-in pixels of `-ln P[class = target]`, with the
    /// probability clamped below at `clamp_lo` before the log.
    pub fn masked_ce(&mut self, p: Var, target: &Tensor, mask: &Tensor, clamp_lo: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(p).dims4("masked_ce")?;
        if c != 2 {
            return Err(Error::InvalidArgument(format!(
                "masked_ce: expected 2 channels, got {c}"
            )));
        }
        same_shape("masked_ce target", &[n, h, w], target.shape())?;
        same_shape("masked_ce mask", &[n, h, w], mask.shape())?;
        check_binary("masked_ce target", target)?;
        check_binary("masked_ce mask", mask)?;
        let mask_sum: f64 = mask.data().iter().sum();
        if mask_sum < 1.0 {
            return Err(Error::EmptyMask);
        }

        let pd = self.value(p).data();
        let plane = h * w;
        let mut acc = 0.0;
        for ni in 0..n {
            for px in 0..plane {
                let m = mask.data()[ni * plane + px];
                if m == 0.0 {
                    continue;
                }
                let cls = target.data()[ni * plane + px] as usize;
                let prob = pd[(ni * 2 + cls) * plane + px].max(clamp_lo);
                acc -= prob.ln();
            }
        }
        let value = Tensor::scalar(acc / mask_sum);
        let req = self.requires(p);
        let op = Op::MaskedCe {
            p,
            target: target.clone(),
            mask: mask.clone(),
            mask_sum,
            clamp_lo,
        };
        Ok(self.push(value, op, req))
    }

    /// Mean of `x` over masked-in pixels: `sum(mask * x) / sum(mask)`.
    /// `x` and `mask` must have the same element count.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if self.value(x).numel() != mask.numel() {
            return Err(Error::InvalidShape {
                op: "masked_mean",
                shape: mask.shape().to_vec(),
                msg: format!("mask has {} elements, x has {}", mask.numel(), self.value(x).numel()),
            });
        }
        check_binary("masked_mean mask", mask)?;
        let mask_sum: f64 = mask.data().iter().sum();
        if mask_sum < 1.0 {
            return Err(Error::EmptyMask);
        }
        let acc: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .sum();
        let value = Tensor::scalar(acc / mask_sum);
        let req = self.requires(x);
        Ok(self.push(value, Op::MaskedMean { x, mask: mask.clone(), mask_sum }, req))
    }
}

fn check_binary(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{op}: values must be 0 or 1")));
    }
    Ok(())
}

/// Two-pass per-channel mean and biased variance over `(N, H, W)` of a
/// `[N, C, H, W]` tensor.
pub fn batch_channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let src = x.data();
    let r = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            mean[ci] += src[base..base + plane].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= r;
    }
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mu = mean[ci];
            var[ci] += src[base..base + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= r;
    }
    (mean, var)
}

pub(crate) fn backward_softmax_channels(before: &mut [Node], x: Var, out: &Tensor, g: &Tensor) {
    let shape = out.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let img = c * plane;
    let (pd, gd) = (out.data(), g.data());
    let mut dx = vec![0.0; pd.len()];
    for ni in 0..n {
        for px in 0..plane {
            let base = ni * img + px;
            let mut dot = 0.0;
            for ci in 0..c {
                let i = base + ci * plane;
                dot += gd[i] * pd[i];
            }
            for ci in 0..c {
                let i = base + ci * plane;
                dx[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    let shape = before[x.0].value.shape().to_vec();
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
}

pub(crate) fn backward_entropy_channels(before: &mut [Node], p: Var, g: &Tensor) {
    let pv = &before[p.0].value;
    let shape = pv.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let img = c * plane;
    let norm = 1.0 / (c as f64).ln();
    let (pd, gd) = (pv.data(), g.data());
    let mut dp = vec![0.0; pd.len()];
    for ni in 0..n {
        for px in 0..plane {
            let gi = gd[ni * plane + px];
            let base = ni * img + px;
            for ci in 0..c {
                let i = base + ci * plane;
                let v = pd[i];
                if v > 0.0 {
                    dp[i] = -gi * norm * (v.ln() + 1.0);
                }
            }
        }
    }
    accum_parent(before, p, Tensor::new(&shape, dp).expect("same shape"));
}

pub(crate) fn backward_channel_norm(
    before: &mut [Node],
    x: Var,
    gamma: Var,
    beta: Var,
    saved: &NormSaved,
    g: &Tensor,
) {
    let shape = saved.xhat.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let r = (n * plane) as f64;
    let gd = g.data();
    let xh = saved.xhat.data();
    let gm = before[gamma.0].value.data().to_vec();

    // Per-channel reductions of the upstream gradient.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut s = 0.0;
            let mut sx = 0.0;
            for i in base..base + plane {
                s += gd[i];
                sx += gd[i] * xh[i];
            }
            sum_g[ci] += s;
            sum_gx[ci] += sx;
        }
    }

    if before[gamma.0].requires {
        let dgamma: Vec<f64> = (0..c).map(|ci| saved.scale[ci] * sum_gx[ci]).collect();
        accum_parent(before, gamma, Tensor::from_vec(dgamma));
    }
    if before[beta.0].requires {
        let dbeta: Vec<f64> = (0..c).map(|ci| saved.scale[ci] * sum_g[ci]).collect();
        accum_parent(before, beta, Tensor::from_vec(dbeta));
    }

    if before[x.0].requires {
        let mut dx = vec![0.0; gd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let a_inv = saved.scale[ci] * gm[ci] * saved.inv_std[ci];
                if saved.batch {
                    let mg = sum_g[ci] / r;
                    let mgx = sum_gx[ci] / r;
                    for i in base..base + plane {
                        dx[i] = a_inv * (gd[i] - mg - xh[i] * mgx);
                    }
                } else {
                    for i in base..base + plane {
                        dx[i] = a_inv * gd[i];
                    }
                }
            }
        }
        accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
    }
}

pub(crate) fn backward_masked_ce(
    before: &mut [Node],
    p: Var,
    target: &Tensor,
    mask: &Tensor,
    mask_sum: f64,
    clamp_lo: f64,
    g: &Tensor,
) {
    if !before[p.0].requires {
        return;
    }
    let gs = g.data()[0];
    let pv = &before[p.0].value;
    let shape = pv.shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let plane = h * w;
    let pd = pv.data();
    let mut dp = vec![0.0; pd.len()];
    for ni in 0..n {
        for px in 0..plane {
            let m = mask.data()[ni * plane + px];
            if m == 0.0 {
                continue;
            }
            let cls = target.data()[ni * plane + px] as usize;
            let i = (ni * 2 + cls) * plane + px;
            if pd[i] > clamp_lo {
                dp[i] = -gs / (mask_sum * pd[i]);
            }
        }
    }
    accum_parent(before, p, Tensor::new(&shape, dp).expect("same shape"));
}

pub(crate) fn backward_masked_mean(
    before: &mut [Node],
    x: Var,
    mask: &Tensor,
    mask_sum: f64,
    g: &Tensor,
) {
    if !before[x.0].requires {
        return;
    }
    let gs = g.data()[0];
    let shape = before[x.0].value.shape().to_vec();
    let dx: Vec<f64> = mask.data().iter().map(|&m| gs * m / mask_sum).collect();
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same numel"));
}
