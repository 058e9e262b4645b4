//! Batch normalization and transfer normalization.
//!
//! Batch normalization standardizes each feature channel to zero mean and
//! unit variance over the mini-batch, then applies a learnable affine.
//! Transfer normalization extends it for two-domain training:
//!
//! 1. each domain is normalized with its own statistics and its own affine
//!    parameters;
//! 2. a per-channel distance `d_m` between the domains' normalized
//!    statistics quantifies how transferable the channel is;
//! 3. `d` is converted to weights `eta` (scaled so they sum to the channel
//!    count `M`) through a heavy-tailed kernel;
//! 4. the normalized output is modulated residually: `o_hat = (1 + eta) * o`.
//!
//! `eta` is a constant of the forward pass: no gradient flows through the
//! statistics inside the distance. Train mode computes `eta` from the
//! current batch; eval mode computes it from the running statistics, since
//! test-time batches can be single patches.

use crate::error::{Error, Result};
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::Tensor;
use crate::Domain;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Channel-distance variants between source and target statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// `|E_s - E_t|`
    Mean,
    /// `(E_s - E_t)^2 + (Var_s^2 + Var_t^2 - 2 Var_s Var_t)`, kept in this
    /// printed form on purpose (it is an ablation arm; the second term
    /// collapses to `(Var_s - Var_t)^2`).
    Wasserstein,
    /// `|E_s / sqrt(Var_s + eps) - E_t / sqrt(Var_t + eps)|`, the default.
    NormalizedMean,
}

/// Distance-to-weight conversions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbKind {
    /// kernel `exp(-d)`
    Softmax,
    /// kernel `exp(-d^2)`
    Gaussian,
    /// kernel `(1 + d)^-1`, Student-t with one degree of freedom; default.
    StudentT,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "wasserstein" => Ok(Self::Wasserstein),
            "normalized_mean" => Ok(Self::NormalizedMean),
            other => Err(Error::Config(format!(
                "unknown distance kind `{other}` (expected mean|wasserstein|normalized_mean)"
            ))),
        }
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Wasserstein => "wasserstein",
            Self::NormalizedMean => "normalized_mean",
        })
    }
}

impl std::str::FromStr for ProbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "gaussian" => Ok(Self::Gaussian),
            "student_t" => Ok(Self::StudentT),
            other => Err(Error::Config(format!(
                "unknown probability kind `{other}` (expected softmax|gaussian|student_t)"
            ))),
        }
    }
}

impl std::fmt::Display for ProbKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Gaussian => "gaussian",
            Self::StudentT => "student_t",
        })
    }
}

/// State of one batch-normalization layer (or one domain branch of a
/// transfer-normalization layer).
#[derive(Debug, Clone)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    /// gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// State of one transfer-normalization layer: a [`BnState`] per domain plus
/// the variant selection and the last-computed channel weights.
#[derive(Debug, Clone)]
pub struct TnState {
    pub src: BnState,
    pub tgt: BnState,
    pub distance: DistanceKind,
    pub prob: ProbKind,
    /// Channel weights from the most recent train-mode forward.
    pub last_eta: Tensor,
    /// Channel distances from the most recent train-mode forward.
    pub last_d: Tensor,
}

impl TnState {
    pub fn new(channels: usize, distance: DistanceKind, prob: ProbKind) -> Self {
        Self {
            src: BnState::new(channels),
            tgt: BnState::new(channels),
            distance,
            prob,
            last_eta: Tensor::ones(&[channels]),
            last_d: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.src.channels()
    }

    fn domain(&self, domain: Domain) -> &BnState {
        match domain {
            Domain::Source => &self.src,
            Domain::Target => &self.tgt,
        }
    }
}

/// Leaf handles for the affine parameters bound during a forward pass; the
/// trainer reads gradients off these after `backward`.
#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TnVars {
    pub src: BnVars,
    pub tgt: BnVars,
}

/// Train-mode batch normalization: standardize with batch statistics,
/// apply the affine, and update the running estimates.
pub fn bn_forward_train(tape: &mut Tape, x: Var, state: &mut BnState) -> Result<(Var, BnVars)> {
    let gamma = tape.leaf(state.gamma.clone(), true);
    let beta = tape.leaf(state.beta.clone(), true);
    let ones = vec![1.0; state.channels()];
    let (out, stats) =
        tape.channel_norm(x, gamma, beta, NormStats::Batch, &ones, state.eps)?;
    let stats = stats.expect("batch mode returns statistics");
    state.update_running(&stats.mean, &stats.var);
    Ok((out, BnVars { gamma, beta }))
}

/// Eval-mode batch normalization: standardize with the running statistics.
/// The state is untouched.
pub fn bn_forward_eval(tape: &mut Tape, x: Var, state: &BnState) -> Result<Var> {
    let gamma = tape.constant(state.gamma.clone());
    let beta = tape.constant(state.beta.clone());
    let ones = vec![1.0; state.channels()];
    let stats = NormStats::Running {
        mean: state.running_mean.data(),
        var: state.running_var.data(),
    };
    let (out, _) = tape.channel_norm(x, gamma, beta, stats, &ones, state.eps)?;
    Ok(out)
}

/// Train-mode transfer normalization over a source/target batch pair.
///
/// Each domain is standardized with its own batch statistics and affine;
/// `eta` comes from the current batch statistics and scales both outputs as
/// `(1 + eta) * o`. Running statistics of both domains are updated and the
/// computed `d`/`eta` are stored on the state.
pub fn tn_forward_train(
    tape: &mut Tape,
    x_src: Var,
    x_tgt: Var,
    state: &mut TnState,
) -> Result<(Var, Var, TnVars)> {
    let eta = {
        let (sm, sv) = crate::tape::batch_channel_moments(tape.value(x_src));
        let (tm, tv) = crate::tape::batch_channel_moments(tape.value(x_tgt));
        let d = channel_distance(&sm, &sv, &tm, &tv, state.distance, state.src.eps)?;
        let eta = channel_probability(&d, state.prob)?;
        state.last_d = Tensor::from_vec(d);
        state.last_eta = Tensor::from_vec(eta.clone());
        eta
    };
    tn_train_inner(tape, x_src, x_tgt, state, &eta)
}

/// Train-mode transfer normalization with `eta` supplied by the caller
/// instead of recomputed from the batch. The gradient checker uses this:
/// reverse mode treats `eta` as a constant, so the finite-difference side
/// must hold it constant too.
pub fn tn_forward_train_frozen_eta(
    tape: &mut Tape,
    x_src: Var,
    x_tgt: Var,
    state: &mut TnState,
    eta: &[f64],
) -> Result<(Var, Var, TnVars)> {
    tn_train_inner(tape, x_src, x_tgt, state, eta)
}

fn tn_train_inner(
    tape: &mut Tape,
    x_src: Var,
    x_tgt: Var,
    state: &mut TnState,
    eta: &[f64],
) -> Result<(Var, Var, TnVars)> {
    let m = state.channels();
    let (cs, ct) = (tape.value(x_src).shape(), tape.value(x_tgt).shape());
    if cs.len() != 4 || ct.len() != 4 || cs[1] != ct[1] {
        return Err(Error::AxisMismatch {
            op: "tn_forward",
            axis: 1,
            left: cs.get(1).copied().unwrap_or(0),
            right: ct.get(1).copied().unwrap_or(0),
        });
    }
    if eta.len() != m {
        return Err(Error::AxisMismatch { op: "tn_forward eta", axis: 0, left: eta.len(), right: m });
    }
    let scale: Vec<f64> = eta.iter().map(|&e| 1.0 + e).collect();

    let gamma_s = tape.leaf(state.src.gamma.clone(), true);
    let beta_s = tape.leaf(state.src.beta.clone(), true);
    let gamma_t = tape.leaf(state.tgt.gamma.clone(), true);
    let beta_t = tape.leaf(state.tgt.beta.clone(), true);

    let (out_src, stats_s) =
        tape.channel_norm(x_src, gamma_s, beta_s, NormStats::Batch, &scale, state.src.eps)?;
    let stats_s = stats_s.expect("batch mode returns statistics");
    state.src.update_running(&stats_s.mean, &stats_s.var);

    let (out_tgt, stats_t) =
        tape.channel_norm(x_tgt, gamma_t, beta_t, NormStats::Batch, &scale, state.tgt.eps)?;
    let stats_t = stats_t.expect("batch mode returns statistics");
    state.tgt.update_running(&stats_t.mean, &stats_t.var);

    let vars = TnVars {
        src: BnVars { gamma: gamma_s, beta: beta_s },
        tgt: BnVars { gamma: gamma_t, beta: beta_t },
    };
    Ok((out_src, out_tgt, vars))
}

/// Eval-mode transfer normalization for one domain's tensor. Normalization
/// uses that domain's running statistics and affine; `eta` is recomputed
/// from the stored running statistics of both domains. The state is
/// untouched, so a frozen state can be shared across evaluation workers.
pub fn tn_forward_eval(tape: &mut Tape, x: Var, domain: Domain, state: &TnState) -> Result<Var> {
    let d = channel_distance(
        state.src.running_mean.data(),
        state.src.running_var.data(),
        state.tgt.running_mean.data(),
        state.tgt.running_var.data(),
        state.distance,
        state.src.eps,
    )?;
    let eta = channel_probability(&d, state.prob)?;
    let scale: Vec<f64> = eta.iter().map(|&e| 1.0 + e).collect();

    let side = state.domain(domain);
    let gamma = tape.constant(side.gamma.clone());
    let beta = tape.constant(side.beta.clone());
    let stats = NormStats::Running {
        mean: side.running_mean.data(),
        var: side.running_var.data(),
    };
    let (out, _) = tape.channel_norm(x, gamma, beta, stats, &scale, side.eps)?;
    Ok(out)
}

/// Per-channel distance between source and target statistics.
pub fn channel_distance(
    src_mean: &[f64],
    src_var: &[f64],
    tgt_mean: &[f64],
    tgt_var: &[f64],
    kind: DistanceKind,
    eps: f64,
) -> Result<Vec<f64>> {
    let m = src_mean.len();
    if src_var.len() != m || tgt_mean.len() != m || tgt_var.len() != m {
        return Err(Error::AxisMismatch {
            op: "channel_distance",
            axis: 0,
            left: m,
            right: tgt_mean.len(),
        });
    }
    let d = (0..m)
        .map(|i| {
            let (ms, vs) = (src_mean[i], src_var[i]);
            let (mt, vt) = (tgt_mean[i], tgt_var[i]);
            match kind {
                DistanceKind::Mean => (ms - mt).abs(),
                DistanceKind::Wasserstein => {
                    (ms - mt) * (ms - mt) + (vs * vs + vt * vt - 2.0 * vs * vt)
                }
                DistanceKind::NormalizedMean => {
                    (ms / (vs + eps).sqrt() - mt / (vt + eps).sqrt()).abs()
                }
            }
        })
        .collect();
    Ok(d)
}

/// Converts channel distances into weights `eta` with `sum(eta) = M`.
///
/// Kernels are evaluated in a shift-stabilized form so a batch of large
/// distances cannot underflow every weight to zero at once.
pub fn channel_probability(d: &[f64], kind: ProbKind) -> Result<Vec<f64>> {
    let m = d.len();
    if m == 0 {
        return Err(Error::InvalidArgument("channel_probability: empty distance vector".into()));
    }
    if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "channel_probability: distances must be finite and non-negative".into(),
        ));
    }
    // Kernels are mathematically positive; keep f64 faithful to that by
    // flooring, so extreme distances cannot zero a weight outright.
    const W_FLOOR: f64 = 1e-290;
    let w: Vec<f64> = match kind {
        ProbKind::StudentT => d.iter().map(|&v| 1.0 / (1.0 + v)).collect(),
        ProbKind::Gaussian => {
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            d.iter().map(|&v| (dmin * dmin - v * v).exp().max(W_FLOOR)).collect()
        }
        ProbKind::Softmax => {
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            d.iter().map(|&v| (dmin - v).exp().max(W_FLOOR)).collect()
        }
    };
    let total: f64 = w.iter().sum();
    let eta: Vec<f64> = w.iter().map(|&wi| m as f64 * wi / total).collect();
    let sum: f64 = eta.iter().sum();
    assert!(
        (sum - m as f64).abs() <= 1e-9 * m as f64,
        "channel weights must sum to M: got {sum} for M={m}"
    );
    Ok(eta)
}
