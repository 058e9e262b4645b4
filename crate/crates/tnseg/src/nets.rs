//! The UNet segmenter and the small fully-convolutional discriminator.
//!
//! The segmenter is a channels-first UNet: `depth` encoder levels of
//! double-conv blocks (3x3 conv, norm, ReLU, twice) joined by 2x2 max
//! pooling, a bottom block, and a mirrored decoder using nearest-neighbor
//! upsampling plus skip concatenation, closed by a 1x1 conv and a channel
//! softmax. Each norm layer is either plain batch normalization or a
//! transfer-normalization layer that routes the two domains separately.
//!
//! The discriminator is DCGAN-like: four 4x4 stride-2 convolutions with
//! leaky ReLU between them and a sigmoid on the final single-channel score
//! map, so a 64x64 entropy map becomes a 4x4 grid of source-probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::norm::{
    bn_forward_eval, bn_forward_train, tn_forward_eval, tn_forward_train,
    tn_forward_train_frozen_eta, BnState, DistanceKind, ProbKind, TnState,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Bn,
    Tn,
}

impl std::str::FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(Self::Bn),
            "tn" => Ok(Self::Tn),
            other => Err(Error::Config(format!("unknown norm kind `{other}` (expected bn|tn)"))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bn => "bn",
            Self::Tn => "tn",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterConfig {
    /// Number of pooling steps; input extents must divide by `2^depth`.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: NormKind,
    pub distance: DistanceKind,
    pub prob: ProbKind,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 1,
            out_channels: 2,
            norm: NormKind::Bn,
            distance: DistanceKind::NormalizedMean,
            prob: ProbKind::StudentT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { in_channels: 1, widths: [16, 32, 64, 1], leaky_slope: 0.2 }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        let weight = Tensor::new(
            &[c_out, c_in, k, k],
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("kernel shape");
        Self { weight, bias: Tensor::zeros(&[c_out]), stride, pad }
    }

    /// Registers weight/bias as trainable leaves for this step.
    fn bind(&self, tape: &mut Tape, name: &str, bindings: &mut Vec<(String, Var)>) -> (Var, Var) {
        let w = tape.leaf(self.weight.clone(), true);
        let b = tape.leaf(self.bias.clone(), true);
        bindings.push((format!("{name}.weight"), w));
        bindings.push((format!("{name}.bias"), b));
        (w, b)
    }

    fn bind_frozen(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
    }
}

#[derive(Debug, Clone)]
enum Norm {
    Bn(BnState),
    Tn(TnState),
}

impl Norm {
    fn new(cfg: &SegmenterConfig, channels: usize) -> Self {
        match cfg.norm {
            NormKind::Bn => Norm::Bn(BnState::new(channels)),
            NormKind::Tn => Norm::Tn(TnState::new(channels, cfg.distance, cfg.prob)),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv0: ConvLayer,
    norm0: Norm,
    conv1: ConvLayer,
    norm1: Norm,
}

impl Block {
    fn init(cfg: &SegmenterConfig, c_in: usize, c_out: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            conv0: ConvLayer::init(c_in, c_out, 3, 1, 1, rng),
            norm0: Norm::new(cfg, c_out),
            conv1: ConvLayer::init(c_out, c_out, 3, 1, 1, rng),
            norm1: Norm::new(cfg, c_out),
        }
    }
}

/// One or two domain activations moving through the network together.
#[derive(Clone, Copy)]
enum Act {
    Single(Var),
    Pair { src: Var, tgt: Var },
}

/// How a train-mode forward treats transfer-normalization weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaMode {
    /// Recompute from the current batch statistics (normal training).
    FromBatch,
    /// Reuse each layer's stored `last_eta`. The gradient checker needs
    /// this: finite differences must not perturb the channel weights.
    Frozen,
}

pub struct SegForward {
    pub p_src: Option<Var>,
    pub p_tgt: Option<Var>,
    /// Trainable-parameter leaves bound during this pass, in a fixed order.
    pub bindings: Vec<(String, Var)>,
}

pub struct Segmenter {
    pub cfg: SegmenterConfig,
    enc: Vec<Block>,
    bottom: Block,
    dec: Vec<Block>,
    head: ConvLayer,
}

/// Deterministic parameter initialization: Kaiming-uniform kernels
/// (`+-sqrt(6/fan_in)`), zero biases, unit/zero norm affine.
pub fn init_segmenter(cfg: &SegmenterConfig, seed: u64) -> Segmenter {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut c_in = cfg.in_channels;
    for level in 0..cfg.depth {
        let c_out = cfg.base_channels << level;
        enc.push(Block::init(cfg, c_in, c_out, &mut rng));
        c_in = c_out;
    }
    let c_bottom = cfg.base_channels << cfg.depth;
    let bottom = Block::init(cfg, c_in, c_bottom, &mut rng);
    let mut dec = Vec::with_capacity(cfg.depth);
    let mut c_up = c_bottom;
    for level in (0..cfg.depth).rev() {
        let c_skip = cfg.base_channels << level;
        dec.push(Block::init(cfg, c_up + c_skip, c_skip, &mut rng));
        c_up = c_skip;
    }
    let head = ConvLayer::init(cfg.base_channels, cfg.out_channels, 1, 1, 0, &mut rng);
    Segmenter { cfg: cfg.clone(), enc, bottom, dec, head }
}

impl Segmenter {
    /// Train-mode forward. With batch normalization, present domains are
    /// concatenated into one batch (shared statistics); with transfer
    /// normalization both domains are required and routed separately.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x_src: Option<Var>,
        x_tgt: Option<Var>,
        eta_mode: EtaMode,
    ) -> Result<SegForward> {
        let mut bindings = Vec::new();
        let act = match (self.cfg.norm, x_src, x_tgt) {
            (_, None, None) => {
                return Err(Error::InvalidArgument(
                    "segmenter forward: no input domain present".into(),
                ))
            }
            (NormKind::Tn, Some(s), Some(t)) => {
                self.check_extents(tape.value(s).shape())?;
                self.check_extents(tape.value(t).shape())?;
                Act::Pair { src: s, tgt: t }
            }
            (NormKind::Tn, _, _) => {
                return Err(Error::InvalidArgument(
                    "transfer normalization needs both domains in train mode".into(),
                ))
            }
            (NormKind::Bn, Some(s), Some(t)) => {
                self.check_extents(tape.value(s).shape())?;
                self.check_extents(tape.value(t).shape())?;
                Act::Single(tape.concat(&[s, t], 0)?)
            }
            (NormKind::Bn, Some(s), None) => {
                self.check_extents(tape.value(s).shape())?;
                Act::Single(s)
            }
            (NormKind::Bn, None, Some(t)) => {
                self.check_extents(tape.value(t).shape())?;
                Act::Single(t)
            }
        };

        let n_src = x_src.map(|v| tape.value(v).shape()[0]);
        let walk = &mut TrainWalk { tape, bindings: &mut bindings, eta_mode };
        let logits = forward_blocks(
            &mut self.enc,
            &mut self.bottom,
            &mut self.dec,
            &self.head,
            act,
            walk,
        )?;

        let (p_src, p_tgt) = match logits {
            Act::Pair { src, tgt } => {
                (Some(tape.softmax_channels(src)?), Some(tape.softmax_channels(tgt)?))
            }
            Act::Single(v) => {
                let p = tape.softmax_channels(v)?;
                match (x_src.is_some(), x_tgt.is_some()) {
                    (true, true) => {
                        let ns = n_src.expect("source present");
                        let total = tape.value(p).shape()[0];
                        let ps = tape.narrow(p, 0, 0, ns)?;
                        let pt = tape.narrow(p, 0, ns, total - ns)?;
                        (Some(ps), Some(pt))
                    }
                    (true, false) => (Some(p), None),
                    (false, true) => (None, Some(p)),
                    (false, false) => unreachable!("rejected above"),
                }
            }
        };
        Ok(SegForward { p_src, p_tgt, bindings })
    }

    /// Eval-mode forward for one domain: running statistics everywhere,
    /// no parameter leaves, no state mutation.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var, domain: Domain) -> Result<Var> {
        Ok(self.forward_eval_probe(tape, x, domain, None)?.0)
    }

    /// Eval-mode forward that can also capture the post-norm activation of
    /// one named norm layer (for channel inspection).
    pub fn forward_eval_probe(
        &self,
        tape: &mut Tape,
        x: Var,
        domain: Domain,
        probe: Option<&str>,
    ) -> Result<(Var, Option<Tensor>)> {
        self.check_extents(tape.value(x).shape())?;
        let mut walk = EvalWalk { tape, domain, probe, captured: None };
        let logits = forward_blocks_eval(
            &self.enc,
            &self.bottom,
            &self.dec,
            &self.head,
            x,
            &mut walk,
        )?;
        let captured = walk.captured.take();
        let p = tape.softmax_channels(logits)?;
        Ok((p, captured))
    }

    fn check_extents(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "segmenter",
                shape: shape.to_vec(),
                msg: "expected [N,C,H,W]".into(),
            });
        }
        let div = 1usize << self.cfg.depth;
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "segmenter: spatial extents {}x{} must divide by 2^depth = {div}",
                shape[2], shape[3]
            )));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::AxisMismatch {
                op: "segmenter",
                axis: 1,
                left: shape[1],
                right: self.cfg.in_channels,
            });
        }
        Ok(())
    }

    /// Visits trainable parameters in the forward binding order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        walk_params(&self.enc, &self.bottom, &self.dec, &self.head, &mut |name, t, k| {
            f(name, t, k)
        });
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        walk_params_mut(
            &mut self.enc,
            &mut self.bottom,
            &mut self.dec,
            &mut self.head,
            f,
        );
    }

    fn norm_entries(&self) -> Vec<(String, &Norm)> {
        let mut entries = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            entries.push((format!("enc{i}.norm0"), &b.norm0));
            entries.push((format!("enc{i}.norm1"), &b.norm1));
        }
        entries.push(("bottom.norm0".to_string(), &self.bottom.norm0));
        entries.push(("bottom.norm1".to_string(), &self.bottom.norm1));
        for (j, b) in self.dec.iter().enumerate() {
            entries.push((format!("dec{j}.norm0"), &b.norm0));
            entries.push((format!("dec{j}.norm1"), &b.norm1));
        }
        entries
    }

    /// Visits non-trainable buffers (running statistics, channel weights).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, norm) in self.norm_entries() {
            match norm {
                Norm::Bn(bn) => {
                    f(&format!("{name}.running_mean"), &bn.running_mean);
                    f(&format!("{name}.running_var"), &bn.running_var);
                }
                Norm::Tn(tn) => {
                    f(&format!("{name}.src.running_mean"), &tn.src.running_mean);
                    f(&format!("{name}.src.running_var"), &tn.src.running_var);
                    f(&format!("{name}.tgt.running_mean"), &tn.tgt.running_mean);
                    f(&format!("{name}.tgt.running_var"), &tn.tgt.running_var);
                    f(&format!("{name}.last_eta"), &tn.last_eta);
                    f(&format!("{name}.last_d"), &tn.last_d);
                }
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        walk_norms_mut(&mut self.enc, &mut self.bottom, &mut self.dec, &mut |name, norm| {
            match norm {
                Norm::Bn(bn) => {
                    f(&format!("{name}.running_mean"), &mut bn.running_mean);
                    f(&format!("{name}.running_var"), &mut bn.running_var);
                }
                Norm::Tn(tn) => {
                    f(&format!("{name}.src.running_mean"), &mut tn.src.running_mean);
                    f(&format!("{name}.src.running_var"), &mut tn.src.running_var);
                    f(&format!("{name}.tgt.running_mean"), &mut tn.tgt.running_mean);
                    f(&format!("{name}.tgt.running_var"), &mut tn.tgt.running_var);
                    f(&format!("{name}.last_eta"), &mut tn.last_eta);
                    f(&format!("{name}.last_d"), &mut tn.last_d);
                }
            }
        });
    }

    /// Distance/weight vectors of a transfer-norm layer, by layer name
    /// (for example `enc0.norm1`).
    pub fn tn_layer(&self, layer: &str) -> Option<(&Tensor, &Tensor)> {
        self.norm_entries().into_iter().find_map(|(name, norm)| match norm {
            Norm::Tn(tn) if name == layer => Some((&tn.last_d, &tn.last_eta)),
            _ => None,
        })
    }

    /// Names of all transfer-norm layers.
    pub fn tn_layer_names(&self) -> Vec<String> {
        self.norm_entries()
            .into_iter()
            .filter(|(_, norm)| matches!(norm, Norm::Tn(_)))
            .map(|(name, _)| name)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel; weight decay applies.
    Weight,
    /// Convolution bias; no weight decay.
    Bias,
    /// Normalization gamma/beta; no weight decay.
    NormAffine,
}

struct TrainWalk<'a, 'b> {
    tape: &'a mut Tape,
    bindings: &'b mut Vec<(String, Var)>,
    eta_mode: EtaMode,
}

impl TrainWalk<'_, '_> {
    fn conv(&mut self, layer: &ConvLayer, name: &str, act: Act) -> Result<Act> {
        let (w, b) = layer.bind(self.tape, name, self.bindings);
        act.map(|v| self.tape.conv2d(v, w, b, layer.stride, layer.pad))
    }

    fn norm_relu(&mut self, norm: &mut Norm, name: &str, act: Act) -> Result<Act> {
        let normed = match (norm, act) {
            (Norm::Bn(bn), Act::Single(v)) => {
                let (out, vars) = bn_forward_train(self.tape, v, bn)?;
                self.bindings.push((format!("{name}.gamma"), vars.gamma));
                self.bindings.push((format!("{name}.beta"), vars.beta));
                Act::Single(out)
            }
            (Norm::Tn(tn), Act::Pair { src, tgt }) => {
                let (os, ot, vars) = match self.eta_mode {
                    EtaMode::FromBatch => tn_forward_train(self.tape, src, tgt, tn)?,
                    EtaMode::Frozen => {
                        let eta = tn.last_eta.data().to_vec();
                        tn_forward_train_frozen_eta(self.tape, src, tgt, tn, &eta)?
                    }
                };
                self.bindings.push((format!("{name}.src.gamma"), vars.src.gamma));
                self.bindings.push((format!("{name}.src.beta"), vars.src.beta));
                self.bindings.push((format!("{name}.tgt.gamma"), vars.tgt.gamma));
                self.bindings.push((format!("{name}.tgt.beta"), vars.tgt.beta));
                Act::Pair { src: os, tgt: ot }
            }
            (Norm::Bn(_), Act::Pair { .. }) | (Norm::Tn(_), Act::Single(_)) => {
                unreachable!("routing fixed by norm kind at entry")
            }
        };
        normed.map(|v| Ok(self.tape.relu(v)))
    }
}

struct EvalWalk<'a, 'p> {
    tape: &'a mut Tape,
    domain: Domain,
    probe: Option<&'p str>,
    captured: Option<Tensor>,
}

impl EvalWalk<'_, '_> {
    fn conv(&mut self, layer: &ConvLayer, v: Var) -> Result<Var> {
        let (w, b) = layer.bind_frozen(self.tape);
        self.tape.conv2d(v, w, b, layer.stride, layer.pad)
    }

    fn norm_relu(&mut self, norm: &Norm, name: &str, v: Var) -> Result<Var> {
        let out = match norm {
            Norm::Bn(bn) => bn_forward_eval(self.tape, v, bn)?,
            Norm::Tn(tn) => tn_forward_eval(self.tape, v, self.domain, tn)?,
        };
        if self.probe == Some(name) {
            self.captured = Some(self.tape.value(out).clone());
        }
        Ok(self.tape.relu(out))
    }
}

impl Act {
    fn map(self, mut f: impl FnMut(Var) -> Result<Var>) -> Result<Act> {
        Ok(match self {
            Act::Single(v) => Act::Single(f(v)?),
            Act::Pair { src, tgt } => Act::Pair { src: f(src)?, tgt: f(tgt)? },
        })
    }
}

fn forward_blocks(
    enc: &mut [Block],
    bottom: &mut Block,
    dec: &mut [Block],
    head: &ConvLayer,
    mut act: Act,
    walk: &mut TrainWalk,
) -> Result<Act> {
    let mut skips = Vec::with_capacity(enc.len());
    for (i, block) in enc.iter_mut().enumerate() {
        let name = format!("enc{i}");
        act = walk.conv(&block.conv0, &format!("{name}.conv0"), act)?;
        act = walk.norm_relu(&mut block.norm0, &format!("{name}.norm0"), act)?;
        act = walk.conv(&block.conv1, &format!("{name}.conv1"), act)?;
        act = walk.norm_relu(&mut block.norm1, &format!("{name}.norm1"), act)?;
        skips.push(act);
        act = act.map(|v| walk.tape.maxpool2(v))?;
    }
    act = walk.conv(&bottom.conv0, "bottom.conv0", act)?;
    act = walk.norm_relu(&mut bottom.norm0, "bottom.norm0", act)?;
    act = walk.conv(&bottom.conv1, "bottom.conv1", act)?;
    act = walk.norm_relu(&mut bottom.norm1, "bottom.norm1", act)?;
    for (j, block) in dec.iter_mut().enumerate() {
        let name = format!("dec{j}");
        let skip = skips.pop().expect("one skip per decoder block");
        act = act.map(|v| walk.tape.upsample_nearest2(v))?;
        act = match (act, skip) {
            (Act::Single(u), Act::Single(s)) => Act::Single(walk.tape.concat(&[u, s], 1)?),
            (Act::Pair { src: us, tgt: ut }, Act::Pair { src: ss, tgt: st }) => Act::Pair {
                src: walk.tape.concat(&[us, ss], 1)?,
                tgt: walk.tape.concat(&[ut, st], 1)?,
            },
            _ => unreachable!("skip and trunk share routing"),
        };
        act = walk.conv(&block.conv0, &format!("{name}.conv0"), act)?;
        act = walk.norm_relu(&mut block.norm0, &format!("{name}.norm0"), act)?;
        act = walk.conv(&block.conv1, &format!("{name}.conv1"), act)?;
        act = walk.norm_relu(&mut block.norm1, &format!("{name}.norm1"), act)?;
    }
    walk.conv(head, "head", act)
}

fn forward_blocks_eval(
    enc: &[Block],
    bottom: &Block,
    dec: &[Block],
    head: &ConvLayer,
    mut v: Var,
    walk: &mut EvalWalk,
) -> Result<Var> {
    let mut skips = Vec::with_capacity(enc.len());
    for (i, block) in enc.iter().enumerate() {
        let name = format!("enc{i}");
        v = walk.conv(&block.conv0, v)?;
        v = walk.norm_relu(&block.norm0, &format!("{name}.norm0"), v)?;
        v = walk.conv(&block.conv1, v)?;
        v = walk.norm_relu(&block.norm1, &format!("{name}.norm1"), v)?;
        skips.push(v);
        v = walk.tape.maxpool2(v)?;
    }
    v = walk.conv(&bottom.conv0, v)?;
    v = walk.norm_relu(&bottom.norm0, "bottom.norm0", v)?;
    v = walk.conv(&bottom.conv1, v)?;
    v = walk.norm_relu(&bottom.norm1, "bottom.norm1", v)?;
    for (j, block) in dec.iter().enumerate() {
        let name = format!("dec{j}");
        let skip = skips.pop().expect("one skip per decoder block");
        v = walk.tape.upsample_nearest2(v)?;
        v = walk.tape.concat(&[v, skip], 1)?;
        v = walk.conv(&block.conv0, v)?;
        v = walk.norm_relu(&block.norm0, &format!("{name}.norm0"), v)?;
        v = walk.conv(&block.conv1, v)?;
        v = walk.norm_relu(&block.norm1, &format!("{name}.norm1"), v)?;
    }
    let (w, b) = head.bind_frozen(walk.tape);
    walk.tape.conv2d(v, w, b, head.stride, head.pad)
}

fn walk_params(
    enc: &[Block],
    bottom: &Block,
    dec: &[Block],
    head: &ConvLayer,
    f: &mut dyn FnMut(&str, &Tensor, ParamKind),
) {
    let mut block = |name: &str, b: &Block| {
        f(&format!("{name}.conv0.weight"), &b.conv0.weight, ParamKind::Weight);
        f(&format!("{name}.conv0.bias"), &b.conv0.bias, ParamKind::Bias);
        norm_params(&format!("{name}.norm0"), &b.norm0, f);
        f(&format!("{name}.conv1.weight"), &b.conv1.weight, ParamKind::Weight);
        f(&format!("{name}.conv1.bias"), &b.conv1.bias, ParamKind::Bias);
        norm_params(&format!("{name}.norm1"), &b.norm1, f);
    };
    for (i, b) in enc.iter().enumerate() {
        block(&format!("enc{i}"), b);
    }
    block("bottom", bottom);
    for (j, b) in dec.iter().enumerate() {
        block(&format!("dec{j}"), b);
    }
    f("head.weight", &head.weight, ParamKind::Weight);
    f("head.bias", &head.bias, ParamKind::Bias);
}

fn norm_params(name: &str, norm: &Norm, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
    match norm {
        Norm::Bn(bn) => {
            f(&format!("{name}.gamma"), &bn.gamma, ParamKind::NormAffine);
            f(&format!("{name}.beta"), &bn.beta, ParamKind::NormAffine);
        }
        Norm::Tn(tn) => {
            f(&format!("{name}.src.gamma"), &tn.src.gamma, ParamKind::NormAffine);
            f(&format!("{name}.src.beta"), &tn.src.beta, ParamKind::NormAffine);
            f(&format!("{name}.tgt.gamma"), &tn.tgt.gamma, ParamKind::NormAffine);
            f(&format!("{name}.tgt.beta"), &tn.tgt.beta, ParamKind::NormAffine);
        }
    }
}

fn walk_params_mut(
    enc: &mut [Block],
    bottom: &mut Block,
    dec: &mut [Block],
    head: &mut ConvLayer,
    f: &mut dyn FnMut(&str, &mut Tensor, ParamKind),
) {
    let mut block = |name: &str, b: &mut Block| {
        f(&format!("{name}.conv0.weight"), &mut b.conv0.weight, ParamKind::Weight);
        f(&format!("{name}.conv0.bias"), &mut b.conv0.bias, ParamKind::Bias);
        norm_params_mut(&format!("{name}.norm0"), &mut b.norm0, f);
        f(&format!("{name}.conv1.weight"), &mut b.conv1.weight, ParamKind::Weight);
        f(&format!("{name}.conv1.bias"), &mut b.conv1.bias, ParamKind::Bias);
        norm_params_mut(&format!("{name}.norm1"), &mut b.norm1, f);
    };
    for (i, b) in enc.iter_mut().enumerate() {
        block(&format!("enc{i}"), b);
    }
    block("bottom", bottom);
    for (j, b) in dec.iter_mut().enumerate() {
        block(&format!("dec{j}"), b);
    }
    f("head.weight", &mut head.weight, ParamKind::Weight);
    f("head.bias", &mut head.bias, ParamKind::Bias);
}

fn norm_params_mut(name: &str, norm: &mut Norm, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
    match norm {
        Norm::Bn(bn) => {
            f(&format!("{name}.gamma"), &mut bn.gamma, ParamKind::NormAffine);
            f(&format!("{name}.beta"), &mut bn.beta, ParamKind::NormAffine);
        }
        Norm::Tn(tn) => {
            f(&format!("{name}.src.gamma"), &mut tn.src.gamma, ParamKind::NormAffine);
            f(&format!("{name}.src.beta"), &mut tn.src.beta, ParamKind::NormAffine);
            f(&format!("{name}.tgt.gamma"), &mut tn.tgt.gamma, ParamKind::NormAffine);
            f(&format!("{name}.tgt.beta"), &mut tn.tgt.beta, ParamKind::NormAffine);
        }
    }
}

fn walk_norms_mut(
    enc: &mut [Block],
    bottom: &mut Block,
    dec: &mut [Block],
    f: &mut dyn FnMut(&str, &mut Norm),
) {
    let mut block = |name: &str, b: &mut Block| {
        f(&format!("{name}.norm0"), &mut b.norm0);
        f(&format!("{name}.norm1"), &mut b.norm1);
    };
    for (i, b) in enc.iter_mut().enumerate() {
        block(&format!("enc{i}"), b);
    }
    block("bottom", bottom);
    for (j, b) in dec.iter_mut().enumerate() {
        block(&format!("dec{j}"), b);
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<ConvLayer>,
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Discriminator {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(4);
    let mut c_in = cfg.in_channels;
    for &c_out in &cfg.widths {
        convs.push(ConvLayer::init(c_in, c_out, 4, 2, 1, &mut rng));
        c_in = c_out;
    }
    Discriminator { cfg: cfg.clone(), convs }
}

impl Discriminator {
    /// Scores an entropy map: `[N,1,H,W] -> [N,1,H/16,W/16]` of
    /// source-probabilities in `(0, 1)`. Needs `H, W >= 16`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let (_, c, h, w) = tape.value(x).dims4("discriminator")?;
        if c != self.cfg.in_channels {
            return Err(Error::AxisMismatch {
                op: "discriminator",
                axis: 1,
                left: c,
                right: self.cfg.in_channels,
            });
        }
        if h < 16 || w < 16 {
            return Err(Error::InvalidArgument(format!(
                "discriminator: spatial extents {h}x{w} below the 16x16 minimum"
            )));
        }
        let mut bindings = Vec::new();
        let mut v = x;
        let last = self.convs.len() - 1;
        for (i, layer) in self.convs.iter().enumerate() {
            let (wv, bv) = if trainable {
                layer.bind(tape, &format!("disc.conv{i}"), &mut bindings)
            } else {
                layer.bind_frozen(tape)
            };
            v = tape.conv2d(v, wv, bv, layer.stride, layer.pad)?;
            if i < last {
                v = tape.leaky_relu(v, self.cfg.leaky_slope);
            }
        }
        Ok((tape.sigmoid(v), bindings))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, layer) in self.convs.iter().enumerate() {
            f(&format!("disc.conv{i}.weight"), &layer.weight, ParamKind::Weight);
            f(&format!("disc.conv{i}.bias"), &layer.bias, ParamKind::Bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, layer) in self.convs.iter_mut().enumerate() {
            f(&format!("disc.conv{i}.weight"), &mut layer.weight, ParamKind::Weight);
            f(&format!("disc.conv{i}.bias"), &mut layer.bias, ParamKind::Bias);
        }
    }

    /// Zeroes the final conv so every score starts at 0.5 (used in tests).
    pub fn zero_final_layer(&mut self) {
        let last = self.convs.last_mut().expect("four layers");
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::zeros(last.bias.shape());
    }
}
