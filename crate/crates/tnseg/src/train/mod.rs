//! The training loop: alternating segmenter/discriminator updates over
//! domain batch pairs, running-statistic management, logging, checkpoints.
//!
//! Batch composition is a pure function of `(seed, iter)`, so two runs
//! with the same config and seed produce bitwise-identical checkpoints.

mod adam;
pub mod checkpoint;

pub use adam::{poly_lr, AdamState};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::patches::{extract_patch, Dihedral};
use crate::data::preprocess::preprocess;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, discriminator_loss, entropy_map, minent_loss, segmenter_objective,
    supervised_ce, LossWeights,
};
use crate::nets::{
    init_discriminator, init_segmenter, Discriminator, DiscriminatorConfig, EtaMode, NormKind,
    ParamKind, Segmenter, SegmenterConfig,
};
use crate::norm::{DistanceKind, ProbKind};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_src: usize,
    pub batch_tgt: usize,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub weight_decay: f64,
    pub lambda_d: f64,
    pub lambda_ent: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub norm: NormKind,
    pub distance: DistanceKind,
    pub prob: ProbKind,
    /// Extra checkpoints every this many iterations; 0 = final only.
    pub checkpoint_interval: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch_src: 64,
            batch_tgt: 64,
            lr_seg: 1e-3,
            lr_disc: 1e-4,
            weight_decay: 3e-4,
            lambda_d: 1e-3,
            lambda_ent: 0.0,
            poly_power: 0.9,
            seed: 0,
            norm: NormKind::Tn,
            distance: DistanceKind::NormalizedMean,
            prob: ProbKind::StudentT,
            checkpoint_interval: 0,
            depth: 3,
            base_channels: 16,
            patch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        for (name, v) in [("lr_seg", self.lr_seg), ("lr_disc", self.lr_disc)] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_d", self.lambda_d),
            ("lambda_ent", self.lambda_ent),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if self.batch_src == 0 {
            return Err(Error::Config("batch_src must be >= 1".into()));
        }
        if self.uses_target() && self.batch_tgt == 0 {
            return Err(Error::Config("batch_tgt must be >= 1 when the target domain is used".into()));
        }
        Ok(())
    }

    /// Whether this configuration consumes target-domain images at all.
    pub fn uses_target(&self) -> bool {
        self.norm == NormKind::Tn || self.lambda_d > 0.0 || self.lambda_ent > 0.0
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: 1,
            out_channels: 2,
            norm: self.norm,
            distance: self.distance,
            prob: self.prob,
        }
    }

    /// Plain `key = value` serialization, one line per field.
    pub fn to_text(&self) -> String {
        format!(
            "iters = {}\nbatch_src = {}\nbatch_tgt = {}\nlr_seg = {}\nlr_disc = {}\n\
             weight_decay = {}\nlambda_d = {}\nlambda_ent = {}\npoly_power = {}\nseed = {}\n\
             norm = {}\ndistance = {}\nprob = {}\ncheckpoint_interval = {}\ndepth = {}\n\
             base_channels = {}\npatch = {}\n",
            self.iters,
            self.batch_src,
            self.batch_tgt,
            self.lr_seg,
            self.lr_disc,
            self.weight_decay,
            self.lambda_d,
            self.lambda_ent,
            self.poly_power,
            self.seed,
            self.norm,
            self.distance,
            self.prob,
            self.checkpoint_interval,
            self.depth,
            self.base_channels,
            self.patch,
        )
    }

    /// Parses `key = value` lines over the defaults. Unknown keys and
    /// malformed values are errors naming the offender.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "iters" => self.iters = num(key, value)?,
            "batch_src" => self.batch_src = num(key, value)?,
            "batch_tgt" => self.batch_tgt = num(key, value)?,
            "lr_seg" => self.lr_seg = num(key, value)?,
            "lr_disc" => self.lr_disc = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lambda_d" => self.lambda_d = num(key, value)?,
            "lambda_ent" => self.lambda_ent = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "norm" => self.norm = value.parse()?,
            "distance" => self.distance = value.parse()?,
            "prob" => self.prob = value.parse()?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub iter: usize,
    pub l_sup: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub l_ent: f64,
    pub lr_seg: f64,
    pub lr_disc: f64,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "iter,L_sup,L_adv,L_d,L_ent,lr_seg,lr_disc"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.iter, self.l_sup, self.l_adv, self.l_d, self.l_ent, self.lr_seg, self.lr_disc
        )
    }
}

/// Preprocessed images ready for patch sampling; pixel values in [0, 255].
pub struct PreparedData {
    pub source: Vec<PreparedSource>,
    pub target: Vec<PreparedTarget>,
}

pub struct PreparedSource {
    pub pixels: Tensor,
    pub label: Tensor,
    pub fov: Tensor,
}

pub struct PreparedTarget {
    pub pixels: Tensor,
    pub fov: Tensor,
}

/// Runs the preprocessing stage over the training splits. Target labels
/// are not touched (and not even visible on the train split's type).
pub fn prepare(dataset: &Dataset) -> Result<PreparedData> {
    let mut source = Vec::with_capacity(dataset.source.len());
    for img in &dataset.source {
        source.push(PreparedSource {
            pixels: preprocess(&img.pixels, &img.fov)?,
            label: img.label.clone(),
            fov: img.fov.clone(),
        });
    }
    let mut target = Vec::with_capacity(dataset.target_train.len());
    for img in &dataset.target_train {
        target.push(PreparedTarget {
            pixels: preprocess(&img.pixels, &img.fov)?,
            fov: img.fov.clone(),
        });
    }
    Ok(PreparedData { source, target })
}

/// One training step's input: a pair of mini-batches.
pub struct DomainBatch {
    /// `[B, 1, p, p]`, scaled to [0, 1].
    pub src_patches: Tensor,
    pub src_labels: Tensor,
    pub src_masks: Tensor,
    pub tgt_patches: Option<Tensor>,
    pub tgt_masks: Option<Tensor>,
}

/// Samples the batch for `iter`: a pure function of `(seed, iter)`.
pub fn sample_batch(data: &PreparedData, cfg: &TrainConfig, iter: usize) -> Result<DomainBatch> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x0100_0000 + iter as u64);
    let p = cfg.patch;

    let mut src_patches = Vec::with_capacity(cfg.batch_src * p * p);
    let mut src_labels = Vec::with_capacity(cfg.batch_src * p * p);
    let mut src_masks = Vec::with_capacity(cfg.batch_src * p * p);
    for _ in 0..cfg.batch_src {
        let img = &data.source[rng.gen_range(0..data.source.len())];
        let (h, w) = (img.pixels.shape()[0], img.pixels.shape()[1]);
        let origin = (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p));
        let d = Dihedral::sample(&mut rng);
        let px = d.apply(&extract_patch(&img.pixels, origin, p));
        let lb = d.apply(&extract_patch(&img.label, origin, p));
        let mk = d.apply(&extract_patch(&img.fov, origin, p));
        src_patches.extend(px.data().iter().map(|v| v / 255.0));
        src_labels.extend_from_slice(lb.data());
        src_masks.extend_from_slice(mk.data());
    }

    let (tgt_patches, tgt_masks) = if cfg.uses_target() {
        let mut tp = Vec::with_capacity(cfg.batch_tgt * p * p);
        let mut tm = Vec::with_capacity(cfg.batch_tgt * p * p);
        for _ in 0..cfg.batch_tgt {
            let img = &data.target[rng.gen_range(0..data.target.len())];
            let (h, w) = (img.pixels.shape()[0], img.pixels.shape()[1]);
            let origin = (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p));
            let d = Dihedral::sample(&mut rng);
            let px = d.apply(&extract_patch(&img.pixels, origin, p));
            let mk = d.apply(&extract_patch(&img.fov, origin, p));
            tp.extend(px.data().iter().map(|v| v / 255.0));
            tm.extend_from_slice(mk.data());
        }
        (
            Some(Tensor::new(&[cfg.batch_tgt, 1, p, p], tp)?),
            Some(Tensor::new(&[cfg.batch_tgt, p, p], tm)?),
        )
    } else {
        (None, None)
    };

    Ok(DomainBatch {
        src_patches: Tensor::new(&[cfg.batch_src, 1, p, p], src_patches)?,
        src_labels: Tensor::new(&[cfg.batch_src, p, p], src_labels)?,
        src_masks: Tensor::new(&[cfg.batch_src, p, p], src_masks)?,
        tgt_patches,
        tgt_masks,
    })
}

/// Everything train() needs between steps.
pub struct TrainState {
    pub seg: Segmenter,
    pub disc: Option<Discriminator>,
    pub adam_seg: AdamState,
    pub adam_disc: AdamState,
    param_kinds: HashMap<String, ParamKind>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let seg = init_segmenter(&cfg.segmenter_config(), cfg.seed);
        let disc = (cfg.lambda_d > 0.0)
            .then(|| init_discriminator(&DiscriminatorConfig::default(), cfg.seed.wrapping_add(1)));
        let mut param_kinds = HashMap::new();
        seg.visit_params(&mut |name, _, kind| {
            param_kinds.insert(name.to_string(), kind);
        });
        TrainState {
            seg,
            disc,
            adam_seg: AdamState::new(cfg.weight_decay),
            adam_disc: AdamState::new(0.0),
            param_kinds,
        }
    }
}

#[cfg(debug_assertions)]
fn param_checksum(visit: &dyn Fn(&mut dyn FnMut(&str, &Tensor, ParamKind))) -> u64 {
    let mut acc = 0u64;
    visit(&mut |_, t, _| {
        for &v in t.data() {
            acc = acc.wrapping_mul(31).wrapping_add(v.to_bits());
        }
    });
    acc
}

/// One alternating step: segmenter update (discriminator frozen), then
/// discriminator update on detached entropy maps. Running statistics
/// update once, during the segmenter forward.
pub fn train_step(
    state: &mut TrainState,
    batch: &DomainBatch,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<LogRow> {
    let lr_seg = poly_lr(cfg.lr_seg, iter, cfg.iters, cfg.poly_power);
    let lr_disc = poly_lr(cfg.lr_disc, iter, cfg.iters, cfg.poly_power);
    let weights = LossWeights { lambda_d: cfg.lambda_d, lambda_ent: cfg.lambda_ent };

    #[cfg(debug_assertions)]
    let disc_sum_before = state.disc.as_ref().map(|d| {
        param_checksum(&|f| d.visit_params(f))
    });

    // ---- segmenter pass -------------------------------------------------
    let mut tape = Tape::new();
    let x_src = tape.constant(batch.src_patches.clone());
    let x_tgt = match &batch.tgt_patches {
        Some(t) => Some(tape.constant(t.clone())),
        None => None,
    };
    let out = state.seg.forward_train(&mut tape, Some(x_src), x_tgt, EtaMode::FromBatch)?;
    let p_src = out.p_src.expect("source batch is always present");
    let l_sup = supervised_ce(&mut tape, p_src, &batch.src_labels, &batch.src_masks)?;

    let mut detached_entropy = None; // (I_src, I_tgt) values for the disc pass
    let mut l_adv_var = None;
    let mut l_ent_var = None;
    if let Some(p_tgt) = out.p_tgt {
        let i_tgt = entropy_map(&mut tape, p_tgt)?;
        if cfg.lambda_d > 0.0 {
            let disc = state.disc.as_ref().expect("adversarial config builds one");
            let (scores, _) = disc.forward(&mut tape, i_tgt, false)?;
            l_adv_var = Some(adversarial_loss(&mut tape, scores)?);
            let i_src = entropy_map(&mut tape, p_src)?;
            detached_entropy =
                Some((tape.value(i_src).clone(), tape.value(i_tgt).clone()));
        }
        if cfg.lambda_ent > 0.0 {
            let mask = batch.tgt_masks.as_ref().expect("target masks travel with patches");
            l_ent_var = Some(minent_loss(&mut tape, i_tgt, mask)?);
        }
    }
    let l_seg = segmenter_objective(&mut tape, l_sup, l_adv_var, l_ent_var, &weights)?;
    tape.backward(l_seg)?;

    state.adam_seg.begin_step();
    let mut grads: HashMap<&str, Tensor> = HashMap::new();
    for (name, var) in &out.bindings {
        grads.insert(name.as_str(), tape.grad_or_zeros(*var));
    }
    let kinds = &state.param_kinds;
    let adam = &mut state.adam_seg;
    let mut status = Ok(());
    state.seg.visit_params_mut(&mut |name, t, kind| {
        if status.is_err() {
            return;
        }
        let grad = grads.get(name).expect("every parameter is bound in forward");
        let decay = kind == ParamKind::Weight;
        debug_assert_eq!(kinds.get(name), Some(&kind));
        status = adam.update(name, t, grad, lr_seg, decay);
    });
    status?;

    let row_l_sup = tape.value(l_sup).item();
    let row_l_adv = l_adv_var.map_or(0.0, |v| tape.value(v).item());
    let row_l_ent = l_ent_var.map_or(0.0, |v| tape.value(v).item());
    drop(tape);

    #[cfg(debug_assertions)]
    if let (Some(before), Some(d)) = (disc_sum_before, state.disc.as_ref()) {
        let after = param_checksum(&|f| d.visit_params(f));
        debug_assert_eq!(before, after, "segmenter update must not touch the discriminator");
    }

    // ---- discriminator pass ---------------------------------------------
    let mut row_l_d = 0.0;
    if let Some((i_src, i_tgt)) = detached_entropy {
        #[cfg(debug_assertions)]
        let seg_sum_before = {
            let seg = &state.seg;
            param_checksum(&|f| seg.visit_params(f))
        };

        let disc = state.disc.as_mut().expect("adversarial config builds one");
        let mut tape = Tape::new();
        let s = tape.constant(i_src);
        let t = tape.constant(i_tgt);
        let (score_src, bindings) = disc.forward(&mut tape, s, true)?;
        // both domains must score through the same leaves, or their
        // gradients would land on separate bindings
        let score_tgt = forward_with_existing_bindings(disc, &mut tape, t, &bindings)?;
        let l_d = discriminator_loss(&mut tape, score_src, score_tgt)?;
        tape.backward(l_d)?;
        row_l_d = tape.value(l_d).item();

        state.adam_disc.begin_step();
        let mut grads: HashMap<&str, Tensor> = HashMap::new();
        for (name, var) in &bindings {
            grads.insert(name.as_str(), tape.grad_or_zeros(*var));
        }
        let adam = &mut state.adam_disc;
        let mut status = Ok(());
        disc.visit_params_mut(&mut |name, t, _| {
            if status.is_err() {
                return;
            }
            let grad = grads.get(name).expect("every parameter is bound in forward");
            status = adam.update(name, t, grad, lr_disc, false);
        });
        status?;

        #[cfg(debug_assertions)]
        {
            let seg = &state.seg;
            let after = param_checksum(&|f| seg.visit_params(f));
            debug_assert_eq!(seg_sum_before, after, "discriminator update must not touch the segmenter");
        }
    }

    Ok(LogRow {
        iter,
        l_sup: row_l_sup,
        l_adv: row_l_adv,
        l_d: row_l_d,
        l_ent: row_l_ent,
        lr_seg,
        lr_disc,
    })
}

/// Scores a second input through leaves already bound in this tape.
fn forward_with_existing_bindings(
    disc: &Discriminator,
    tape: &mut Tape,
    x: crate::Var,
    bindings: &[(String, crate::Var)],
) -> Result<crate::Var> {
    let lookup: HashMap<&str, crate::Var> =
        bindings.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let mut v = x;
    let n_layers = bindings.len() / 2;
    for i in 0..n_layers {
        let w = lookup[format!("disc.conv{i}.weight").as_str()];
        let b = lookup[format!("disc.conv{i}.bias").as_str()];
        v = tape.conv2d(v, w, b, 2, 1)?;
        if i < n_layers - 1 {
            v = tape.leaky_relu(v, disc.cfg.leaky_slope);
        }
    }
    Ok(tape.sigmoid(v))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoint_dir: PathBuf,
}

/// Full training: preparation, `iters` alternating steps, periodic and
/// final checkpoints, CSV log. Deterministic given config + seed.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.source.is_empty() {
        return Err(Error::Manifest("training needs at least one source image".into()));
    }
    if cfg.uses_target() && dataset.target_train.is_empty() {
        return Err(Error::Manifest(
            "this configuration uses the target domain, but the target train split is empty".into(),
        ));
    }
    for img in &dataset.source {
        let (h, w) = img.pixels.dims2("train")?;
        if h < cfg.patch || w < cfg.patch {
            return Err(Error::InvalidArgument(format!(
                "source image {} is {h}x{w}, smaller than the {0}x{0} patch",
                cfg.patch
            )));
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let data = prepare(dataset)?;
    let mut state = TrainState::new(cfg);
    let mut log = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let batch = sample_batch(&data, cfg, iter)?;
        let row = train_step(&mut state, &batch, cfg, iter)?;
        log.push(row);
        if cfg.checkpoint_interval > 0 && (iter + 1) % cfg.checkpoint_interval == 0 {
            let dir = out_dir.join(format!("checkpoint_iter{}", iter + 1));
            checkpoint::save_checkpoint(&dir, cfg, &state.seg, state.disc.as_ref())?;
        }
    }

    let checkpoint_dir = out_dir.join("checkpoint");
    checkpoint::save_checkpoint(&checkpoint_dir, cfg, &state.seg, state.disc.as_ref())?;

    let mut csv = String::from(LogRow::csv_header());
    csv.push('\n');
    for row in &log {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    std::fs::write(out_dir.join("train_log.csv"), csv)?;

    Ok(TrainOutcome { log, checkpoint_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip_and_unknown_key() {
        let cfg = TrainConfig { iters: 123, lambda_d: 0.5, ..TrainConfig::default() };
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed.iters, 123);
        assert_eq!(parsed.lambda_d, 0.5);

        let err = TrainConfig::parse("learning_rate = 3\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");

        assert!(TrainConfig::parse("iters = 0\n").is_err());
        assert!(TrainConfig::parse("lr_seg = -1\n").is_err());
    }

    #[test]
    fn paper_scale_config_is_expressible() {
        let cfg = TrainConfig {
            iters: 50_000,
            batch_src: 128,
            batch_tgt: 128,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_src + cfg.batch_tgt, 256);
    }

    #[test]
    fn baseline_config_ignores_target() {
        let cfg = TrainConfig {
            lambda_d: 0.0,
            norm: NormKind::Bn,
            ..TrainConfig::default()
        };
        assert!(!cfg.uses_target());
        let tn = TrainConfig { lambda_d: 0.0, norm: NormKind::Tn, ..TrainConfig::default() };
        assert!(tn.uses_target());
    }
}
