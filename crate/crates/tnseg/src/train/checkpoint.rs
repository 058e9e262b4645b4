//! Checkpoints: a directory of named tensor files plus a manifest listing
//! names and shapes and the config that produced them.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{init_discriminator, init_segmenter, Discriminator, DiscriminatorConfig, Segmenter};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor, DType};
use crate::train::TrainConfig;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

pub fn save_checkpoint(
    dir: &Path,
    cfg: &TrainConfig,
    seg: &Segmenter,
    disc: Option<&Discriminator>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut dump = |prefix: &str, name: &str, t: &Tensor| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{prefix},{name},{}", shape.join("x"));
        write_tensor(&dir.join(name), t, DType::F64)
    };

    let mut status = Ok(());
    seg.visit_params(&mut |name, t, _| {
        if status.is_ok() {
            status = dump("param", name, t);
        }
    });
    status?;
    let mut status = Ok(());
    seg.visit_buffers(&mut |name, t| {
        if status.is_ok() {
            status = dump("buffer", name, t);
        }
    });
    status?;
    if let Some(d) = disc {
        let mut status = Ok(());
        d.visit_params(&mut |name, t, _| {
            if status.is_ok() {
                status = dump("param", name, t);
            }
        });
        status?;
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    std::fs::write(dir.join(CONFIG), cfg.to_text())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, Segmenter, Option<Discriminator>)> {
    let cfg_text = std::fs::read_to_string(dir.join(CONFIG))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(CONFIG).display())))?;
    let cfg = TrainConfig::parse(&cfg_text)?;

    let mut seg = init_segmenter(&cfg.segmenter_config(), 0);
    let mut status = Ok(());
    seg.visit_params_mut(&mut |name, t, _| {
        if status.is_ok() {
            status = restore(dir, name, t);
        }
    });
    status?;
    let mut status = Ok(());
    seg.visit_buffers_mut(&mut |name, t| {
        if status.is_ok() {
            status = restore(dir, name, t);
        }
    });
    status?;

    let disc = if cfg.lambda_d > 0.0 {
        let mut d = init_discriminator(&DiscriminatorConfig::default(), 0);
        let mut status = Ok(());
        d.visit_params_mut(&mut |name, t, _| {
            if status.is_ok() {
                status = restore(dir, name, t);
            }
        });
        status?;
        Some(d)
    } else {
        None
    };
    Ok((cfg, seg, disc))
}

fn restore(dir: &Path, name: &str, t: &mut Tensor) -> Result<()> {
    let loaded = read_tensor(&dir.join(name))
        .map_err(|e| Error::Checkpoint(format!("missing tensor `{name}`: {e}")))?;
    if loaded.shape() != t.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            loaded.shape(),
            t.shape()
        )));
    }
    *t = loaded;
    Ok(())
}
