//! Patch machinery: random training-patch sampling, dihedral augmentation,
//! and ordered overlapping-patch inference with probability averaging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PATCH: usize = 64;
pub const INFERENCE_STRIDE: usize = 10;

/// Patches cut from one image, with their top-left origins.
pub struct PatchSet {
    /// `[K, 1, patch, patch]`
    pub patches: Tensor,
    pub origins: Vec<(usize, usize)>,
}

/// Copies a `size`-square window with top-left corner `(row, col)`.
pub fn extract_patch(img: &Tensor, origin: (usize, usize), size: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (r, c) = origin;
    debug_assert!(r + size <= h && c + size <= w, "patch must lie inside the image");
    let mut data = Vec::with_capacity(size * size);
    for y in r..r + size {
        data.extend_from_slice(&img.data()[y * w + c..y * w + c + size]);
    }
    Tensor::new(&[size, size], data).expect("patch shape")
}

/// Uniform random fully-contained patch origins, deterministic per seed.
pub fn sample_training_patches(
    img: &Tensor,
    count: usize,
    patch: usize,
    seed: u64,
) -> Result<PatchSet> {
    let (h, w) = img.dims2("sample_training_patches")?;
    if h < patch || w < patch {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {patch}x{patch} patch"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut origins = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * patch * patch);
    for _ in 0..count {
        let r = rng.gen_range(0..=h - patch);
        let c = rng.gen_range(0..=w - patch);
        origins.push((r, c));
        let p = extract_patch(img, (r, c), patch);
        data.extend_from_slice(p.data());
    }
    Ok(PatchSet {
        patches: Tensor::new(&[count, 1, patch, patch], data)?,
        origins,
    })
}

/// One of the eight axis-aligned symmetries of a square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub h_flip: bool,
    pub v_flip: bool,
    /// Counter-clockwise quarter turns, 0-3.
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { h_flip: false, v_flip: false, quarter_turns: 0 };

    /// Independent coin flips for each mirror, a uniform quarter turn.
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        Dihedral {
            h_flip: rng.gen_bool(0.5),
            v_flip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4u8),
        }
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        debug_assert_eq!(h, w, "dihedral transforms need square patches");
        let n = h;
        let mut out = img.clone();
        if self.h_flip {
            out = flip_horizontal(&out, n);
        }
        if self.v_flip {
            out = flip_vertical(&out, n);
        }
        for _ in 0..self.quarter_turns {
            out = rotate90(&out, n);
        }
        out
    }
}

fn flip_horizontal(img: &Tensor, n: usize) -> Tensor {
    let src = img.data();
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            data[y * n + x] = src[y * n + (n - 1 - x)];
        }
    }
    Tensor::new(&[n, n], data).expect("same shape")
}

fn flip_vertical(img: &Tensor, n: usize) -> Tensor {
    let src = img.data();
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        data[y * n..(y + 1) * n].copy_from_slice(&src[(n - 1 - y) * n..(n - y) * n]);
    }
    Tensor::new(&[n, n], data).expect("same shape")
}

fn rotate90(img: &Tensor, n: usize) -> Tensor {
    // counter-clockwise: out[y][x] = in[x][n-1-y]
    let src = img.data();
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            data[y * n + x] = src[x * n + (n - 1 - y)];
        }
    }
    Tensor::new(&[n, n], data).expect("same shape")
}

/// Applies one sampled transform identically to a patch and its label.
pub fn augment(patch: &Tensor, label: &Tensor, rng: &mut ChaCha12Rng) -> (Tensor, Tensor) {
    let d = Dihedral::sample(rng);
    (d.apply(patch), d.apply(label))
}

/// Ordered top-left corners covering `extent` with the given stride; the
/// final origin snaps to the border so coverage is total.
pub fn tiled_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let last = extent - patch;
    let mut r = 0;
    loop {
        origins.push(r);
        if r == last {
            break;
        }
        r += stride;
        if r > last {
            origins.push(last);
            break;
        }
    }
    origins
}

/// A model of patches: `[K, 1, p, p]` in, class-probability maps
/// `[K, 2, p, p]` out.
pub trait PatchPredictor {
    fn predict(&mut self, patches: &Tensor) -> Result<Tensor>;
}

impl<F> PatchPredictor for F
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    fn predict(&mut self, patches: &Tensor) -> Result<Tensor> {
        self(patches)
    }
}

/// Stride-overlapping patch inference: every pixel's vessel probability is
/// the average of the class-1 probabilities over all patches covering it.
pub fn tiled_inference(
    img: &Tensor,
    model: &mut dyn PatchPredictor,
    stride: usize,
    patch: usize,
) -> Result<Tensor> {
    let (h, w) = img.dims2("tiled_inference")?;
    if h < patch || w < patch {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {patch}x{patch} patch"
        )));
    }
    let rows = tiled_origins(h, patch, stride);
    let cols = tiled_origins(w, patch, stride);
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            origins.push((r, c));
        }
    }

    let mut acc = vec![0.0; h * w];
    let mut cover = vec![0.0; h * w];
    const CHUNK: usize = 64;
    for chunk in origins.chunks(CHUNK) {
        let k = chunk.len();
        let mut data = Vec::with_capacity(k * patch * patch);
        for &(r, c) in chunk {
            data.extend_from_slice(extract_patch(img, (r, c), patch).data());
        }
        let batch = Tensor::new(&[k, 1, patch, patch], data)?;
        let probs = model.predict(&batch)?;
        let got = probs.shape();
        if got.len() != 4 || got[0] != k || got[1] != 2 || got[2] != patch || got[3] != patch {
            return Err(Error::InvalidShape {
                op: "tiled_inference",
                shape: got.to_vec(),
                msg: format!("model must return [{k},2,{patch},{patch}]"),
            });
        }
        let plane = patch * patch;
        for (pi, &(r, c)) in chunk.iter().enumerate() {
            // class-1 plane of patch pi
            let base = (pi * 2 + 1) * plane;
            for y in 0..patch {
                for x in 0..patch {
                    acc[(r + y) * w + c + x] += probs.data()[base + y * patch + x];
                    cover[(r + y) * w + c + x] += 1.0;
                }
            }
        }
    }
    debug_assert!(cover.iter().all(|&c| c >= 1.0), "border snapping guarantees coverage");
    let map: Vec<f64> = acc.iter().zip(&cover).map(|(&a, &c)| a / c).collect();
    Tensor::new(&[h, w], map)
}
