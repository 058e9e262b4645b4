//! Whole-image evaluation: preprocessing, overlapping-patch inference,
//! metrics per image, and entropy summaries of the predictions.

use crate::data::patches::{tiled_inference, INFERENCE_STRIDE, PATCH};
use crate::data::preprocess::preprocess;
use crate::data::TargetImage;
use crate::error::Result;
use crate::metrics::{evaluate as metrics_of, MetricsReport, DEFAULT_THRESHOLD};
use crate::nets::Segmenter;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Domain;

/// Vessel-probability map of one preprocessed image (pixels in [0, 255])
/// by stride-overlapping patch inference with probability averaging.
pub fn predict_image(
    seg: &Segmenter,
    pixels: &Tensor,
    domain: Domain,
    stride: usize,
    patch: usize,
) -> Result<Tensor> {
    let mut model = |patches: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(patches.scale(1.0 / 255.0));
        let p = seg.forward_eval(&mut tape, x, domain)?;
        Ok(tape.value(p).clone())
    };
    tiled_inference(pixels, &mut model, stride, patch)
}

/// Preprocesses and predicts one target image end to end.
pub fn predict_target(seg: &Segmenter, img: &TargetImage) -> Result<Tensor> {
    let pixels = preprocess(&img.pixels, &img.fov)?;
    predict_image(seg, &pixels, Domain::Target, INFERENCE_STRIDE, PATCH)
}

/// Per-image metrics over the target test split. This is the only place
/// sealed target labels are opened.
pub fn eval_target(
    seg: &Segmenter,
    images: &[TargetImage],
    threshold: f64,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let label = img
            .sealed_label
            .as_ref()
            .ok_or(crate::error::Error::Manifest(format!(
                "image {} has no label; evaluation needs one",
                img.id
            )))?
            .unseal();
        let map = predict_target(seg, img)?;
        let report = metrics_of(&map, label, &img.fov, threshold)?;
        out.push((img.id.clone(), report));
    }
    Ok(out)
}

/// Convenience wrapper with the standard 0.5 threshold.
pub fn eval_target_default(
    seg: &Segmenter,
    images: &[TargetImage],
) -> Result<Vec<(String, MetricsReport)>> {
    eval_target(seg, images, DEFAULT_THRESHOLD)
}

/// Per-pixel binary entropy of a vessel-probability map, in [0, 1].
pub fn entropy_of_prob_map(map: &Tensor) -> Tensor {
    let ln2 = 2f64.ln();
    map.map(|p| {
        let mut acc = 0.0;
        if p > 0.0 {
            acc -= p * p.ln();
        }
        let q = 1.0 - p;
        if q > 0.0 {
            acc -= q * q.ln();
        }
        acc / ln2
    })
}

/// Mean prediction entropy over FOV pixels, averaged over target images.
/// Low values mean confident predictions.
pub fn mean_target_entropy(seg: &Segmenter, images: &[TargetImage]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let map = predict_target(seg, img)?;
        let ent = entropy_of_prob_map(&map);
        let (sum, count) = ent
            .data()
            .iter()
            .zip(img.fov.data())
            .filter(|(_, &m)| m == 1.0)
            .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
        total += sum / count.max(1) as f64;
    }
    Ok(total / images.len().max(1) as f64)
}
