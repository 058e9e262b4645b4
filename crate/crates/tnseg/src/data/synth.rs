//! Synthetic two-domain vessel images.
//!
//! Vessels are random smooth branching curves (random walks with angular
//! momentum and width tapering) rasterized dark on a brighter textured
//! disc, the field of view. The source domain renders clean; the target
//! domain renders with a configured appearance shift: brightness offset,
//! contrast scaling, Gaussian blur, stronger background texture, and a
//! different FOV radius. Ground truth is the rasterized centerline tube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::{SealedLabel, SourceImage, TargetImage};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ShiftParams {
    /// Added to every FOV pixel.
    pub brightness: f64,
    /// Contrast scale around the FOV mean (1 = unchanged).
    pub contrast: f64,
    /// Gaussian blur sigma in pixels (0 disables).
    pub blur_sigma: f64,
    /// Background texture amplitude used when rendering target images.
    pub texture_amplitude: f64,
    /// FOV radius as a fraction of the half-extent for target images.
    pub fov_radius_frac: f64,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Primary branches per tree, inclusive range.
    pub branch_count: (usize, usize),
    /// Root vessel width range in pixels.
    pub vessel_width: (f64, f64),
    /// Std-dev of the per-step heading change (radians).
    pub curvature: f64,
    /// Peak darkening of a vessel against the background.
    pub vessel_contrast: f64,
    pub background_level: f64,
    /// Background texture amplitude for source images.
    pub texture_amplitude: f64,
    /// FOV radius fraction for source images.
    pub fov_radius_frac: f64,
    pub shift: ShiftParams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            branch_count: (6, 9),
            vessel_width: (2.4, 4.2),
            curvature: 0.16,
            vessel_contrast: 60.0,
            background_level: 170.0,
            texture_amplitude: 7.0,
            fov_radius_frac: 0.96,
            shift: ShiftParams {
                brightness: -18.0,
                contrast: 0.8,
                blur_sigma: 1.4,
                texture_amplitude: 22.0,
                fov_radius_frac: 0.92,
            },
            seed: 0,
        }
    }
}

impl ShiftParams {
    /// The degenerate shift: target rendering identical to source.
    pub fn none(cfg: &SynthConfig) -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: 0.0,
            texture_amplitude: cfg.texture_amplitude,
            fov_radius_frac: cfg.fov_radius_frac,
        }
    }
}

/// One rendered image before domain assignment.
pub struct Rendered {
    pub pixels: Tensor,
    pub fov: Tensor,
    pub label: Tensor,
    pub vessel_fraction: f64,
}

/// Generates `n_src` labeled source images and `n_tgt` target images whose
/// labels come back sealed (only an evaluation may open them).
pub fn synth_domain_pair(
    cfg: &SynthConfig,
    n_src: usize,
    n_tgt: usize,
) -> Result<(Vec<SourceImage>, Vec<TargetImage>)> {
    let mut sources = Vec::with_capacity(n_src);
    for i in 0..n_src {
        let mut rng = stream_rng(cfg.seed, 2 * i as u64);
        let r = render(cfg, cfg.texture_amplitude, cfg.fov_radius_frac, &mut rng);
        sources.push(SourceImage {
            id: format!("src_{i:03}"),
            pixels: r.pixels,
            fov: r.fov,
            label: r.label,
        });
    }
    let mut targets = Vec::with_capacity(n_tgt);
    for i in 0..n_tgt {
        let mut rng = stream_rng(cfg.seed, 2 * i as u64 + 1);
        let r = render(cfg, cfg.shift.texture_amplitude, cfg.shift.fov_radius_frac, &mut rng);
        let pixels = apply_shift(&r.pixels, &r.fov, &cfg.shift);
        targets.push(TargetImage {
            id: format!("tgt_{i:03}"),
            pixels,
            fov: r.fov,
            sealed_label: Some(SealedLabel::new(r.label)),
        });
    }
    Ok((sources, targets))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders one clean image: textured FOV disc with a dark vessel tree.
pub fn render(
    cfg: &SynthConfig,
    texture_amplitude: f64,
    fov_radius_frac: f64,
    rng: &mut ChaCha12Rng,
) -> Rendered {
    let s = cfg.image_size;
    let c = s as f64 / 2.0;
    let radius = fov_radius_frac * c;

    let mut fov = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dy, dx) = (y as f64 + 0.5 - c, x as f64 + 0.5 - c);
            if dy * dy + dx * dx <= radius * radius {
                fov[y * s + x] = 1.0;
            }
        }
    }

    // Smooth background: a few random low-frequency gratings over a base
    // level, slightly vignetted toward the rim.
    let mut background = vec![0.0; s * s];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(1.2..3.5) / s as f64 * std::f64::consts::TAU;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.4..1.0);
            (angle, freq, phase, amp)
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.3).sum();
    for y in 0..s {
        for x in 0..s {
            let mut v = 0.0;
            for &(angle, freq, phase, amp) in &waves {
                let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                v += amp * (u * freq + phase).sin();
            }
            let (dy, dx) = (y as f64 + 0.5 - c, x as f64 + 0.5 - c);
            let r2 = (dy * dy + dx * dx) / (radius * radius);
            background[y * s + x] = cfg.background_level
                + texture_amplitude * v / amp_total
                - 18.0 * r2.min(1.0);
        }
    }

    // Vessel tree: darkening depth map plus the binary tube label.
    let mut depth = vec![0.0f64; s * s];
    let mut label = vec![0.0; s * s];
    let n_branches = rng.gen_range(cfg.branch_count.0..=cfg.branch_count.1);
    let root_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let root = (
        c + 0.35 * radius * root_angle.cos(),
        c + 0.35 * radius * root_angle.sin(),
    );
    struct Walk {
        pos: (f64, f64),
        heading: f64,
        width: f64,
        dip: f64,
    }
    let mut queue: Vec<Walk> = (0..n_branches)
        .map(|b| {
            let spread = std::f64::consts::TAU * (b as f64 / n_branches as f64);
            Walk {
                pos: root,
                heading: spread + rng.gen_range(-0.3..0.3),
                width: rng.gen_range(cfg.vessel_width.0..cfg.vessel_width.1),
                dip: cfg.vessel_contrast * rng.gen_range(0.8..1.0),
            }
        })
        .collect();

    let inside = |p: (f64, f64)| {
        let (dy, dx) = (p.1 - c, p.0 - c);
        dy * dy + dx * dx <= radius * radius * 1.02
    };
    let mut guard = 0;
    while let Some(mut w) = queue.pop() {
        guard += 1;
        if guard > 20_000 {
            break;
        }
        let mut steps = 0;
        while w.width >= 0.7 && inside(w.pos) && steps < 500 {
            steps += 1;
            stamp(&mut depth, &mut label, s, w.pos, w.width, w.dip);
            // gaussian-ish heading jiggle from a uniform pair
            let jiggle: f64 = (rng.gen_range(-1.0..1.0f64) + rng.gen_range(-1.0..1.0)) * cfg.curvature;
            w.heading += jiggle;
            w.pos.0 += 1.4 * w.heading.cos();
            w.pos.1 += 1.4 * w.heading.sin();
            w.width *= 0.9965;
            if rng.gen_bool(0.022) && w.width > 1.1 && queue.len() < 64 {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                queue.push(Walk {
                    pos: w.pos,
                    heading: w.heading + side * rng.gen_range(0.35..0.9),
                    width: w.width * rng.gen_range(0.55..0.75),
                    dip: w.dip,
                });
                w.width *= 0.88;
            }
        }
    }

    let mut pixels = vec![0.0; s * s];
    let mut vessel_px = 0usize;
    let mut fov_px = 0usize;
    for i in 0..s * s {
        if fov[i] == 1.0 {
            fov_px += 1;
            pixels[i] = (background[i] - depth[i]).clamp(0.0, 255.0).round();
            if label[i] == 1.0 {
                vessel_px += 1;
            }
        } else {
            label[i] = 0.0;
        }
    }
    let vessel_fraction = vessel_px as f64 / fov_px.max(1) as f64;

    Rendered {
        pixels: Tensor::new(&[s, s], pixels).expect("image shape"),
        fov: Tensor::new(&[s, s], fov).expect("image shape"),
        label: Tensor::new(&[s, s], label).expect("image shape"),
        vessel_fraction,
    }
}

/// Stamps one centerline point: soft darkening, hard tube label.
fn stamp(depth: &mut [f64], label: &mut [f64], s: usize, pos: (f64, f64), width: f64, dip: f64) {
    let half = width / 2.0;
    let reach = (half + 1.5).ceil() as isize;
    let (px, py) = pos;
    let (cx, cy) = (px.round() as isize, py.round() as isize);
    for y in cy - reach..=cy + reach {
        for x in cx - reach..=cx + reach {
            if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
                continue;
            }
            let d2 = {
                let dx = x as f64 + 0.0 - px;
                let dy = y as f64 + 0.0 - py;
                dx * dx + dy * dy
            };
            let i = y as usize * s + x as usize;
            let fall = (-d2 / (half * half).max(0.25)).exp();
            let v = dip * fall;
            if v > depth[i] {
                depth[i] = v;
            }
            if d2 <= half * half {
                label[i] = 1.0;
            }
        }
    }
}

/// Applies the target-domain appearance shift inside the FOV.
pub fn apply_shift(pixels: &Tensor, fov: &Tensor, shift: &ShiftParams) -> Tensor {
    let mut out = pixels.clone();
    if shift.blur_sigma > 0.0 {
        out = gaussian_blur(&out, shift.blur_sigma);
    }
    let (sum, count) = out
        .data()
        .iter()
        .zip(fov.data())
        .filter(|(_, &m)| m == 1.0)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let data: Vec<f64> = out
        .data()
        .iter()
        .zip(fov.data())
        .map(|(&v, &m)| {
            if m == 1.0 {
                ((v - mean) * shift.contrast + mean + shift.brightness)
                    .clamp(0.0, 255.0)
                    .round()
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(pixels.shape(), data).expect("same shape")
}

/// Separable Gaussian blur with a 3-sigma kernel.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();

    let src = img.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xi = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * src[y * w + xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yi = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(&[h, w], out).expect("same shape")
}
