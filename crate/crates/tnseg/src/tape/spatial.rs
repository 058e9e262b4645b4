//! Spatial tape operations: 2-D convolution, pooling, nearest upsampling.
//!
//! Convolution is direct cross-correlation (no kernel flip), lowered to a
//! per-image im2col buffer and a dense GEMM. The im2col buffer is rebuilt in
//! the backward pass instead of being saved, trading a little compute for a
//! lot of memory.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{accum_parent, Node, Op, Tape, Var};

impl Tape {
    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kh,kw]` plus
    /// per-channel bias, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::of(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, req))
    }

    /// 2x2 max pooling; spatial extents must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("maxpool2d")?;
        check_even("maxpool2d", h, w)?;
        let src = self.value(x).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_i = base + (2 * oy) * w + 2 * ox;
                    let mut best = src[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                    let o = nc * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, req))
    }

    /// 2x2 average pooling; spatial extents must be even.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avgpool2d")?;
        check_even("avgpool2d", h, w)?;
        let src = self.value(x).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = base + (2 * oy) * w + 2 * ox;
                    out[nc * ho * wo + oy * wo + ox] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::AvgPool2 { x }, req))
    }

    /// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest")?;
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * ho * wo;
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[base + y * w + x_];
                    let o = obase + (2 * y) * wo + 2 * x_;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + wo] = v;
                    out[o + wo + 1] = v;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::Upsample2 { x }, req))
    }
}

fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{op}: spatial extents {h}x{w} not divisible by 2"
        )));
    }
    Ok(())
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn of(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, c_in, h, ww) = x.dims4("conv2d")?;
        let (c_out, kc, kh, kw) = w.dims4("conv2d kernel")?;
        if kc != c_in {
            return Err(Error::AxisMismatch { op: "conv2d", axis: 1, left: c_in, right: kc });
        }
        if b.shape() != [c_out] {
            return Err(Error::InvalidShape {
                op: "conv2d bias",
                shape: b.shape().to_vec(),
                msg: format!("expected [{c_out}]"),
            });
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > ww + 2 * pad {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                ww + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (ww + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c_in, h, w: ww, c_out, kh, kw, stride, pad, ho, wo })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

/// Lowers one image into `cols: [Cin*kh*kw, Ho*Wo]` (row-major).
fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let l = g.l();
    for ci in 0..g.c_in {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky). wrapping_sub(g.pad);
                    let seg = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy >= g.h {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad must land in [0, w)
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad - kx).min(g.wo).max(lo);
                        seg[..lo].fill(0.0);
                        seg[hi..].fill(0.0);
                        seg[lo..hi].copy_from_slice(&src_row[lo + kx - g.pad..hi + kx - g.pad]);
                    } else {
                        for (ox, slot) in seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx).wrapping_sub(g.pad);
                            *slot = if ix < g.w { src_row[ix] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one image (transpose of [`im2col`]).
fn col2im_add(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    for ci in 0..g.c_in {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * g.l();
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad);
                    if iy >= g.h {
                        continue;
                    }
                    let seg = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad - kx).min(g.wo).max(lo);
                        let dst = &mut plane[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                        for (d, &v) in dst.iter_mut().zip(&seg[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in seg.iter().enumerate() {
                            let ix = (ox * g.stride + kx).wrapping_sub(g.pad);
                            if ix < g.w {
                                plane[iy * g.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Tensor {
    let (k, l) = (g.k(), g.l());
    let mut out = vec![0.0; g.n * g.c_out * l];
    let mut cols = vec![0.0; k * l];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    for img in 0..g.n {
        im2col(&xd[img * g.c_in * g.h * g.w..], g, &mut cols);
        let out_n = &mut out[img * g.c_out * l..(img + 1) * g.c_out * l];
        // out_n = W x cols, issued transposed (out_n^T = cols^T x W^T) via
        // stride views: the tall-m orientation is what the GEMM backend
        // handles best for these shapes.
        unsafe {
            dgemm(
                l,
                k,
                g.c_out,
                1.0,
                cols.as_ptr(),
                1,
                l as isize,
                wd.as_ptr(),
                1,
                k as isize,
                0.0,
                out_n.as_mut_ptr(),
                1,
                l as isize,
            );
        }
        for co in 0..g.c_out {
            let bias = bd[co];
            for v in &mut out_n[co * l..(co + 1) * l] {
                *v += bias;
            }
        }
    }
    Tensor::new(&[g.n, g.c_out, g.ho, g.wo], out).expect("computed shape")
}

pub(crate) fn backward_conv2d(
    before: &mut [Node],
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    g_out: &Tensor,
) {
    let geom = ConvGeom::of(&before[x.0].value, &before[w.0].value, &before[b.0].value, stride, pad)
        .expect("validated in forward");
    let (k, l) = (geom.k(), geom.l());
    let gd = g_out.data();

    if before[b.0].requires {
        let mut db = vec![0.0; geom.c_out];
        for img in 0..geom.n {
            for co in 0..geom.c_out {
                let base = (img * geom.c_out + co) * l;
                db[co] += gd[base..base + l].iter().sum::<f64>();
            }
        }
        accum_parent(before, b, Tensor::from_vec(db));
    }

    let need_dw = before[w.0].requires;
    let need_dx = before[x.0].requires;
    if !need_dw && !need_dx {
        return;
    }

    let xd = before[x.0].value.data();
    let wd = before[w.0].value.data();
    let mut cols = vec![0.0; k * l];
    let mut dw = if need_dw { vec![0.0; geom.c_out * k] } else { Vec::new() };
    let mut dx = if need_dx { vec![0.0; geom.n * geom.c_in * geom.h * geom.w] } else { Vec::new() };
    let mut dcols = if need_dx { vec![0.0; k * l] } else { Vec::new() };

    for img in 0..geom.n {
        let g_n = &gd[img * geom.c_out * l..(img + 1) * geom.c_out * l];
        if need_dw {
            im2col(&xd[img * geom.c_in * geom.h * geom.w..], &geom, &mut cols);
            // dW += G_n x cols^T, issued as dW^T += cols x G_n^T
            unsafe {
                dgemm(
                    k,
                    l,
                    geom.c_out,
                    1.0,
                    cols.as_ptr(),
                    l as isize,
                    1,
                    g_n.as_ptr(),
                    1,
                    l as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    1,
                    k as isize,
                );
            }
        }
        if need_dx {
            // dcols = W^T x G_n, issued as dcols^T = G_n^T x W
            unsafe {
                dgemm(
                    l,
                    geom.c_out,
                    k,
                    1.0,
                    g_n.as_ptr(),
                    1,
                    l as isize,
                    wd.as_ptr(),
                    k as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    1,
                    l as isize,
                );
            }
            col2im_add(&dcols, &geom, &mut dx[img * geom.c_in * geom.h * geom.w..]);
        }
    }

    if need_dw {
        let wshape = before[w.0].value.shape().to_vec();
        accum_parent(before, w, Tensor::new(&wshape, dw).expect("kernel shape"));
    }
    if need_dx {
        let xshape = before[x.0].value.shape().to_vec();
        accum_parent(before, x, Tensor::new(&xshape, dx).expect("input shape"));
    }
}

pub(crate) fn backward_maxpool2(before: &mut [Node], x: Var, argmax: &[u32], g: &Tensor) {
    let mut dx = vec![0.0; before[x.0].value.numel()];
    for (o, &gi) in g.data().iter().enumerate() {
        dx[argmax[o] as usize] += gi;
    }
    let shape = before[x.0].value.shape().to_vec();
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
}

pub(crate) fn backward_avgpool2(before: &mut [Node], x: Var, g: &Tensor) {
    let shape = before[x.0].value.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let gd = g.data();
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let v = 0.25 * gd[nc * ho * wo + oy * wo + ox];
                let i = base + (2 * oy) * w + 2 * ox;
                dx[i] += v;
                dx[i + 1] += v;
                dx[i + w] += v;
                dx[i + w + 1] += v;
            }
        }
    }
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
}

pub(crate) fn backward_upsample2(before: &mut [Node], x: Var, g: &Tensor) {
    let shape = before[x.0].value.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let gd = g.data();
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let obase = nc * ho * wo;
        let base = nc * h * w;
        for y in 0..h {
            for x_ in 0..w {
                let o = obase + (2 * y) * wo + 2 * x_;
                dx[base + y * w + x_] = gd[o] + gd[o + 1] + gd[o + wo] + gd[o + wo + 1];
            }
        }
    }
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
}
