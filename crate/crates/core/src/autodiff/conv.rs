//! Convolution and pooling kernels (im2col + GEMM, one image per task).

use crate::error::{GrffError, Result};
use crate::parallel;
use crate::tensor::{gemm, Tensor, Transpose};

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, kernels: &Tensor) -> Result<ConvDims> {
    let (&[b, c, h, w], &[k, kc, kh, kw]) = (x.shape(), kernels.shape()) else {
        return Err(GrffError::Shape(format!(
            "conv2d expects 4-D input and kernels, got {:?} and {:?}",
            x.shape(),
            kernels.shape()
        )));
    };
    if c != kc {
        return Err(GrffError::dim("conv2d channels", x.shape(), kernels.shape()));
    }
    if h < kh || w < kw {
        return Err(GrffError::Shape(format!(
            "image {h}×{w} is smaller than kernel {kh}×{kw}"
        )));
    }
    Ok(ConvDims {
        b,
        c,
        h,
        w,
        k,
        kh,
        kw,
        oh: h - kh + 1,
        ow: w - kw + 1,
    })
}

/// `cols[(c,u,v), (i,j)] = img[c, i+u, j+v]`.
fn im2col(img: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let l = d.oh * d.ow;
    for c in 0..d.c {
        for u in 0..d.kh {
            for v in 0..d.kw {
                let r = (c * d.kh + u) * d.kw + v;
                let dst = &mut cols[r * l..(r + 1) * l];
                for i in 0..d.oh {
                    let src = &img[(c * d.h + i + u) * d.w + v..][..d.ow];
                    dst[i * d.ow..(i + 1) * d.ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, img: &mut [f64]) {
    let l = d.oh * d.ow;
    for c in 0..d.c {
        for u in 0..d.kh {
            for v in 0..d.kw {
                let r = (c * d.kh + u) * d.kw + v;
                let src = &cols[r * l..(r + 1) * l];
                for i in 0..d.oh {
                    let dst = &mut img[(c * d.h + i + u) * d.w + v..][..d.ow];
                    for (o, s) in dst.iter_mut().zip(&src[i * d.ow..(i + 1) * d.ow]) {
                        *o += s;
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x, kernels)?;
    let in_len = d.c * d.h * d.w;
    let patch = d.c * d.kh * d.kw;
    let l = d.oh * d.ow;
    let mut out = vec![0.0; d.b * d.k * l];
    parallel::for_each_chunk_mut(&mut out, d.k * l, |bi, dst| {
        let mut cols = vec![0.0; patch * l];
        im2col(&x.data()[bi * in_len..(bi + 1) * in_len], &d, &mut cols);
        gemm(d.k, patch, l, kernels.data(), Transpose::No, &cols, Transpose::No, dst, 0.0);
    });
    Tensor::new(vec![d.b, d.k, d.oh, d.ow], out)
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

pub(super) fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_k: bool,
) -> Result<ConvGrads> {
    let d = conv_dims(x, kernels)?;
    let in_len = d.c * d.h * d.w;
    let patch = d.c * d.kh * d.kw;
    let l = d.oh * d.ow;
    let per_image = parallel::map_indexed(d.b, |bi| {
        let gimg = &g.data()[bi * d.k * l..(bi + 1) * d.k * l];
        let mut cols = vec![0.0; patch * l];
        im2col(&x.data()[bi * in_len..(bi + 1) * in_len], &d, &mut cols);
        let dk = need_k.then(|| {
            // dK = dOut[K×L] · colsᵀ[L×P]
            let mut dk = vec![0.0; d.k * patch];
            gemm(d.k, l, patch, gimg, Transpose::No, &cols, Transpose::Yes, &mut dk, 0.0);
            dk
        });
        let dx = need_x.then(|| {
            // dCols = Kᵀ[P×K] · dOut[K×L]
            let mut dcols = vec![0.0; patch * l];
            gemm(patch, d.k, l, kernels.data(), Transpose::Yes, gimg, Transpose::No, &mut dcols, 0.0);
            let mut dimg = vec![0.0; in_len];
            col2im(&dcols, &d, &mut dimg);
            dimg
        });
        (dx, dk)
    });
    let mut dx_all = need_x.then(|| Vec::with_capacity(d.b * in_len));
    let mut dk_sum = need_k.then(|| vec![0.0; d.k * patch]);
    // Per-image kernel gradients are summed in image order so the result
    // does not depend on scheduling.
    for (dx, dk) in per_image {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(sum), Some(dk)) = (dk_sum.as_mut(), dk) {
            sum.iter_mut().zip(&dk).for_each(|(s, v)| *s += v);
        }
    }
    Ok((dx_all, dk_sum))
}

/// 2×2 stride-2 max pooling; also returns the flat source index of every
/// output (first maximum in row-major window order on ties).
pub(super) fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(GrffError::Shape(format!("maxpool2 needs ≥2 axes, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(GrffError::Shape(format!(
            "maxpool2 needs even spatial extents, got {h}×{w}"
        )));
    }
    let planes = x.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let data = x.data();
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok((Tensor::new(shape, out)?, argmax))
}
