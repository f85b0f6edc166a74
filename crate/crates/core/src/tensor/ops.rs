use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::exec;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    exec::for_each_chunk(&mut out, n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    let t = Tensor::new(vec![m, n], out)?;
    t.debug_check_finite("matmul");
    Ok(t)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Spatial footprint of a convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    Conv { kh: usize, kw: usize, filters: usize },
    Pool { window: usize },
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (k <= len).then(|| ((len - k) / stride + 1, 0)),
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Some((out, total / 2))
        }
    }
}

/// Output shape `(H', W', C')` of a convolution or pooling layer over an
/// `(H, W, C)` input, without touching any data.
pub fn conv_out_shape(
    in_shape: &[usize],
    kernel: KernelShape,
    stride: usize,
    padding: Padding,
) -> Result<Vec<usize>> {
    if in_shape.len() != 3 || in_shape.contains(&0) {
        return Err(Error::Shape(format!(
            "spatial layers need an (H, W, C) input, got {in_shape:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (kh, kw, oc) = match kernel {
        KernelShape::Conv { kh, kw, filters } => (kh, kw, filters),
        KernelShape::Pool { window } => {
            if padding != Padding::Valid {
                return Err(Error::Shape("pooling supports valid padding only".into()));
            }
            (window, window, c)
        }
    };
    if kh == 0 || kw == 0 || oc == 0 {
        return Err(Error::Shape("kernel dimensions must be positive".into()));
    }
    match (
        out_extent(h, kh, stride, padding),
        out_extent(w, kw, stride, padding),
    ) {
        (Some((oh, _)), Some((ow, _))) => Ok(vec![oh, ow, oc]),
        _ => Err(Error::dim("window larger than padded input", &[kh, kw], in_shape)),
    }
}

fn as_batched(input: &Tensor, op: &'static str) -> Result<(Vec<usize>, bool)> {
    match input.rank() {
        3 => Ok((vec![1, input.shape()[0], input.shape()[1], input.shape()[2]], true)),
        4 => Ok((input.shape().to_vec(), false)),
        _ => Err(Error::Shape(format!(
            "{op} needs an (H, W, C) or (N, H, W, C) input, got {:?}",
            input.shape()
        ))),
    }
}

fn geometry(shape4: &[usize], kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Geometry> {
    let (n, h, w, c) = (shape4[0], shape4[1], shape4[2], shape4[3]);
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let (oh, pad_top) = out_extent(h, kh, stride, padding)
        .ok_or_else(|| Error::dim("window larger than padded input", &[kh, kw], &shape4[1..]))?;
    let (ow, pad_left) = out_extent(w, kw, stride, padding)
        .ok_or_else(|| Error::dim("window larger than padded input", &[kh, kw], &shape4[1..]))?;
    Ok(Geometry { n, h, w, c, oh, ow, pad_top, pad_left })
}

#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < len)
}

/// 2-D convolution over NHWC input with an `[kh, kw, Cin, Cout]` kernel.
///
/// Rank-3 input is treated as a single sample and rank-3 output is returned.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (shape4, squeeze) = as_batched(input, "conv2d")?;
    if kernel.rank() != 4 || kernel.shape()[2] != shape4[3] {
        return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
    }
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let g = geometry(&shape4, kh, kw, stride, padding)?;
    let (x, k) = (input.data(), kernel.data());
    let cin = g.c;
    let mut out = vec![0.0; g.n * g.oh * g.ow * cout];

    exec::for_each_chunk(&mut out, g.ow * cout, |row_idx, row| {
        let (n, oy) = (row_idx / g.oh, row_idx % g.oh);
        for ox in 0..g.ow {
            let acc = &mut row[ox * cout..(ox + 1) * cout];
            for ky in 0..kh {
                let Some(iy) = source_index(oy, ky, stride, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = source_index(ox, kx, stride, g.pad_left, g.w) else {
                        continue;
                    };
                    let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xbase + ci];
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    });

    let shape = if squeeze {
        vec![g.oh, g.ow, cout]
    } else {
        vec![g.n, g.oh, g.ow, cout]
    };
    let t = Tensor::new(shape, out)?;
    t.debug_check_finite("conv2d");
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub kernel: Tensor,
    pub input: Tensor,
}

/// Gradients of a bias-free convolution given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Conv2dGrads> {
    let (shape4, _) = as_batched(input, "conv2d_backward")?;
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let g = geometry(&shape4, kh, kw, stride, padding)?;
    let expected = [g.n, g.oh, g.ow, cout];
    if grad_out.len() != expected.iter().product::<usize>() {
        return Err(Error::dim("conv2d_backward", grad_out.shape(), &expected));
    }
    let (x, k, dz) = (input.data(), kernel.data(), grad_out.data());
    let cin = g.c;

    let mut dk = vec![0.0; kernel.len()];
    exec::for_each_chunk(&mut dk, cin * cout, |tap, acc| {
        let (ky, kx) = (tap / kw, tap % kw);
        for n in 0..g.n {
            for oy in 0..g.oh {
                let Some(iy) = source_index(oy, ky, stride, g.pad_top, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    let Some(ix) = source_index(ox, kx, stride, g.pad_left, g.w) else {
                        continue;
                    };
                    let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                    let dbase = ((n * g.oh + oy) * g.ow + ox) * cout;
                    let drow = &dz[dbase..dbase + cout];
                    for ci in 0..cin {
                        let xv = x[xbase + ci];
                        for (a, &dv) in acc[ci * cout..(ci + 1) * cout].iter_mut().zip(drow) {
                            *a += xv * dv;
                        }
                    }
                }
            }
        }
    });

    let mut dx = vec![0.0; input.len()];
    exec::for_each_chunk(&mut dx, g.h * g.w * cin, |n, acc| {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dbase = ((n * g.oh + oy) * g.ow + ox) * cout;
                let drow = &dz[dbase..dbase + cout];
                for ky in 0..kh {
                    let Some(iy) = source_index(oy, ky, stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = source_index(ox, kx, stride, g.pad_left, g.w) else {
                            continue;
                        };
                        let xbase = (iy * g.w + ix) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let s: f64 = krow.iter().zip(drow).map(|(a, b)| a * b).sum();
                            acc[xbase + ci] += s;
                        }
                    }
                }
            }
        }
    });

    Ok(Conv2dGrads {
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        input: Tensor::new(input.shape().to_vec(), dx)?,
    })
}

/// Flat input positions of each pooled maximum, for backward routing.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Valid-padded max pooling with a square window. Ties resolve to the first
/// maximum in row-major window order.
pub fn maxpool(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolIndex)> {
    let (shape4, squeeze) = as_batched(input, "maxpool")?;
    if window == 0 {
        return Err(Error::Shape("pool window must be positive".into()));
    }
    let g = geometry(&shape4, window, window, stride, Padding::Valid)?;
    let x = input.data();
    let c = g.c;
    let total = g.n * g.oh * g.ow * c;
    let mut out = vec![0.0; total];
    let mut arg = vec![0usize; total];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for ky in 0..window {
                        for kx in 0..window {
                            let at = ((n * g.h + oy * stride + ky) * g.w + ox * stride + kx) * c + ch;
                            if x[at] > best || (ky == 0 && kx == 0) {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    out[obase + ch] = best;
                    arg[obase + ch] = best_at;
                }
            }
        }
    }
    let shape = if squeeze {
        vec![g.oh, g.ow, c]
    } else {
        vec![g.n, g.oh, g.ow, c]
    };
    Ok((
        Tensor::new(shape, out)?,
        PoolIndex {
            input_shape: input.shape().to_vec(),
            argmax: arg,
        },
    ))
}

pub fn maxpool_backward(grad_out: &Tensor, index: &PoolIndex) -> Result<Tensor> {
    if grad_out.len() != index.argmax.len() {
        return Err(Error::dim(
            "maxpool_backward",
            grad_out.shape(),
            &[index.argmax.len()],
        ));
    }
    let mut dx = vec![0.0; index.input_shape.iter().product()];
    for (&at, &g) in index.argmax.iter().zip(grad_out.data()) {
        dx[at] += g;
    }
    Tensor::new(index.input_shape.clone(), dx)
}
