//! Convolution kernels: an im2col + matrix-multiply fast path and a plain
//! loop-nest reference implementation. Both compute cross-correlation with
//! symmetric zero padding; tests require them to agree to 1e-12 in f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, CowArray, IxDyn};

use crate::scalar::Scalar;
use crate::AutodiffError;

/// Output length of one spatial axis: floor((n + 2p - k)/s) + 1.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize, AutodiffError> {
    if stride == 0 {
        return Err(AutodiffError::Shape("convolution stride must be >= 1".into()));
    }
    let padded = n + 2 * pad;
    if padded < k || k == 0 {
        return Err(AutodiffError::Shape(format!(
            "kernel extent {k} exceeds padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn expect_rank(a: &ArrayViewD<'_, impl Scalar>, rank: usize, what: &str) -> Result<(), AutodiffError> {
    if a.ndim() != rank {
        return Err(AutodiffError::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            a.shape()
        )));
    }
    Ok(())
}

/// Contiguous row-major view of `a`, copying only if the layout demands it.
fn standard<'a, S: Scalar>(a: &ArrayViewD<'a, S>) -> CowArray<'a, S, IxDyn> {
    if a.as_slice().is_some() {
        CowArray::from(a.clone())
    } else {
        CowArray::from(a.to_owned())
    }
}

/// Range `[lo, hi)` of output indices `o` with `o*stride + k_off - pad` inside
/// `[0, len_in)`.
#[inline]
fn out_range(len_in: usize, k_off: usize, stride: usize, pad: usize, len_out: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    if len_in + pad <= k_off {
        return (0, 0);
    }
    let hi = ((len_in + pad - 1 - k_off) / stride + 1).min(len_out);
    (lo.min(hi), hi)
}

/// im2col for one 2D sample: columns `[cin*kh*kw, ho*wo]`.
fn im2col2d<S: Scalar>(
    xf: &[S],
    (cin, h, w): (usize, usize, usize),
    n: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array2<S> {
    let mut cols = Array2::<S>::zeros((cin * kh * kw, ho * wo));
    let cf = cols.as_slice_mut().expect("freshly allocated matrix is contiguous");
    for c in 0..cin {
        for ki in 0..kh {
            let (oy_lo, oy_hi) = out_range(h, ki, stride, pad, ho);
            for kj in 0..kw {
                let (ox_lo, ox_hi) = out_range(w, kj, stride, pad, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row_base = ((c * kh + ki) * kw + kj) * (ho * wo);
                for oy in oy_lo..oy_hi {
                    let iy = (oy * stride + ki) - pad;
                    let src = ((n * cin + c) * h + iy) * w;
                    let dst = row_base + oy * wo;
                    if stride == 1 {
                        let ix0 = (ox_lo + kj) - pad;
                        cf[dst + ox_lo..dst + ox_hi]
                            .copy_from_slice(&xf[src + ix0..src + ix0 + (ox_hi - ox_lo)]);
                    } else {
                        let mut ix = (ox_lo * stride + kj) - pad;
                        for o in ox_lo..ox_hi {
                            cf[dst + o] = xf[src + ix];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto one 2D input sample.
fn col2im2d<S: Scalar>(
    dxf: &mut [S],
    (cin, h, w): (usize, usize, usize),
    dcols: &Array2<S>,
    n: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    let dcf = dcols.as_slice().expect("gemm result is contiguous");
    for c in 0..cin {
        for ki in 0..kh {
            let (oy_lo, oy_hi) = out_range(h, ki, stride, pad, ho);
            for kj in 0..kw {
                let (ox_lo, ox_hi) = out_range(w, kj, stride, pad, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row_base = ((c * kh + ki) * kw + kj) * (ho * wo);
                for oy in oy_lo..oy_hi {
                    let iy = (oy * stride + ki) - pad;
                    let src = ((n * cin + c) * h + iy) * w;
                    let dst = row_base + oy * wo;
                    if stride == 1 {
                        let ix0 = (ox_lo + kj) - pad;
                        let run = ox_hi - ox_lo;
                        for (d, &v) in dxf[src + ix0..src + ix0 + run]
                            .iter_mut()
                            .zip(&dcf[dst + ox_lo..dst + ox_hi])
                        {
                            *d += v;
                        }
                    } else {
                        let mut ix = (ox_lo * stride + kj) - pad;
                        for o in ox_lo..ox_hi {
                            dxf[src + ix] += dcf[dst + o];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes `(batch, c_out, out_spatial...)` for a 2D convolution.
pub fn conv2d_shape(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize), AutodiffError> {
    let (n, cin, h, wid) = (x[0], x[1], x[2], x[3]);
    let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
    if cin != wcin {
        return Err(AutodiffError::Shape(format!(
            "conv2d channel mismatch: input {cin} vs kernel {wcin}"
        )));
    }
    let ho = conv_out_len(h, kh, stride, pad)?;
    let wo = conv_out_len(wid, kw, stride, pad)?;
    let _ = (n, cout);
    Ok((x[0], w[0], ho, wo))
}

/// 2D cross-correlation via im2col and matrix multiplication.
///
/// `x`: `[n, cin, h, w]`, `w`: `[cout, cin, kh, kw]`, optional bias `[cout]`.
pub fn conv2d_forward<S: Scalar>(
    x: &ArrayViewD<'_, S>,
    w: &ArrayViewD<'_, S>,
    bias: Option<&ArrayViewD<'_, S>>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<S>, AutodiffError> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d kernel")?;
    let (n, cout, ho, wo) = conv2d_shape(x.shape(), w.shape(), stride, pad)?;
    let (cin, h, wid) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(AutodiffError::Shape(format!(
                "conv2d bias length {} != output channels {cout}",
                b.len()
            )));
        }
    }
    let wmat = w
        .to_shape((cout, w.len() / cout))
        .map_err(|e| AutodiffError::Shape(e.to_string()))?
        .to_owned();
    let xstd = standard(x);
    let xf = xstd.as_slice().expect("standardised input is contiguous");
    let howo = ho * wo;
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, cout, ho, wo]));
    {
        let of = out.as_slice_mut().expect("freshly allocated output is contiguous");
        for s in 0..n {
            let cols = im2col2d(xf, (cin, h, wid), s, (kh, kw), stride, pad, (ho, wo));
            let prod = wmat.dot(&cols); // [cout, ho*wo]
            of[s * cout * howo..(s + 1) * cout * howo]
                .copy_from_slice(prod.as_slice().expect("gemm result is contiguous"));
        }
        if let Some(b) = bias {
            for s in 0..n {
                for c in 0..cout {
                    let bv = b[[c]];
                    let base = (s * cout + c) * howo;
                    for v in &mut of[base..base + howo] {
                        *v += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel, and bias.
pub fn conv2d_backward<S: Scalar>(
    x: &ArrayViewD<'_, S>,
    w: &ArrayViewD<'_, S>,
    dout: &ArrayViewD<'_, S>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<(Option<ArrayD<S>>, ArrayD<S>, ArrayD<S>), AutodiffError> {
    let (n, cout, ho, wo) = conv2d_shape(x.shape(), w.shape(), stride, pad)?;
    let (cin, h, wid) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let k = w.len() / cout;
    let wmat = w
        .to_shape((cout, k))
        .map_err(|e| AutodiffError::Shape(e.to_string()))?
        .to_owned();
    let xstd = standard(x);
    let xf = xstd.as_slice().expect("standardised input is contiguous");
    let dstd = standard(dout);
    let df = dstd.as_slice().expect("standardised gradient is contiguous");
    let howo = ho * wo;
    let mut dwmat = Array2::<S>::zeros((cout, k));
    let mut dbias = ArrayD::<S>::zeros(IxDyn(&[cout]));
    let mut dx = want_dx.then(|| ArrayD::<S>::zeros(x.raw_dim()));
    let dxf = dx
        .as_mut()
        .map(|d| d.as_slice_mut().expect("freshly allocated gradient is contiguous"));
    let mut dxf = dxf;
    {
        let dbf = dbias.as_slice_mut().expect("freshly allocated bias gradient is contiguous");
        for s in 0..n {
            let sample = &df[s * cout * howo..(s + 1) * cout * howo];
            let dg = ArrayView2::from_shape((cout, howo), sample)
                .expect("sample gradient block matches [cout, ho*wo]");
            for c in 0..cout {
                let mut acc = S::ZERO;
                for &g in &sample[c * howo..(c + 1) * howo] {
                    acc += g;
                }
                dbf[c] += acc;
            }
            let cols = im2col2d(xf, (cin, h, wid), s, (kh, kw), stride, pad, (ho, wo));
            general_mat_mul(S::ONE, &dg, &cols.t(), S::ONE, &mut dwmat);
            if let Some(dxf) = dxf.as_mut() {
                let dcols = wmat.t().dot(&dg); // [k, ho*wo]
                col2im2d(dxf, (cin, h, wid), &dcols, s, (kh, kw), stride, pad, (ho, wo));
            }
        }
    }
    let dw = dwmat
        .into_shape(IxDyn(w.shape()))
        .map_err(|e| AutodiffError::Shape(e.to_string()))?;
    Ok((dx, dw, dbias))
}

/// Plain loop-nest 2D cross-correlation used as a reference oracle.
pub fn conv2d_direct<S: Scalar>(
    x: &ArrayViewD<'_, S>,
    w: &ArrayViewD<'_, S>,
    bias: Option<&ArrayViewD<'_, S>>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<S>, AutodiffError> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d kernel")?;
    let (n, cout, ho, wo) = conv2d_shape(x.shape(), w.shape(), stride, pad)?;
    let (cin, h, wid) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, cout, ho, wo]));
    for s in 0..n {
        for c in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(S::ZERO, |b| b[[c]]);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                acc += x[[s, ci, iy as usize, ix as usize]] * w[[c, ci, ki, kj]];
                            }
                        }
                    }
                    out[[s, c, oy, ox]] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Shapes `(batch, c_out, d_out, h_out, w_out)` for a 3D convolution.
pub fn conv3d_shape(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize), AutodiffError> {
    let (cin, d, h, wid) = (x[1], x[2], x[3], x[4]);
    let (cout, wcin, kd, kh, kw) = (w[0], w[1], w[2], w[3], w[4]);
    if cin != wcin {
        return Err(AutodiffError::Shape(format!(
            "conv3d channel mismatch: input {cin} vs kernel {wcin}"
        )));
    }
    let do_ = conv_out_len(d, kd, stride, pad)?;
    let ho = conv_out_len(h, kh, stride, pad)?;
    let wo = conv_out_len(wid, kw, stride, pad)?;
    Ok((x[0], cout, do_, ho, wo))
}

/// im2col for one 3D sample: columns `[cin*kd*kh*kw, do*ho*wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col3d<S: Scalar>(
    xf: &[S],
    (cin, d, h, w): (usize, usize, usize, usize),
    n: usize,
    (kd, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (do_, ho, wo): (usize, usize, usize),
) -> Array2<S> {
    let mut cols = Array2::<S>::zeros((cin * kd * kh * kw, do_ * ho * wo));
    let cf = cols.as_slice_mut().expect("freshly allocated matrix is contiguous");
    for c in 0..cin {
        for kz in 0..kd {
            let (oz_lo, oz_hi) = out_range(d, kz, stride, pad, do_);
            for ki in 0..kh {
                let (oy_lo, oy_hi) = out_range(h, ki, stride, pad, ho);
                for kj in 0..kw {
                    let (ox_lo, ox_hi) = out_range(w, kj, stride, pad, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let row_base = (((c * kd + kz) * kh + ki) * kw + kj) * (do_ * ho * wo);
                    for oz in oz_lo..oz_hi {
                        let iz = (oz * stride + kz) - pad;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride + ki) - pad;
                            let src = (((n * cin + c) * d + iz) * h + iy) * w;
                            let dst = row_base + (oz * ho + oy) * wo;
                            if stride == 1 {
                                let ix0 = (ox_lo + kj) - pad;
                                cf[dst + ox_lo..dst + ox_hi].copy_from_slice(
                                    &xf[src + ix0..src + ix0 + (ox_hi - ox_lo)],
                                );
                            } else {
                                let mut ix = (ox_lo * stride + kj) - pad;
                                for o in ox_lo..ox_hi {
                                    cf[dst + o] = xf[src + ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto one 3D input sample.
#[allow(clippy::too_many_arguments)]
fn col2im3d<S: Scalar>(
    dxf: &mut [S],
    (cin, d, h, w): (usize, usize, usize, usize),
    dcols: &Array2<S>,
    n: usize,
    (kd, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (do_, ho, wo): (usize, usize, usize),
) {
    let dcf = dcols.as_slice().expect("gemm result is contiguous");
    for c in 0..cin {
        for kz in 0..kd {
            let (oz_lo, oz_hi) = out_range(d, kz, stride, pad, do_);
            for ki in 0..kh {
                let (oy_lo, oy_hi) = out_range(h, ki, stride, pad, ho);
                for kj in 0..kw {
                    let (ox_lo, ox_hi) = out_range(w, kj, stride, pad, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let row_base = (((c * kd + kz) * kh + ki) * kw + kj) * (do_ * ho * wo);
                    for oz in oz_lo..oz_hi {
                        let iz = (oz * stride + kz) - pad;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride + ki) - pad;
                            let src = (((n * cin + c) * d + iz) * h + iy) * w;
                            let dst = row_base + (oz * ho + oy) * wo;
                            if stride == 1 {
                                let ix0 = (ox_lo + kj) - pad;
                                let run = ox_hi - ox_lo;
                                for (dv, &v) in dxf[src + ix0..src + ix0 + run]
                                    .iter_mut()
                                    .zip(&dcf[dst + ox_lo..dst + ox_hi])
                                {
                                    *dv += v;
                                }
                            } else {
                                let mut ix = (ox_lo * stride + kj) - pad;
                                for o in ox_lo..ox_hi {
                                    dxf[src + ix] += dcf[dst + o];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3D cross-correlation via im2col and matrix multiplication.
///
/// `x`: `[n, cin, d, h, w]`, `w`: `[cout, cin, kd, kh, kw]`.
pub fn conv3d_forward<S: Scalar>(
    x: &ArrayViewD<'_, S>,
    w: &ArrayViewD<'_, S>,
    bias: Option<&ArrayViewD<'_, S>>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<S>, AutodiffError> {
    expect_rank(x, 5, "conv3d input")?;
    expect_rank(w, 5, "conv3d kernel")?;
    let (n, cout, do_, ho, wo) = conv3d_shape(x.shape(), w.shape(), stride, pad)?;
    let (cin, d, h, wid) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (kd, kh, kw) = (w.shape()[2], w.shape()[3], w.shape()[4]);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(AutodiffError::Shape(format!(
                "conv3d bias length {} != output channels {cout}",
                b.len()
            )));
        }
    }
    let wmat = w
        .to_shape((cout, w.len() / cout))
        .map_err(|e| AutodiffError::Shape(e.to_string()))?
        .to_owned();
    let xstd = standard(x);
    let xf = xstd.as_slice().expect("standardised input is contiguous");
    let sp = do_ * ho * wo;
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, cout, do_, ho, wo]));
    {
        let of = out.as_slice_mut().expect("freshly allocated output is contiguous");
        for s in 0..n {
            let cols = im2col3d(xf, (cin, d, h, wid), s, (kd, kh, kw), stride, pad, (do_, ho, wo));
            let prod = wmat.dot(&cols);
            of[s * cout * sp..(s + 1) * cout * sp]
                .copy_from_slice(prod.as_slice().expect("gemm result is contiguous"));
        }
        if let Some(b) = bias {
            for s in 0..n {
                for c in 0..cout {
                    let bv = b[[c]];
                    let base = (s * cout + c) * sp;
                    for v in &mut of[base..base + sp] {
                        *v += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`].
pub fn conv3d_backward<S: Scalar>(
    x: &ArrayViewD<'_, S>,
    w: &ArrayViewD<'_, S>,
    dout: &ArrayViewD<'_, S>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<(Option<ArrayD<S>>, ArrayD<S>, ArrayD<S>), AutodiffError> {
    let (n, cout, do_, ho, wo) = conv3d_shape(x.shape(), w.shape(), stride, pad)?;
    let (cin, d, h, wid) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (kd, kh, kw) = (w.shape()[2], w.shape()[3], w.shape()[4]);
    let k = w.len() / cout;
    let wmat = w
        .to_shape((cout, k))
        .map_err(|e| AutodiffError::Shape(e.to_string()))?
        .to_owned();
    let xstd = standard(x);
    let xf = xstd.as_slice().expect("standardised input is contiguous");
    let dstd = standard(dout);
    let df = dstd.as_slice().expect("standardised gradient is contiguous");
    let sp = do_ * ho * wo;
    let mut dwmat = Array2::<S>::zeros((cout, k));
    let mut dbias = ArrayD::<S>::zeros(IxDyn(&[cout]));
    let mut dx = want_dx.then(|| ArrayD::<S>::zeros(x.raw_dim()));
    let mut dxf = dx
        .as_mut()
        .map(|dv| dv.as_slice_mut().expect("freshly allocated gradient is contiguous"));
    {
        let dbf = dbias.as_slice_mut().expect("freshly allocated bias gradient is contiguous");
        for s in 0..n {
            let sample = &df[s * cout * sp..(s + 1) * cout * sp];
            let dg = ArrayView2::from_shape((cout, sp), sample)
                .expect("sample gradient block matches [cout, do*ho*wo]");
            for c in 0..cout {
                let mut acc = S::ZERO;
                for &g in &sample[c * sp..(c + 1) * sp] {
                    acc += g;
                }
                dbf[c] += acc;
            }
            let cols = im2col3d(xf, (cin, d, h, wid), s, (kd, kh, kw), stride, pad, (do_, ho, wo));
            general_mat_mul(S::ONE, &dg, &cols.t(), S::ONE, &mut dwmat);
            if let Some(dxf) = dxf.as_mut() {
                let dcols = wmat.t().dot(&dg);
                col2im3d(dxf, (cin, d, h, wid), &dcols, s, (kd, kh, kw), stride, pad, (do_, ho, wo));
            }
        }
    }
    let dw = dwmat
        .into_shape(IxDyn(w.shape()))
        .map_err(|e| AutodiffError::Shape(e.to_string()))?;
    Ok((dx, dw, dbias))
}

/// Plain loop-nest 3D cross-correlation used as a reference oracle.
pub fn conv3d_direct<S: Scalar>(
    x: &ArrayViewD<'_, S>,
    w: &ArrayViewD<'_, S>,
    bias: Option<&ArrayViewD<'_, S>>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<S>, AutodiffError> {
    expect_rank(x, 5, "conv3d input")?;
    expect_rank(w, 5, "conv3d kernel")?;
    let (n, cout, do_, ho, wo) = conv3d_shape(x.shape(), w.shape(), stride, pad)?;
    let (cin, d, h, wid) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (kd, kh, kw) = (w.shape()[2], w.shape()[3], w.shape()[4]);
    let mut out = ArrayD::<S>::zeros(IxDyn(&[n, cout, do_, ho, wo]));
    for s in 0..n {
        for c in 0..cout {
            for oz in 0..do_ {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(S::ZERO, |b| b[[c]]);
                        for ci in 0..cin {
                            for kz in 0..kd {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let ix = (ox * stride + kj) as isize - pad as isize;
                                        if ix < 0 || ix >= wid as isize {
                                            continue;
                                        }
                                        acc += x[[s, ci, iz as usize, iy as usize, ix as usize]]
                                            * w[[c, ci, kz, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[s, c, oz, oy, ox]] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}
