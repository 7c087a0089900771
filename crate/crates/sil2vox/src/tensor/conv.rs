//! 3D convolution and transposed convolution kernels.
//!
//! Public layout contract (row-major):
//! - activations `[C, D, H, W]`
//! - convolution weights `[C_out, C_in, k, k, k]`
//! - transposed-convolution weights `[C_in, C_out, k, k, k]`
//! - bias `[C_out]`
//!
//! Convolution is cross-correlation: no kernel flip. With that convention a
//! convolution weight buffer reinterpreted under the transposed layout gives
//! the exact adjoint map, which the gradient kernels rely on.
//!
//! Internally both activations and weights are repacked channels-last so the
//! innermost loops run over contiguous channel vectors; `conv3d_reference`
//! and `conv_transpose3d_reference` evaluate the defining sums directly and
//! exist to cross-check the packed path.

use super::{Result, Scalar, TensorError};

/// Output extent of a strided convolution along one axis.
pub fn conv_out_extent(d: usize, k: usize, stride: usize, padding: usize) -> usize {
    (d + 2 * padding - k) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out_extent(
    d: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> usize {
    (d - 1) * stride + k + output_padding - 2 * padding
}

/// Resolved geometry for one convolution or transposed-convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub d_in: [usize; 3],
    pub d_out: [usize; 3],
}

impl ConvDims {
    pub fn conv(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let op = "conv3d";
        let (c_in, d_in) = split_activation(op, x_shape)?;
        let (c_out, w_cin, k) = split_weight(op, w_shape)?;
        if w_cin != c_in {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("input has {c_in} channels, weight expects {w_cin}"),
            });
        }
        if stride == 0 || k == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                details: format!("stride {stride} and kernel {k} must be positive"),
            });
        }
        let mut d_out = [0usize; 3];
        for a in 0..3 {
            if d_in[a] + 2 * padding < k {
                return Err(TensorError::InvalidArgument {
                    op,
                    details: format!(
                        "extent {} with padding {padding} is smaller than kernel {k}",
                        d_in[a]
                    ),
                });
            }
            d_out[a] = conv_out_extent(d_in[a], k, stride, padding);
        }
        Ok(ConvDims { c_in, c_out, k, stride, padding, output_padding: 0, d_in, d_out })
    }

    pub fn conv_transpose(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let op = "conv_transpose3d";
        let (c_in, d_in) = split_activation(op, x_shape)?;
        let (w_cin, c_out, k) = split_weight(op, w_shape)?;
        if w_cin != c_in {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("input has {c_in} channels, weight expects {w_cin}"),
            });
        }
        if stride == 0 || k == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                details: format!("stride {stride} and kernel {k} must be positive"),
            });
        }
        if output_padding >= stride {
            return Err(TensorError::InvalidArgument {
                op,
                details: format!("output_padding {output_padding} must be < stride {stride}"),
            });
        }
        let mut d_out = [0usize; 3];
        for a in 0..3 {
            let full = (d_in[a] - 1) * stride + k + output_padding;
            if full < 2 * padding + 1 {
                return Err(TensorError::InvalidArgument {
                    op,
                    details: format!("padding {padding} leaves no output for extent {}", d_in[a]),
                });
            }
            d_out[a] = full - 2 * padding;
        }
        Ok(ConvDims { c_in, c_out, k, stride, padding, output_padding, d_in, d_out })
    }

    pub fn in_spatial(&self) -> usize {
        self.d_in.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.d_out.iter().product()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.d_out[0], self.d_out[1], self.d_out[2]]
    }
}

fn split_activation(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match shape {
        &[c, d, h, w] if c * d * h * w > 0 => Ok((c, [d, h, w])),
        _ => Err(TensorError::ShapeMismatch {
            op,
            details: format!("activation must be non-empty [C, D, H, W], got {shape:?}"),
        }),
    }
}

fn split_weight(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[a, b, k0, k1, k2] if k0 == k1 && k1 == k2 && a * b * k0 > 0 => Ok((a, b, k0)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            details: format!("weight must be non-empty with a cubic kernel, got {shape:?}"),
        }),
    }
}

/// Gradients returned by the convolution backward kernels. `gx` and `gw`
/// are only produced on request so dead branches cost nothing.
pub struct ConvGrads<T> {
    pub gx: Option<Vec<T>>,
    pub gw: Option<Vec<T>>,
    pub gb: Vec<T>,
}

/// Dot product with a fixed 32-lane reduction tree. The explicit partial
/// accumulators vectorize without reassociating the sum order per call, and
/// 32 lanes give the compiler four independent vector accumulators so the
/// loop is not serialized on a single fused-multiply-add chain.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 32];
    for (ca, cb) in a.chunks_exact(32).zip(b.chunks_exact(32)) {
        for l in 0..32 {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    let ra = a.chunks_exact(32).remainder();
    let rb = b.chunks_exact(32).remainder();
    let mut tail8 = [T::zero(); 8];
    for (ca, cb) in ra.chunks_exact(8).zip(rb.chunks_exact(8)) {
        for l in 0..8 {
            tail8[l] = ca[l].mul_add(cb[l], tail8[l]);
        }
    }
    let mut tail = T::zero();
    for (&ai, &bi) in ra.chunks_exact(8).remainder().iter().zip(rb.chunks_exact(8).remainder()) {
        tail = ai.mul_add(bi, tail);
    }
    let mut lanes = [T::zero(); 8];
    for (l, v) in lanes.iter_mut().enumerate() {
        *v = ((acc[l] + acc[l + 16]) + (acc[l + 8] + acc[l + 24])) + tail8[l];
    }
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
        + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(xi, *yi);
    }
}

/// `[c][s]` row-major to `[s][c]`.
fn to_channels_last<T: Scalar>(x: &[T], c: usize, s: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), c * s);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let row = &x[ci * s..(ci + 1) * s];
        for (si, &v) in row.iter().enumerate() {
            out[si * c + ci] = v;
        }
    }
    out
}

/// `[s][c]` back to `[c][s]` row-major.
fn from_channels_last<T: Scalar>(xt: &[T], c: usize, s: usize) -> Vec<T> {
    debug_assert_eq!(xt.len(), c * s);
    let mut out = vec![T::zero(); xt.len()];
    for si in 0..s {
        let row = &xt[si * c..(si + 1) * c];
        for (ci, &v) in row.iter().enumerate() {
            out[ci * s + si] = v;
        }
    }
    out
}

/// Block width for the weight-repack transposes. Keeps reads line-sized and
/// the active write window cache-resident on the large-channel layers.
const PACK_BLOCK: usize = 32;

/// Conv weight `[oc][ic][t]` to `[t][ic][oc]` with `t = k^3` taps, so the
/// kernels can run contiguous channel rows of length `c_out`.
fn pack_conv_weight<T: Scalar>(w: &[T], c_out: usize, c_in: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for oc0 in (0..c_out).step_by(PACK_BLOCK) {
        let oc1 = (oc0 + PACK_BLOCK).min(c_out);
        for ic in 0..c_in {
            for oc in oc0..oc1 {
                let src = &w[(oc * c_in + ic) * t..(oc * c_in + ic + 1) * t];
                for (ti, &v) in src.iter().enumerate() {
                    out[(ti * c_in + ic) * c_out + oc] = v;
                }
            }
        }
    }
    out
}

fn unpack_conv_weight<T: Scalar>(wt: &[T], c_out: usize, c_in: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for oc0 in (0..c_out).step_by(PACK_BLOCK) {
        let oc1 = (oc0 + PACK_BLOCK).min(c_out);
        for ic in 0..c_in {
            for oc in oc0..oc1 {
                let dst = &mut out[(oc * c_in + ic) * t..(oc * c_in + ic + 1) * t];
                for (ti, v) in dst.iter_mut().enumerate() {
                    *v = wt[(ti * c_in + ic) * c_out + oc];
                }
            }
        }
    }
    out
}

/// Transposed-conv weight `[ic][oc][t]` to `[t][oc][ic]`, so the kernels can
/// run contiguous channel rows of length `c_in`.
fn pack_deconv_weight<T: Scalar>(w: &[T], c_in: usize, c_out: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for ic0 in (0..c_in).step_by(PACK_BLOCK) {
        let ic1 = (ic0 + PACK_BLOCK).min(c_in);
        for oc in 0..c_out {
            for ic in ic0..ic1 {
                let src = &w[(ic * c_out + oc) * t..(ic * c_out + oc + 1) * t];
                for (ti, &v) in src.iter().enumerate() {
                    out[(ti * c_out + oc) * c_in + ic] = v;
                }
            }
        }
    }
    out
}

fn unpack_deconv_weight<T: Scalar>(wt: &[T], c_in: usize, c_out: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for ic0 in (0..c_in).step_by(PACK_BLOCK) {
        let ic1 = (ic0 + PACK_BLOCK).min(c_in);
        for oc in 0..c_out {
            for ic in ic0..ic1 {
                let dst = &mut out[(ic * c_out + oc) * t..(ic * c_out + oc + 1) * t];
                for (ti, v) in dst.iter_mut().enumerate() {
                    *v = wt[(ti * c_out + oc) * c_in + ic];
                }
            }
        }
    }
    out
}

/// Input spatial index for an output position and kernel tap, or `None`
/// when the tap lands in padding.
#[inline]
fn tap_source(o: usize, kk: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let pos = o * stride + kk;
    if pos < padding {
        return None;
    }
    let i = pos - padding;
    (i < extent).then_some(i)
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], dims: &ConvDims) -> Vec<T> {
    let t = dims.k * dims.k * dims.k;
    let xt = to_channels_last(x, dims.c_in, dims.in_spatial());
    let wt = pack_conv_weight(w, dims.c_out, dims.c_in, t);
    let mut out_t = vec![T::zero(); dims.c_out * dims.out_spatial()];

    let [d, h, wd] = dims.d_in;
    let [od_n, oh_n, ow_n] = dims.d_out;
    let c_in = dims.c_in;
    let c_out = dims.c_out;
    let k = dims.k;

    let mut acc = vec![T::zero(); c_out];
    for od in 0..od_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                acc.copy_from_slice(b);
                for kd in 0..k {
                    let Some(id) = tap_source(od, kd, dims.stride, dims.padding, d) else {
                        continue;
                    };
                    for kh in 0..k {
                        let Some(ih) = tap_source(oh, kh, dims.stride, dims.padding, h) else {
                            continue;
                        };
                        for kw in 0..k {
                            let Some(iw) = tap_source(ow, kw, dims.stride, dims.padding, wd)
                            else {
                                continue;
                            };
                            let s_in = (id * h + ih) * wd + iw;
                            let xrow = &xt[s_in * c_in..(s_in + 1) * c_in];
                            let ti = (kd * k + kh) * k + kw;
                            let wrows = &wt[ti * c_in * c_out..(ti + 1) * c_in * c_out];
                            for (ic, &xv) in xrow.iter().enumerate() {
                                axpy(&mut acc, xv, &wrows[ic * c_out..(ic + 1) * c_out]);
                            }
                        }
                    }
                }
                let s_out = (od * oh_n + oh) * ow_n + ow;
                out_t[s_out * c_out..(s_out + 1) * c_out].copy_from_slice(&acc);
            }
        }
    }
    from_channels_last(&out_t, c_out, dims.out_spatial())
}

pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    dims: &ConvDims,
    need_gx: bool,
    need_gw: bool,
) -> ConvGrads<T> {
    let t = dims.k * dims.k * dims.k;
    let s_in_n = dims.in_spatial();
    let s_out_n = dims.out_spatial();
    let c_in = dims.c_in;
    let c_out = dims.c_out;
    let k = dims.k;

    let gout_t = to_channels_last(gout, c_out, s_out_n);
    let xt = if need_gw { to_channels_last(x, c_in, s_in_n) } else { Vec::new() };
    let wt = if need_gx { pack_conv_weight(w, c_out, c_in, t) } else { Vec::new() };

    let mut gb = vec![T::zero(); c_out];
    for s in 0..s_out_n {
        let grow = &gout_t[s * c_out..(s + 1) * c_out];
        for (g, &v) in gb.iter_mut().zip(grow) {
            *g = *g + v;
        }
    }

    let mut gxt = if need_gx { vec![T::zero(); c_in * s_in_n] } else { Vec::new() };
    let mut gwt = if need_gw { vec![T::zero(); w.len()] } else { Vec::new() };

    let [d, h, wd] = dims.d_in;
    let [od_n, oh_n, ow_n] = dims.d_out;
    for od in 0..od_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let s_out = (od * oh_n + oh) * ow_n + ow;
                let grow = &gout_t[s_out * c_out..(s_out + 1) * c_out];
                for kd in 0..k {
                    let Some(id) = tap_source(od, kd, dims.stride, dims.padding, d) else {
                        continue;
                    };
                    for kh in 0..k {
                        let Some(ih) = tap_source(oh, kh, dims.stride, dims.padding, h) else {
                            continue;
                        };
                        for kw in 0..k {
                            let Some(iw) = tap_source(ow, kw, dims.stride, dims.padding, wd)
                            else {
                                continue;
                            };
                            let s_in = (id * h + ih) * wd + iw;
                            let ti = (kd * k + kh) * k + kw;
                            if need_gw {
                                let xrow = &xt[s_in * c_in..(s_in + 1) * c_in];
                                let gw_t = &mut gwt[ti * c_in * c_out..(ti + 1) * c_in * c_out];
                                for (ic, &xv) in xrow.iter().enumerate() {
                                    axpy(&mut gw_t[ic * c_out..(ic + 1) * c_out], xv, grow);
                                }
                            }
                            if need_gx {
                                let gxrow = &mut gxt[s_in * c_in..(s_in + 1) * c_in];
                                let wrows = &wt[ti * c_in * c_out..(ti + 1) * c_in * c_out];
                                for (ic, g) in gxrow.iter_mut().enumerate() {
                                    *g = *g + dot(&wrows[ic * c_out..(ic + 1) * c_out], grow);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    ConvGrads {
        gx: need_gx.then(|| from_channels_last(&gxt, c_in, s_in_n)),
        gw: need_gw.then(|| unpack_conv_weight(&gwt, c_out, c_in, t)),
        gb,
    }
}

/// Per output index along one axis, the `(tap, input index)` pairs that feed
/// it: all `(kk, i)` with `i * stride + kk - padding == o`. Output cells past
/// the last contributing tap (from `output_padding`) simply get empty lists.
fn gather_pairs(
    d_out: usize,
    d_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<Vec<(usize, usize)>> {
    (0..d_out)
        .map(|o| {
            let pos = o + padding;
            (0..k)
                .filter_map(|kk| {
                    (pos >= kk && (pos - kk) % stride == 0 && (pos - kk) / stride < d_in)
                        .then(|| (kk, (pos - kk) / stride))
                })
                .collect()
        })
        .collect()
}

pub fn conv_transpose3d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], dims: &ConvDims) -> Vec<T> {
    let t = dims.k * dims.k * dims.k;
    let c_in = dims.c_in;
    let c_out = dims.c_out;
    let k = dims.k;
    let s_out_n = dims.out_spatial();

    let xt = to_channels_last(x, c_in, dims.in_spatial());
    let wt = pack_deconv_weight(w, c_in, c_out, t);

    let [id_n, ih_n, iw_n] = dims.d_in;
    let [od_n, oh_n, ow_n] = dims.d_out;
    let pairs_d = gather_pairs(od_n, id_n, k, dims.stride, dims.padding);
    let pairs_h = gather_pairs(oh_n, ih_n, k, dims.stride, dims.padding);
    let pairs_w = gather_pairs(ow_n, iw_n, k, dims.stride, dims.padding);

    let mut out_t = vec![T::zero(); c_out * s_out_n];
    let mut acc = vec![T::zero(); c_out];
    for od in 0..od_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                acc.copy_from_slice(b);
                for &(kd, id) in &pairs_d[od] {
                    for &(kh, ih) in &pairs_h[oh] {
                        for &(kw, iw) in &pairs_w[ow] {
                            let s_in = (id * ih_n + ih) * iw_n + iw;
                            let xrow = &xt[s_in * c_in..(s_in + 1) * c_in];
                            let ti = (kd * k + kh) * k + kw;
                            let wrows = &wt[ti * c_out * c_in..(ti + 1) * c_out * c_in];
                            for (oc, a) in acc.iter_mut().enumerate() {
                                *a = *a + dot(&wrows[oc * c_in..(oc + 1) * c_in], xrow);
                            }
                        }
                    }
                }
                let s_out = (od * oh_n + oh) * ow_n + ow;
                out_t[s_out * c_out..(s_out + 1) * c_out].copy_from_slice(&acc);
            }
        }
    }
    from_channels_last(&out_t, c_out, s_out_n)
}

pub fn conv_transpose3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    dims: &ConvDims,
    need_gx: bool,
    need_gw: bool,
) -> ConvGrads<T> {
    let t = dims.k * dims.k * dims.k;
    let c_in = dims.c_in;
    let c_out = dims.c_out;
    let k = dims.k;
    let s_in_n = dims.in_spatial();
    let s_out_n = dims.out_spatial();

    let gout_t = to_channels_last(gout, c_out, s_out_n);
    let xt = if need_gw { to_channels_last(x, c_in, s_in_n) } else { Vec::new() };
    let wt = if need_gx { pack_deconv_weight(w, c_in, c_out, t) } else { Vec::new() };

    let mut gb = vec![T::zero(); c_out];
    for s in 0..s_out_n {
        let grow = &gout_t[s * c_out..(s + 1) * c_out];
        for (g, &v) in gb.iter_mut().zip(grow) {
            *g = *g + v;
        }
    }

    let mut gxt = if need_gx { vec![T::zero(); c_in * s_in_n] } else { Vec::new() };
    let mut gwt = if need_gw { vec![T::zero(); w.len()] } else { Vec::new() };

    let [id_n, ih_n, iw_n] = dims.d_in;
    let [od_n, oh_n, ow_n] = dims.d_out;
    let pairs_d = gather_pairs(od_n, id_n, k, dims.stride, dims.padding);
    let pairs_h = gather_pairs(oh_n, ih_n, k, dims.stride, dims.padding);
    let pairs_w = gather_pairs(ow_n, iw_n, k, dims.stride, dims.padding);
    for od in 0..od_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let s_out = (od * oh_n + oh) * ow_n + ow;
                let grow = &gout_t[s_out * c_out..(s_out + 1) * c_out];
                for &(kd, id) in &pairs_d[od] {
                    for &(kh, ih) in &pairs_h[oh] {
                        for &(kw, iw) in &pairs_w[ow] {
                            let s_in = (id * ih_n + ih) * iw_n + iw;
                            let ti = (kd * k + kh) * k + kw;
                            if need_gx {
                                let gxrow = &mut gxt[s_in * c_in..(s_in + 1) * c_in];
                                let wrows = &wt[ti * c_out * c_in..(ti + 1) * c_out * c_in];
                                for (oc, &g) in grow.iter().enumerate() {
                                    axpy(gxrow, g, &wrows[oc * c_in..(oc + 1) * c_in]);
                                }
                            }
                            if need_gw {
                                let xrow = &xt[s_in * c_in..(s_in + 1) * c_in];
                                let gw_t = &mut gwt[ti * c_out * c_in..(ti + 1) * c_out * c_in];
                                for (oc, &g) in grow.iter().enumerate() {
                                    axpy(&mut gw_t[oc * c_in..(oc + 1) * c_in], g, xrow);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    ConvGrads {
        gx: need_gx.then(|| from_channels_last(&gxt, c_in, s_in_n)),
        gw: need_gw.then(|| unpack_deconv_weight(&gwt, c_in, c_out, t)),
        gb,
    }
}

/// Direct evaluation of the convolution definition: for every output cell,
/// sum `x[ic, od*s+kd-p, ...] * w[oc, ic, kd, kh, kw]` over taps inside the
/// input. Kept deliberately naive as a cross-check for the packed kernels.
pub fn conv3d_reference<T: Scalar>(x: &[T], w: &[T], b: &[T], dims: &ConvDims) -> Vec<T> {
    let [d, h, wd] = dims.d_in;
    let [od_n, oh_n, ow_n] = dims.d_out;
    let k = dims.k;
    let mut out = vec![T::zero(); dims.c_out * dims.out_spatial()];
    for oc in 0..dims.c_out {
        for od in 0..od_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut acc = b[oc];
                    for ic in 0..dims.c_in {
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let pd = od * dims.stride + kd;
                                    let ph = oh * dims.stride + kh;
                                    let pw = ow * dims.stride + kw;
                                    if pd < dims.padding
                                        || ph < dims.padding
                                        || pw < dims.padding
                                    {
                                        continue;
                                    }
                                    let (id, ih, iw) =
                                        (pd - dims.padding, ph - dims.padding, pw - dims.padding);
                                    if id >= d || ih >= h || iw >= wd {
                                        continue;
                                    }
                                    let xv = x[((ic * d + id) * h + ih) * wd + iw];
                                    let wv = w[(((oc * dims.c_in + ic) * k + kd) * k + kh) * k
                                        + kw];
                                    acc = acc + xv * wv;
                                }
                            }
                        }
                    }
                    out[((oc * od_n + od) * oh_n + oh) * ow_n + ow] = acc;
                }
            }
        }
    }
    out
}

/// Direct evaluation of the transposed-convolution definition: every input
/// cell scatters `x[ic, id, ih, iw] * w[ic, oc, kd, kh, kw]` to output cell
/// `id*s + kd - p` per axis.
pub fn conv_transpose3d_reference<T: Scalar>(x: &[T], w: &[T], b: &[T], dims: &ConvDims) -> Vec<T> {
    let [id_n, ih_n, iw_n] = dims.d_in;
    let [od_n, oh_n, ow_n] = dims.d_out;
    let k = dims.k;
    let mut out = vec![T::zero(); dims.c_out * dims.out_spatial()];
    for oc in 0..dims.c_out {
        for s in 0..dims.out_spatial() {
            out[oc * dims.out_spatial() + s] = b[oc];
        }
    }
    for ic in 0..dims.c_in {
        for id in 0..id_n {
            for ih in 0..ih_n {
                for iw in 0..iw_n {
                    let xv = x[((ic * id_n + id) * ih_n + ih) * iw_n + iw];
                    for oc in 0..dims.c_out {
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let pd = id * dims.stride + kd;
                                    let ph = ih * dims.stride + kh;
                                    let pw = iw * dims.stride + kw;
                                    if pd < dims.padding
                                        || ph < dims.padding
                                        || pw < dims.padding
                                    {
                                        continue;
                                    }
                                    let (od, oh, ow) =
                                        (pd - dims.padding, ph - dims.padding, pw - dims.padding);
                                    if od >= od_n || oh >= oh_n || ow >= ow_n {
                                        continue;
                                    }
                                    let wv = w[(((ic * dims.c_out + oc) * k + kd) * k + kh) * k
                                        + kw];
                                    out[((oc * od_n + od) * oh_n + oh) * ow_n + ow] =
                                        out[((oc * od_n + od) * oh_n + oh) * ow_n + ow]
                                            + xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn extent_formulas_match_network_ladder() {
        // The encoder kernels [4, 2, 2, 2] with stride 2 halve even extents;
        // the decoder kernels [2, 2, 2, 4] double them back.
        assert_eq!(conv_out_extent(32, 4, 2, 1), 16);
        assert_eq!(conv_out_extent(16, 2, 2, 0), 8);
        assert_eq!(conv_out_extent(8, 2, 2, 0), 4);
        assert_eq!(conv_out_extent(4, 2, 2, 0), 2);
        assert_eq!(deconv_out_extent(2, 2, 2, 0, 0), 4);
        assert_eq!(deconv_out_extent(4, 2, 2, 0, 0), 8);
        assert_eq!(deconv_out_extent(8, 2, 2, 0, 0), 16);
        assert_eq!(deconv_out_extent(16, 4, 2, 1, 0), 32);
    }

    #[test]
    fn known_1d_style_case() {
        // Kernel 2, stride 2, no padding on a 2x2x4 volume whose (0,0,:) row
        // is the ramp 1..4. Only weight taps (0,0,0) and (0,0,1) are 1, so
        // the output reduces to sums of adjacent ramp pairs: 3 and 7.
        let dims = ConvDims::conv(&[1, 2, 2, 4], &[1, 1, 2, 2, 2], 2, 0).unwrap();
        assert_eq!(dims.d_out, [1, 1, 2]);
        let mut w = vec![0.0f64; 8];
        w[0] = 1.0; // kd=0, kh=0, kw=0
        w[1] = 1.0; // kd=0, kh=0, kw=1
        let mut x = vec![0.0f64; 16];
        x[0] = 1.0;
        x[1] = 2.0;
        x[2] = 3.0;
        x[3] = 4.0;
        let out = conv3d_forward(&x, &w, &[0.0], &dims);
        assert_eq!(out, vec![3.0, 7.0]);
        let rref = conv3d_reference(&x, &w, &[0.0], &dims);
        assert_eq!(out, rref);
    }

    #[test]
    fn padded_conv_hits_border_correctly() {
        // Kernel 4, stride 2, padding 1 on extent 4: output extent 2 and the
        // first window starts one cell in the padding region.
        let dims = ConvDims::conv(&[1, 4, 4, 4], &[1, 1, 4, 4, 4], 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 64);
        let w = rand_vec(&mut rng, 64);
        let b = vec![0.25];
        let fast = conv3d_forward(&x, &w, &b, &dims);
        let rref = conv3d_reference(&x, &w, &b, &dims);
        assert_eq!(dims.d_out, [2, 2, 2]);
        assert!(max_abs_diff(&fast, &rref) < 1e-12);
    }

    #[test]
    fn packed_matches_reference_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..30 {
            let k = [2, 3, 4][case % 3];
            let stride = 1 + case % 2;
            let padding = case % 2;
            let c_in = 1 + case % 3;
            let c_out = 1 + (case / 3) % 3;
            let d = k + padding + case % 3;
            let x_shape = [c_in, d, d, d];
            let n_x = c_in * d * d * d;
            let x = rand_vec(&mut rng, n_x);
            let b = rand_vec(&mut rng, c_out);

            let wc = rand_vec(&mut rng, c_out * c_in * k * k * k);
            let dims = ConvDims::conv(&x_shape, &[c_out, c_in, k, k, k], stride, padding).unwrap();
            assert!(
                max_abs_diff(
                    &conv3d_forward(&x, &wc, &b, &dims),
                    &conv3d_reference(&x, &wc, &b, &dims)
                ) < 1e-12,
                "conv case {case}"
            );

            let wd = rand_vec(&mut rng, c_in * c_out * k * k * k);
            let op = case % stride;
            let dims =
                ConvDims::conv_transpose(&x_shape, &[c_in, c_out, k, k, k], stride, padding, op)
                    .unwrap();
            assert!(
                max_abs_diff(
                    &conv_transpose3d_forward(&x, &wd, &b, &dims),
                    &conv_transpose3d_reference(&x, &wd, &b, &dims)
                ) < 1e-12,
                "deconv case {case}"
            );
        }
    }

    #[test]
    fn conv_weight_buffer_is_its_own_adjoint() {
        // <conv(x; W), y> == <x, deconv(y; W)> when the same buffer is read
        // under both layout conventions and the deconv undoes the geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(d, k, stride, padding) in &[(4usize, 2usize, 2usize, 0usize), (8, 4, 2, 1)] {
            let (c_in, c_out) = (3, 2);
            let x = rand_vec(&mut rng, c_in * d * d * d);
            let w = rand_vec(&mut rng, c_out * c_in * k * k * k);
            let zero_b_out = vec![0.0; c_out];
            let zero_b_in = vec![0.0; c_in];

            let fwd = ConvDims::conv(&[c_in, d, d, d], &[c_out, c_in, k, k, k], stride, padding)
                .unwrap();
            let y_shape = fwd.out_shape();
            let y = rand_vec(&mut rng, y_shape.iter().product());
            let cx = conv3d_forward(&x, &w, &zero_b_out, &fwd);

            let op = d - deconv_out_extent(fwd.d_out[0], k, stride, padding, 0);
            let bwd = ConvDims::conv_transpose(&y_shape, &[c_out, c_in, k, k, k], stride, padding, op)
                .unwrap();
            let ty = conv_transpose3d_forward(&y, &w, &zero_b_in, &bwd);

            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint identity broke: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn backward_matches_reference_finite_differences() {
        // Spot-check the analytic kernels against central differences of the
        // reference forward, loss = sum(out * q) for a fixed random q.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (c_in, c_out, d, k, stride, padding) = (2, 2, 4, 2, 2, 0);
        let dims = ConvDims::conv(&[c_in, d, d, d], &[c_out, c_in, k, k, k], stride, padding)
            .unwrap();
        let x = rand_vec(&mut rng, c_in * d * d * d);
        let w = rand_vec(&mut rng, c_out * c_in * k * k * k);
        let b = rand_vec(&mut rng, c_out);
        let q = rand_vec(&mut rng, c_out * dims.out_spatial());

        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv3d_reference(x, w, b, &dims).iter().zip(&q).map(|(a, b)| a * b).sum()
        };
        let grads = conv3d_backward(&x, &w, &q, &dims, true, true);

        let h = 1e-5;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            for i in (0..base.len()).step_by(7) {
                let mut p = base.to_vec();
                p[i] += h;
                let up = match which {
                    0 => loss(&p, &w, &b),
                    1 => loss(&x, &p, &b),
                    _ => loss(&x, &w, &p),
                };
                p[i] -= 2.0 * h;
                let dn = match which {
                    0 => loss(&p, &w, &b),
                    1 => loss(&x, &p, &b),
                    _ => loss(&x, &w, &p),
                };
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (analytic[i] - fd).abs() < 1e-6,
                    "grad {which}[{i}]: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        };
        check(grads.gx.as_ref().unwrap(), &x, 0);
        check(grads.gw.as_ref().unwrap(), &w, 1);
        check(&grads.gb, &b, 2);

        let ddims =
            ConvDims::conv_transpose(&[c_in, d, d, d], &[c_in, c_out, k, k, k], stride, padding, 0)
                .unwrap();
        let wt = rand_vec(&mut rng, c_in * c_out * k * k * k);
        let qt = rand_vec(&mut rng, c_out * ddims.out_spatial());
        let tloss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv_transpose3d_reference(x, w, b, &ddims).iter().zip(&qt).map(|(a, b)| a * b).sum()
        };
        let tg = conv_transpose3d_backward(&x, &wt, &qt, &ddims, true, true);
        let tcheck = |analytic: &[f64], base: &[f64], which: usize| {
            for i in (0..base.len()).step_by(7) {
                let mut p = base.to_vec();
                p[i] += h;
                let up = match which {
                    0 => tloss(&p, &wt, &b),
                    1 => tloss(&x, &p, &b),
                    _ => tloss(&x, &wt, &p),
                };
                p[i] -= 2.0 * h;
                let dn = match which {
                    0 => tloss(&p, &wt, &b),
                    1 => tloss(&x, &p, &b),
                    _ => tloss(&x, &wt, &p),
                };
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (analytic[i] - fd).abs() < 1e-6,
                    "deconv grad {which}[{i}]: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        };
        tcheck(tg.gx.as_ref().unwrap(), &x, 0);
        tcheck(tg.gw.as_ref().unwrap(), &wt, 1);
        tcheck(&tg.gb, &b, 2);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvDims::conv(&[1, 2, 2, 2], &[1, 1, 4, 4, 4], 2, 0).is_err());
        assert!(ConvDims::conv(&[2, 4, 4, 4], &[1, 1, 2, 2, 2], 2, 0).is_err());
        assert!(ConvDims::conv(&[1, 4, 4, 4], &[1, 1, 2, 2, 2], 0, 0).is_err());
        assert!(ConvDims::conv_transpose(&[1, 4, 4, 4], &[1, 1, 2, 2, 2], 2, 0, 2).is_err());
        assert!(ConvDims::conv_transpose(&[1, 4, 4, 4], &[2, 1, 2, 2, 2], 2, 0, 0).is_err());
    }
}
