//! Raw convolution kernels shared by the tape's forward and backward passes.
//!
//! Convention: all convolutions are cross-correlations (no kernel flip).
//! `conv_transpose2d` is implemented as the adjoint of `conv2d`, i.e. the
//! input-gradient of the matching convolution, so
//! `<conv2d(x, k), y> == <x, conv_transpose2d(y, k)>` holds up to
//! floating-point rounding whenever the stride divides `in + 2*pad - k`
//! (the shape-consistent case); inner-product tests pin this down.
//!
//! The loops are weight-stationary: the innermost loop walks a contiguous
//! output (or input) row so the compiler can vectorize it. Everything is
//! single-threaded and fully deterministic.

use super::Element;

/// Floor-mode output length of a convolution: `(in + 2*pad - k)/stride + 1`.
pub(crate) fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "convolution kernel extent {k} exceeds padded input {}",
        input + 2 * pad
    );
    (input + 2 * pad - k) / stride + 1
}

/// Output length of a transposed convolution: `(in - 1)*stride - 2*pad + k`.
pub(crate) fn conv_transpose_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    let grown = (input - 1) * stride + k;
    assert!(
        grown > 2 * pad,
        "transposed convolution padding {pad} swallows the whole output (grown extent {grown})"
    );
    grown - 2 * pad
}

/// Half-open range of output positions `o` with `0 <= o*stride + k_off - pad < in_len`.
#[inline]
fn valid_out_range(
    in_len: usize,
    k_off: usize,
    pad: usize,
    stride: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k_off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k_off) / stride + 1).min(out_len);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// `dst[lo..hi] += w * src[offset + i*stride]`, specialised for stride 1.
#[inline]
fn axpy_strided<T: Element>(
    dst: &mut [T],
    src: &[T],
    w: T,
    lo: usize,
    hi: usize,
    src_off: isize,
    stride: usize,
) {
    if lo >= hi {
        return;
    }
    let base = (lo as isize * stride as isize + src_off) as usize;
    if stride == 1 {
        let src = &src[base..base + (hi - lo)];
        for (d, s) in dst[lo..hi].iter_mut().zip(src) {
            *d += w * *s;
        }
    } else {
        for (i, d) in dst[lo..hi].iter_mut().enumerate() {
            *d += w * src[base + i * stride];
        }
    }
}

/// `sum_i dst_row[offset + i*stride] * src[lo..hi][i]` for the kernel-gradient dots.
#[inline]
fn dot_strided<T: Element>(
    a: &[T],
    b: &[T],
    lo: usize,
    hi: usize,
    a_off: isize,
    stride: usize,
) -> T {
    if lo >= hi {
        return T::zero();
    }
    let base = (lo as isize * stride as isize + a_off) as usize;
    let mut acc = T::zero();
    if stride == 1 {
        let a = &a[base..base + (hi - lo)];
        for (x, y) in a.iter().zip(&b[lo..hi]) {
            acc += *x * *y;
        }
    } else {
        for (i, y) in b[lo..hi].iter().enumerate() {
            acc += a[base + i * stride] * *y;
        }
    }
    acc
}

/// 2-D cross-correlation. `x: [b, ci, h, w]`, `k: [co, ci, kh, kw]`,
/// output `[b, co, ho, wo]` (already zeroed by the caller).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    k: &[T],
    y: &mut [T],
    (bs, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    for b in 0..bs {
        for o in 0..co {
            let y_plane = &mut y[(b * co + o) * ho * wo..][..ho * wo];
            for c in 0..ci {
                let x_plane = &x[(b * ci + c) * h * w..][..h * w];
                for khi in 0..kh {
                    let (ho_lo, ho_hi) = valid_out_range(h, khi, pad, stride, ho);
                    for kwi in 0..kw {
                        let wgt = k[((o * ci + c) * kh + khi) * kw + kwi];
                        let (wo_lo, wo_hi) = valid_out_range(w, kwi, pad, stride, wo);
                        for hoi in ho_lo..ho_hi {
                            let ih = hoi * stride + khi - pad;
                            axpy_strided(
                                &mut y_plane[hoi * wo..][..wo],
                                &x_plane[ih * w..][..w],
                                wgt,
                                wo_lo,
                                wo_hi,
                                kwi as isize - pad as isize,
                                stride,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Input gradient of [`conv2d_forward`]: scatters `dy` back through the kernel.
/// `dx` must be zeroed (or hold a previous accumulation) by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input<T: Element>(
    dy: &[T],
    k: &[T],
    dx: &mut [T],
    (bs, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    for b in 0..bs {
        for o in 0..co {
            let dy_plane = &dy[(b * co + o) * ho * wo..][..ho * wo];
            for c in 0..ci {
                let dx_plane = &mut dx[(b * ci + c) * h * w..][..h * w];
                for khi in 0..kh {
                    let (ho_lo, ho_hi) = valid_out_range(h, khi, pad, stride, ho);
                    for kwi in 0..kw {
                        let wgt = k[((o * ci + c) * kh + khi) * kw + kwi];
                        let (wo_lo, wo_hi) = valid_out_range(w, kwi, pad, stride, wo);
                        let off = kwi as isize - pad as isize;
                        for hoi in ho_lo..ho_hi {
                            let ih = hoi * stride + khi - pad;
                            let dx_row = &mut dx_plane[ih * w..][..w];
                            let dy_row = &dy_plane[hoi * wo..][..wo];
                            if wo_lo >= wo_hi {
                                continue;
                            }
                            let base = (wo_lo as isize * stride as isize + off) as usize;
                            if stride == 1 {
                                for (i, g) in dy_row[wo_lo..wo_hi].iter().enumerate() {
                                    dx_row[base + i] += wgt * *g;
                                }
                            } else {
                                for (i, g) in dy_row[wo_lo..wo_hi].iter().enumerate() {
                                    dx_row[base + i * stride] += wgt * *g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Kernel gradient of [`conv2d_forward`]. `dk` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_kernel<T: Element>(
    x: &[T],
    dy: &[T],
    dk: &mut [T],
    (bs, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    for b in 0..bs {
        for o in 0..co {
            let dy_plane = &dy[(b * co + o) * ho * wo..][..ho * wo];
            for c in 0..ci {
                let x_plane = &x[(b * ci + c) * h * w..][..h * w];
                for khi in 0..kh {
                    let (ho_lo, ho_hi) = valid_out_range(h, khi, pad, stride, ho);
                    for kwi in 0..kw {
                        let (wo_lo, wo_hi) = valid_out_range(w, kwi, pad, stride, wo);
                        let off = kwi as isize - pad as isize;
                        let mut acc = T::zero();
                        for hoi in ho_lo..ho_hi {
                            let ih = hoi * stride + khi - pad;
                            acc += dot_strided(
                                &x_plane[ih * w..][..w],
                                &dy_plane[hoi * wo..][..wo],
                                wo_lo,
                                wo_hi,
                                off,
                                stride,
                            );
                        }
                        dk[((o * ci + c) * kh + khi) * kw + kwi] += acc;
                    }
                }
            }
        }
    }
}

/// Transposed 2-D convolution (adjoint of [`conv2d_forward`]).
/// `x: [b, ci, h, w]`, `k: [ci, co, kh, kw]`, output `[b, co, ho, wo]`
/// with `ho = (h-1)*stride - 2*pad + kh`. Output must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    k: &[T],
    y: &mut [T],
    (bs, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    // Identical index algebra to conv2d_backward_input with (x, y) swapped:
    // y[oh, ow] += x[i, j] * k[..] where oh = i*stride + khi - pad.
    for b in 0..bs {
        for c in 0..ci {
            let x_plane = &x[(b * ci + c) * h * w..][..h * w];
            for o in 0..co {
                let y_plane = &mut y[(b * co + o) * ho * wo..][..ho * wo];
                for khi in 0..kh {
                    let (i_lo, i_hi) = valid_out_range(ho, khi, pad, stride, h);
                    for kwi in 0..kw {
                        let wgt = k[((c * co + o) * kh + khi) * kw + kwi];
                        let (j_lo, j_hi) = valid_out_range(wo, kwi, pad, stride, w);
                        let off = kwi as isize - pad as isize;
                        for i in i_lo..i_hi {
                            let oh = i * stride + khi - pad;
                            let y_row = &mut y_plane[oh * wo..][..wo];
                            let x_row = &x_plane[i * w..][..w];
                            if j_lo >= j_hi {
                                continue;
                            }
                            let base = (j_lo as isize * stride as isize + off) as usize;
                            if stride == 1 {
                                for (idx, xv) in x_row[j_lo..j_hi].iter().enumerate() {
                                    y_row[base + idx] += wgt * *xv;
                                }
                            } else {
                                for (idx, xv) in x_row[j_lo..j_hi].iter().enumerate() {
                                    y_row[base + idx * stride] += wgt * *xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Input gradient of [`conv_transpose2d_forward`]: a gather that mirrors the
/// forward scatter. `dx` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward_input<T: Element>(
    dy: &[T],
    k: &[T],
    dx: &mut [T],
    (bs, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    for b in 0..bs {
        for c in 0..ci {
            let dx_plane = &mut dx[(b * ci + c) * h * w..][..h * w];
            for o in 0..co {
                let dy_plane = &dy[(b * co + o) * ho * wo..][..ho * wo];
                for khi in 0..kh {
                    let (i_lo, i_hi) = valid_out_range(ho, khi, pad, stride, h);
                    for kwi in 0..kw {
                        let wgt = k[((c * co + o) * kh + khi) * kw + kwi];
                        let (j_lo, j_hi) = valid_out_range(wo, kwi, pad, stride, w);
                        for i in i_lo..i_hi {
                            let oh = i * stride + khi - pad;
                            axpy_strided(
                                &mut dx_plane[i * w..][..w],
                                &dy_plane[oh * wo..][..wo],
                                wgt,
                                j_lo,
                                j_hi,
                                kwi as isize - pad as isize,
                                stride,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Kernel gradient of [`conv_transpose2d_forward`]. `dk` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward_kernel<T: Element>(
    x: &[T],
    dy: &[T],
    dk: &mut [T],
    (bs, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    for b in 0..bs {
        for c in 0..ci {
            let x_plane = &x[(b * ci + c) * h * w..][..h * w];
            for o in 0..co {
                let dy_plane = &dy[(b * co + o) * ho * wo..][..ho * wo];
                for khi in 0..kh {
                    let (i_lo, i_hi) = valid_out_range(ho, khi, pad, stride, h);
                    for kwi in 0..kw {
                        let (j_lo, j_hi) = valid_out_range(wo, kwi, pad, stride, w);
                        let off = kwi as isize - pad as isize;
                        let mut acc = T::zero();
                        for i in i_lo..i_hi {
                            let oh = i * stride + khi - pad;
                            acc += dot_strided(
                                &dy_plane[oh * wo..][..wo],
                                &x_plane[i * w..][..w],
                                j_lo,
                                j_hi,
                                off,
                                stride,
                            );
                        }
                        dk[((c * co + o) * kh + khi) * kw + kwi] += acc;
                    }
                }
            }
        }
    }
}

/// Grouped 1-D cross-correlation. `x: [b, ci, l]`, `k: [co, ci/groups, kl]`,
/// output `[b, co, lo]` (zeroed by the caller). `groups == ci == co` gives a
/// depthwise convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward<T: Element>(
    x: &[T],
    k: &[T],
    y: &mut [T],
    (bs, ci, l): (usize, usize, usize),
    (co, kl): (usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
    lo: usize,
) {
    let cig = ci / groups;
    let cog = co / groups;
    for b in 0..bs {
        for o in 0..co {
            let g = o / cog;
            let y_row = &mut y[(b * co + o) * lo..][..lo];
            for cg in 0..cig {
                let c = g * cig + cg;
                let x_row = &x[(b * ci + c) * l..][..l];
                for kli in 0..kl {
                    let wgt = k[(o * cig + cg) * kl + kli];
                    let (o_lo, o_hi) = valid_out_range(l, kli, pad, stride, lo);
                    axpy_strided(
                        y_row,
                        x_row,
                        wgt,
                        o_lo,
                        o_hi,
                        kli as isize - pad as isize,
                        stride,
                    );
                }
            }
        }
    }
}

/// Input gradient of [`conv1d_forward`]. `dx` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward_input<T: Element>(
    dy: &[T],
    k: &[T],
    dx: &mut [T],
    (bs, ci, l): (usize, usize, usize),
    (co, kl): (usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
    lo: usize,
) {
    let cig = ci / groups;
    let cog = co / groups;
    for b in 0..bs {
        for o in 0..co {
            let g = o / cog;
            let dy_row = &dy[(b * co + o) * lo..][..lo];
            for cg in 0..cig {
                let c = g * cig + cg;
                let dx_row = &mut dx[(b * ci + c) * l..][..l];
                for kli in 0..kl {
                    let wgt = k[(o * cig + cg) * kl + kli];
                    let (o_lo, o_hi) = valid_out_range(l, kli, pad, stride, lo);
                    if o_lo >= o_hi {
                        continue;
                    }
                    let off = kli as isize - pad as isize;
                    let base = (o_lo as isize * stride as isize + off) as usize;
                    for (i, gv) in dy_row[o_lo..o_hi].iter().enumerate() {
                        dx_row[base + i * stride] += wgt * *gv;
                    }
                }
            }
        }
    }
}

/// Kernel gradient of [`conv1d_forward`]. `dk` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward_kernel<T: Element>(
    x: &[T],
    dy: &[T],
    dk: &mut [T],
    (bs, ci, l): (usize, usize, usize),
    (co, kl): (usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
    lo: usize,
) {
    let cig = ci / groups;
    let cog = co / groups;
    for b in 0..bs {
        for o in 0..co {
            let g = o / cog;
            let dy_row = &dy[(b * co + o) * lo..][..lo];
            for cg in 0..cig {
                let c = g * cig + cg;
                let x_row = &x[(b * ci + c) * l..][..l];
                for kli in 0..kl {
                    let (o_lo, o_hi) = valid_out_range(l, kli, pad, stride, lo);
                    dk[(o * cig + cg) * kl + kli] += dot_strided(
                        x_row,
                        dy_row,
                        o_lo,
                        o_hi,
                        kli as isize - pad as isize,
                        stride,
                    );
                }
            }
        }
    }
}
