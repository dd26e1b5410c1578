"""
Raw cross-correlation kernels on float64 ndarrays.

Two interchangeable implementations: explicit loops compiled with numba, and
a vectorised numpy path built on ``sliding_window_view``.  The active one is
picked from ``METAKERNEL_BACKEND`` at import and can be swapped with
:func:`set_backend`.  Both accumulate in a fixed order, so repeated calls on
identical inputs are bit-identical.

Layouts: features are (B, C, H, W); dense kernels (F, C, kh, kw); depthwise
kernels (C, 1, kh, kw).  No kernel flip.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, requested_backend


def output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    B, C, H, W = x.shape
    out = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    out[:, :, ph:ph + H, pw:pw + W] = x
    return out


# ---------------------------------------------------------------------------
# numba loops
#
# Inputs are pre-padded and split into stride phases laid out as
# ph[b, c, pi, r, pj * wh + t] = xp[b, c, r * s + pi, t * s + pj], so window
# tap (i, j) of output (oh, ow) reads row ph[b, c, pi_tab[i], oh + ri_tab[i]] at
# column (j % s) * wh + j // s + ow and the innermost loop is contiguous for
# any stride.  Every output accumulates its taps in row-major window order.

def _phases(xp, s):
    B, C, hp, wp = xp.shape
    if s == 1:
        return xp.reshape(B, C, 1, hp, wp)
    hh, wh = -(-hp // s), -(-wp // s)
    full = np.zeros((B, C, hh * s, wh * s))
    full[:, :, :hp, :wp] = xp
    ph = full.reshape(B, C, hh, s, wh, s).transpose(0, 1, 3, 2, 5, 4)
    return np.ascontiguousarray(ph).reshape(B, C, s, hh, s * wh)


def _unphase(gph, s, hp, wp):
    B, C = gph.shape[0], gph.shape[1]
    if s == 1:
        return gph.reshape(B, C, hp, wp)
    hh, wh = gph.shape[3], gph.shape[4] // s
    full = gph.reshape(B, C, s, hh, s, wh).transpose(0, 1, 3, 2, 5, 4).reshape(B, C, hh * s, wh * s)
    return np.ascontiguousarray(full[:, :, :hp, :wp])


@njit
def _tap_tables(s, kh, kw, wh):
    qtab = np.empty(kw, dtype=np.int64)
    for j in range(kw):
        qtab[j] = (j % s) * wh + j // s
    pi_tab = np.empty(kh, dtype=np.int64)
    ri_tab = np.empty(kh, dtype=np.int64)
    for i in range(kh):
        pi_tab[i] = i % s
        ri_tab[i] = i // s
    return qtab, pi_tab, ri_tab


@njit
def _nb_conv_fwd(ph, k, s, ho, wo):
    B, C, wh = ph.shape[0], ph.shape[1], ph.shape[4] // s
    F, kh, kw = k.shape[0], k.shape[2], k.shape[3]
    qtab, pi_tab, ri_tab = _tap_tables(s, kh, kw, wh)
    y = np.zeros((B, F, ho, wo))
    for b in range(B):
        for f in range(F):
            for oh in range(ho):
                yrow = y[b, f, oh]
                for c in range(C):
                    for i in range(kh):
                        xrow = ph[b, c, pi_tab[i], oh + ri_tab[i]]
                        for j in range(kw):
                            kv = k[f, c, i, j]
                            xs = xrow[qtab[j]:qtab[j] + wo]
                            for ow in range(wo):
                                yrow[ow] += kv * xs[ow]
    return y


@njit
def _nb_conv_bwd_input(gy, k, s, hh, wh):
    B, F, ho, wo = gy.shape
    C, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    qtab, pi_tab, ri_tab = _tap_tables(s, kh, kw, wh)
    gph = np.zeros((B, C, s, hh, s * wh))
    for b in range(B):
        for f in range(F):
            for oh in range(ho):
                grow = gy[b, f, oh]
                for c in range(C):
                    for i in range(kh):
                        xrow = gph[b, c, pi_tab[i], oh + ri_tab[i]]
                        for j in range(kw):
                            kv = k[f, c, i, j]
                            xs = xrow[qtab[j]:qtab[j] + wo]
                            for ow in range(wo):
                                xs[ow] += kv * grow[ow]
    return gph


@njit
def _nb_conv_bwd_kernel(gy, ph, s, kh, kw):
    B, F, ho, wo = gy.shape
    C, wh = ph.shape[1], ph.shape[4] // s
    qtab, pi_tab, ri_tab = _tap_tables(s, kh, kw, wh)
    part = np.zeros((F, C, kh, kw, wo))
    for b in range(B):
        for f in range(F):
            for oh in range(ho):
                grow = gy[b, f, oh]
                for c in range(C):
                    for i in range(kh):
                        xrow = ph[b, c, pi_tab[i], oh + ri_tab[i]]
                        for j in range(kw):
                            xs = xrow[qtab[j]:qtab[j] + wo]
                            prow = part[f, c, i, j]
                            for ow in range(wo):
                                prow[ow] += grow[ow] * xs[ow]
    gk = np.zeros((F, C, kh, kw))
    for f in range(F):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for ow in range(wo):
                        acc += part[f, c, i, j, ow]
                    gk[f, c, i, j] = acc
    return gk


@njit
def _nb_dw_fwd(ph, k, s, ho, wo):
    B, C, wh = ph.shape[0], ph.shape[1], ph.shape[4] // s
    kh, kw = k.shape[2], k.shape[3]
    qtab, pi_tab, ri_tab = _tap_tables(s, kh, kw, wh)
    y = np.zeros((B, C, ho, wo))
    for b in range(B):
        for c in range(C):
            for oh in range(ho):
                yrow = y[b, c, oh]
                for i in range(kh):
                    xrow = ph[b, c, pi_tab[i], oh + ri_tab[i]]
                    for j in range(kw):
                        kv = k[c, 0, i, j]
                        if kv == 0.0:
                            continue
                        xs = xrow[qtab[j]:qtab[j] + wo]
                        for ow in range(wo):
                            yrow[ow] += kv * xs[ow]
    return y


@njit
def _nb_dw_bwd_input(gy, k, s, hh, wh):
    B, C, ho, wo = gy.shape
    kh, kw = k.shape[2], k.shape[3]
    qtab, pi_tab, ri_tab = _tap_tables(s, kh, kw, wh)
    gph = np.zeros((B, C, s, hh, s * wh))
    for b in range(B):
        for c in range(C):
            for oh in range(ho):
                grow = gy[b, c, oh]
                for i in range(kh):
                    xrow = gph[b, c, pi_tab[i], oh + ri_tab[i]]
                    for j in range(kw):
                        kv = k[c, 0, i, j]
                        if kv == 0.0:
                            continue
                        xs = xrow[qtab[j]:qtab[j] + wo]
                        for ow in range(wo):
                            xs[ow] += kv * grow[ow]
    return gph


@njit
def _nb_dw_bwd_kernel(gy, ph, s, kh, kw):
    B, C, ho, wo = gy.shape
    wh = ph.shape[4] // s
    qtab, pi_tab, ri_tab = _tap_tables(s, kh, kw, wh)
    part = np.zeros((C, kh, kw, wo))
    for b in range(B):
        for c in range(C):
            for oh in range(ho):
                grow = gy[b, c, oh]
                for i in range(kh):
                    xrow = ph[b, c, pi_tab[i], oh + ri_tab[i]]
                    for j in range(kw):
                        xs = xrow[qtab[j]:qtab[j] + wo]
                        prow = part[c, i, j]
                        for ow in range(wo):
                            prow[ow] += grow[ow] * xs[ow]
    gk = np.zeros((C, 1, kh, kw))
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for ow in range(wo):
                    acc += part[c, i, j, ow]
                gk[c, 0, i, j] = acc
    return gk


def _nb_conv_fwd_w(xp, k, s, ho, wo):
    return _nb_conv_fwd(_phases(xp, s), k, s, ho, wo)


def _nb_conv_bwd_input_w(gy, k, s, hp, wp):
    gph = _nb_conv_bwd_input(gy, k, s, -(-hp // s), -(-wp // s))
    return _unphase(gph, s, hp, wp)


def _nb_conv_bwd_kernel_w(gy, xp, s, kh, kw):
    return _nb_conv_bwd_kernel(gy, _phases(xp, s), s, kh, kw)


def _nb_dw_fwd_w(xp, k, s, ho, wo):
    return _nb_dw_fwd(_phases(xp, s), k, s, ho, wo)


def _nb_dw_bwd_input_w(gy, k, s, hp, wp):
    gph = _nb_dw_bwd_input(gy, k, s, -(-hp // s), -(-wp // s))
    return _unphase(gph, s, hp, wp)


def _nb_dw_bwd_kernel_w(gy, xp, s, kh, kw):
    return _nb_dw_bwd_kernel(gy, _phases(xp, s), s, kh, kw)


# ---------------------------------------------------------------------------
# numpy path

def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _np_conv_fwd(xp, k, stride, ho, wo):
    win = _windows(xp, k.shape[2], k.shape[3], stride)[:, :, :ho, :wo]
    return np.einsum("bchwij,fcij->bfhw", win, k, optimize=True)


def _np_conv_bwd_input(gy, k, stride, hp, wp):
    B, F, ho, wo = gy.shape
    C, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    gxp = np.zeros((B, C, hp, wp))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bfhw,fc->bchw", gy, k[:, :, i, j])
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return gxp


def _np_conv_bwd_kernel(gy, xp, stride, kh, kw):
    ho, wo = gy.shape[2], gy.shape[3]
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    return np.einsum("bchwij,bfhw->fcij", win, gy, optimize=True)


def _np_dw_fwd(xp, k, stride, ho, wo):
    win = _windows(xp, k.shape[2], k.shape[3], stride)[:, :, :ho, :wo]
    return np.einsum("bchwij,cij->bchw", win, k[:, 0], optimize=True)


def _np_dw_bwd_input(gy, k, stride, hp, wp):
    B, C, ho, wo = gy.shape
    kh, kw = k.shape[2], k.shape[3]
    gxp = np.zeros((B, C, hp, wp))
    for i in range(kh):
        for j in range(kw):
            contrib = gy * k[:, 0, i, j][None, :, None, None]
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return gxp


def _np_dw_bwd_kernel(gy, xp, stride, kh, kw):
    ho, wo = gy.shape[2], gy.shape[3]
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    return np.einsum("bchwij,bchw->cij", win, gy, optimize=True)[:, None]


_IMPLS = {
    "numba": (_nb_conv_fwd_w, _nb_conv_bwd_input_w, _nb_conv_bwd_kernel_w,
              _nb_dw_fwd_w, _nb_dw_bwd_input_w, _nb_dw_bwd_kernel_w),
    "numpy": (_np_conv_fwd, _np_conv_bwd_input, _np_conv_bwd_kernel,
              _np_dw_fwd, _np_dw_bwd_input, _np_dw_bwd_kernel),
}

_backend = requested_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Switch implementation at runtime; returns the previous backend name."""
    global _backend
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    previous, _backend = _backend, name
    return previous


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _pointwise(x, k):
    B, C, H, W = x.shape
    y = np.matmul(k[:, :, 0, 0], x.reshape(B, C, H * W))
    return y.reshape(B, k.shape[0], H, W)


def _is_pointwise(k, stride, ph, pw):
    return k.shape[2] == 1 and k.shape[3] == 1 and stride == 1 and ph == 0 and pw == 0


def conv2d_forward(x, k, stride, ph, pw):
    x, k = _f64(x), _f64(k)
    if _is_pointwise(k, stride, ph, pw):
        return _pointwise(x, k)
    ho = output_size(x.shape[2], k.shape[2], stride, ph)
    wo = output_size(x.shape[3], k.shape[3], stride, pw)
    return _IMPLS[_backend][0](_pad(x, ph, pw), k, stride, ho, wo)


def conv2d_backward(gy, x, k, stride, ph, pw):
    """Return (grad_input, grad_kernel)."""
    gy, x, k = _f64(gy), _f64(x), _f64(k)
    if _is_pointwise(k, stride, ph, pw):
        B, F, H, W = gy.shape
        g2 = gy.reshape(B, F, H * W)
        gx = np.matmul(k[:, :, 0, 0].T, g2).reshape(x.shape)
        gk = np.einsum("bfn,bcn->fc", g2, x.reshape(B, x.shape[1], H * W))
        return gx, gk[:, :, None, None]
    impl = _IMPLS[_backend]
    xp = _pad(x, ph, pw)
    gxp = impl[1](gy, k, stride, xp.shape[2], xp.shape[3])
    gk = impl[2](gy, xp, stride, k.shape[2], k.shape[3])
    return gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]].copy(), gk


def depthwise_forward(x, k, stride, ph, pw):
    x, k = _f64(x), _f64(k)
    ho = output_size(x.shape[2], k.shape[2], stride, ph)
    wo = output_size(x.shape[3], k.shape[3], stride, pw)
    return _IMPLS[_backend][3](_pad(x, ph, pw), k, stride, ho, wo)


def depthwise_backward(gy, x, k, stride, ph, pw):
    """Return (grad_input, grad_kernel)."""
    gy, x, k = _f64(gy), _f64(x), _f64(k)
    impl = _IMPLS[_backend]
    xp = _pad(x, ph, pw)
    gxp = impl[4](gy, k, stride, xp.shape[2], xp.shape[3])
    gk = impl[5](gy, xp, stride, k.shape[2], k.shape[3])
    return gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]].copy(), gk
