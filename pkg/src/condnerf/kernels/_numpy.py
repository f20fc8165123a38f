"""Vectorized numpy versions of the hot kernels (fallback backend)."""

import numpy as np


def composite_forward(sigma, rgb, delta):
    """Alpha-composite along the last sample axis.

    Args:
        sigma: (R, S) nonnegative densities.
        rgb: (R, S, 3) sample colors.
        delta: (R, S) segment lengths.

    Returns:
        color (R, 3), final transmittance (R,), weights (R, S).
    """
    keep = np.exp(-sigma * delta)
    alpha = 1 - keep
    trans_incl = np.cumprod(keep, axis=1)
    trans = np.empty_like(trans_incl)
    trans[:, 0] = 1
    trans[:, 1:] = trans_incl[:, :-1]
    weights = trans * alpha
    color = np.einsum("rs,rsc->rc", weights, rgb)
    return color, trans_incl[:, -1].copy(), weights


def composite_backward(sigma, rgb, delta, weights, t_final, g_color, g_tfinal):
    keep = np.exp(-sigma * delta)
    trans_next = np.cumprod(keep, axis=1)
    gc = np.einsum("rc,rsc->rs", g_color, rgb)
    wgc = weights * gc
    suffix = np.cumsum(wgc[:, ::-1], axis=1)[:, ::-1]
    after = np.zeros_like(suffix)
    after[:, :-1] = suffix[:, 1:]
    g_s = trans_next * gc - after - (t_final * g_tfinal)[:, None]
    g_sigma = g_s * delta
    g_rgb = weights[:, :, None] * g_color[:, None, :]
    return g_sigma, g_rgb


def sample_pdf(edges, weights, u):
    """Inverse-transform sampling from piecewise-constant densities.

    Args:
        edges: (R, S+1) ascending bin edges.
        weights: (R, S) nonnegative bin masses; each row must have positive sum.
        u: (R, n) uniforms in [0, 1).

    Returns:
        (R, n) samples.
    """
    R, S = weights.shape
    w = weights.astype(np.float64)
    cdf = np.cumsum(w, axis=1)
    total = cdf[:, -1:]
    cdf = cdf / total
    offs = np.arange(R, dtype=np.float64)[:, None]
    flat = (cdf + 2 * offs).ravel()
    idx = np.searchsorted(flat, (u + 2 * offs).ravel(), side="right").reshape(u.shape)
    idx = idx - (S * np.arange(R))[:, None]
    idx = np.clip(idx, 0, S - 1)
    cdf_lo = np.take_along_axis(np.concatenate([np.zeros((R, 1)), cdf], axis=1), idx, axis=1)
    mass = np.take_along_axis(w / total, idx, axis=1)
    lo = np.take_along_axis(edges, idx, axis=1)
    hi = np.take_along_axis(edges, idx + 1, axis=1)
    frac = np.clip((u - cdf_lo) / mass, 0.0, 1.0)
    return (lo + frac * (hi - lo)).astype(edges.dtype, copy=False)


def bilinear_sample(image, x, y):
    """Sample an (H, W, C) image at column ``x`` / row ``y``; coordinates are clamped."""
    H, W, _ = image.shape
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None].astype(image.dtype)
    fy = (y - y0)[:, None].astype(image.dtype)
    top = image[y0, x0] + fx * (image[y0, x1] - image[y0, x0])
    bottom = image[y1, x0] + fx * (image[y1, x1] - image[y1, x0])
    return top + fy * (bottom - top)


def im2col(x, kh, kw, stride, pad):
    """(B, H, W, C) -> (B*Ho*Wo, kh*kw*C) patch rows ordered (kh, kw, C)."""
    from numpy.lib.stride_tricks import sliding_window_view

    B, H, W, C = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


def col2im(cols, B, H, W, C, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to (B, H, W, C)."""
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    g = cols.reshape(B, Ho, Wo, kh, kw, C)
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += g[:, :, :, i, j, :]
    return xp[:, pad : pad + H, pad : pad + W, :]
