"""Fourier features sin/cos(2^k pi p) for positions and view directions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError


@dataclass(frozen=True)
class EncodingConfig:
    position_freqs: int = 10
    direction_freqs: int = 4

    def __post_init__(self):
        if self.position_freqs < 1 or self.direction_freqs < 1:
            raise ContractError("frequency counts must be >= 1")

    @property
    def position_dim(self):
        return 3 * 2 * self.position_freqs

    @property
    def direction_dim(self):
        return 2 * 2 * self.direction_freqs


def encode(p, n_freqs):
    """Encode a scalar into [sin(2^0 pi p), cos(2^0 pi p), ..., cos(2^(L-1) pi p)]."""
    p = float(p)
    if not np.isfinite(p):
        raise NumericError("encode", f"cannot encode non-finite value {p}")
    return encode_array(np.array([p]), n_freqs)


def encode_array(x, n_freqs):
    """Encode each component of ``x`` (..., k) and concatenate per component -> (..., 2Lk).

    Accepts arrays or autodiff tensors; tensors stay on the tape.
    """
    octaves = 2.0 ** np.arange(n_freqs)
    if isinstance(x, ad.Tensor):
        # reduce 2^k p modulo 2 (exact in floating point) so period-2 shifts agree bitwise
        scaled = x.values[..., None] * octaves.astype(x.dtype)
        offset = (scaled - np.mod(scaled, 2.0)).astype(x.dtype)
        arg = (ad.reshape(x, x.shape + (1,)) * octaves.astype(x.dtype) - offset) * x.dtype.type(np.pi)
        pair = ad.concat([ad.reshape(ad.sin(arg), arg.shape + (1,)), ad.reshape(ad.cos(arg), arg.shape + (1,))], axis=-1)
        return ad.reshape(pair, x.shape[:-1] + (x.shape[-1] * 2 * n_freqs,))
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("encode", "cannot encode non-finite input")
    dt = x.dtype if x.dtype.kind == "f" else np.dtype(np.float64)
    arg = (np.mod(x[..., None] * octaves.astype(dt), 2.0) * np.pi).astype(dt, copy=False)
    out = np.empty(arg.shape + (2,), dtype=arg.dtype)
    np.sin(arg, out=out[..., 0])
    np.cos(arg, out=out[..., 1])
    return out.reshape(x.shape[:-1] + (x.shape[-1] * 2 * n_freqs,))


def direction_angles(d):
    """Map unit directions (..., 3) to two components in [-1, 1]: yaw/pi and pitch/(pi/2)."""
    d = np.asarray(d)
    yaw = np.arctan2(d[..., 0], d[..., 2]) / np.pi
    pitch = np.arcsin(np.clip(d[..., 1], -1.0, 1.0)) / (np.pi / 2)
    return np.stack([yaw, pitch], axis=-1)


def encode_positions(x, config, scene_scale=1.0):
    """Positions are divided by ``scene_scale`` so the scene lies in [-1, 1]^3."""
    return encode_array(np.asarray(x) / scene_scale, config.position_freqs)


def encode_directions(d, config):
    return encode_array(direction_angles(d), config.direction_freqs)
