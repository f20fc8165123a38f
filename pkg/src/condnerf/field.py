"""Label-conditioned radiance field with per-class density and per-style color outputs."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .encoding import EncodingConfig, encode_directions, encode_positions
from .errors import ContractError
from .nn import Linear, Module


@dataclass(frozen=True)
class FieldConfig:
    n_classes: int = 4
    n_styles: int = 4
    shape_dim: int = 128
    appearance_dim: int = 128
    width: int = 128
    depth: int = 4
    color_width: int = 64
    encoding: EncodingConfig = dc_field(default_factory=EncodingConfig)
    scene_scale: float = 4.0
    label_input: bool = True
    array_output: bool = True
    density_bias: float = 0.0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_styles < 1:
            raise ContractError("label counts must be >= 1")
        if self.depth < 1 or self.width < 1:
            raise ContractError("trunk needs at least one layer of positive width")

    @property
    def density_slots(self):
        return self.n_classes if self.array_output else 1

    @property
    def color_slots(self):
        return self.n_styles if self.array_output else 1


class LabelEmbedding(Module):
    """Per-label vectors multiplied elementwise into the latent codes."""

    def __init__(self, n_classes, n_styles, shape_dim, appearance_dim, rng, noise=0.02):
        self.class_table = ad.Tensor(1 + noise * rng.normal(size=(n_classes, shape_dim)), requires_grad=True)
        self.style_table = ad.Tensor(1 + noise * rng.normal(size=(n_styles, appearance_dim)), requires_grad=True)

    def __call__(self, z_shape, z_app, class_ids, style_ids, class_mix=None, style_mix=None):
        """Embed the codes; ``*_mix = (other_ids, lam)`` blends two table rows as (1 - lam) e[i] + lam e[j]."""
        z_shape, z_app = ad.as_tensor(z_shape), ad.as_tensor(z_app)
        if z_shape.shape[-1] != self.class_table.shape[1] or z_app.shape[-1] != self.style_table.shape[1]:
            raise ContractError("latent dimension does not match the embedding tables")
        return z_shape * _rows(self.class_table, class_ids, class_mix, "class"), \
            z_app * _rows(self.style_table, style_ids, style_mix, "style")


def _rows(table, ids, mix, kind):
    n = table.shape[0]

    def checked(values):
        values = np.asarray(values, dtype=np.int64)
        if values.size and (values.min() < 0 or values.max() >= n):
            raise ContractError(f"{kind} label outside [0, {n})")
        return values

    rows = table[checked(ids)]
    if mix is None or mix[0] is None:
        return rows
    other, lam = mix
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"interpolation coefficient {lam} outside [0, 1]")
    dt = table.dtype.type
    return rows * dt(1.0 - lam) + table[checked(other)] * dt(lam)


class ConditionalField(Module):
    """Shared-weight MLP: density from (position, shape code), color additionally from direction and appearance code."""

    def __init__(self, config, rng):
        c = config
        self.config = c
        self.embedding = LabelEmbedding(c.n_classes, c.n_styles, c.shape_dim, c.appearance_dim, rng)
        pe_dim, de_dim = c.encoding.position_dim, c.encoding.direction_dim
        self.position_in = Linear(pe_dim, c.width, rng)
        self.shape_in = Linear(c.shape_dim, c.width, rng, bias=False, scale=np.sqrt(1.0 / c.shape_dim))
        self.hidden = [Linear(c.width, c.width, rng) for _ in range(c.depth - 1)]
        self.density_out = Linear(c.width, c.density_slots, rng, scale=np.sqrt(1.0 / c.width))
        self.density_out.bias.values[:] = c.density_bias
        self.color_in = Linear(c.width, c.color_width, rng)
        self.direction_in = Linear(de_dim, c.color_width, rng, bias=False)
        self.appearance_in = Linear(c.appearance_dim, c.color_width, rng, bias=False, scale=np.sqrt(1.0 / c.appearance_dim))
        self.color_out = Linear(c.color_width, 3 * c.color_slots, rng, scale=np.sqrt(1.0 / c.color_width))
        self.queries = 0

    def trainable_parameters(self):
        """Parameters that receive gradients under this configuration."""
        skip = set() if self.config.label_input else {id(self.embedding.class_table), id(self.embedding.style_table)}
        return [p for p in self.parameters() if id(p) not in skip]

    def embed_labels(self, z_shape, z_app, class_ids, style_ids, class_mix=None, style_mix=None):
        if not self.config.label_input:
            return ad.as_tensor(z_shape), ad.as_tensor(z_app)
        return self.embedding(z_shape, z_app, class_ids, style_ids, class_mix, style_mix)

    def __call__(self, points, directions, z_shape, z_app):
        """Evaluate the field.

        Args:
            points: (B, P, 3) world positions.
            directions: (B, P, 3) unit view directions.
            z_shape, z_app: (B, dim) label-embedded codes (tensors or arrays).

        Returns:
            density array (B, P, M) >= 0 and color array (B, P, N, 3) in [0, 1].
        """
        points = np.asarray(points)
        B, P, _ = points.shape
        dt = ad.default_dtype()
        z_shape, z_app = ad.as_tensor(z_shape), ad.as_tensor(z_app)
        if z_shape.shape != (B, self.config.shape_dim) or z_app.shape != (B, self.config.appearance_dim):
            raise ContractError("latent codes must be (B, dim) matching the points batch")
        self.queries += B * P
        pe = encode_positions(points.astype(dt, copy=False), self.config.encoding, self.config.scene_scale)
        h = self.position_in(pe) + ad.reshape(self.shape_in(z_shape), (B, 1, -1))
        h = ad.relu(h)
        for layer in self.hidden:
            h = ad.relu(layer(h))
        sigma = ad.softplus(self.density_out(h))
        de = encode_directions(np.asarray(directions, dtype=dt), self.config.encoding)
        hc = self.color_in(h) + ad.matmul(de, self.direction_in.weight) + ad.reshape(self.appearance_in(z_app), (B, 1, -1))
        rgb = ad.sigmoid(self.color_out(ad.relu(hc)))
        return sigma, ad.reshape(rgb, (B, P, self.config.color_slots, 3))

    def slot_weights(self, ids, n_slots, other=None, lam=0.0):
        """One-hot (or two-point convex) selection weights, (B, slots)."""
        ids = np.asarray(ids, dtype=np.int64)
        w = np.zeros((ids.size, n_slots), dtype=ad.default_dtype())
        if n_slots == 1:
            w[:] = 1
            return w
        rows = np.arange(ids.size)
        w[rows, ids] += 1 - lam
        if other is not None:
            w[rows, np.asarray(other, dtype=np.int64)] += lam
        return w


def select_density(sigma_array, weights):
    """Contract the (B, P, M) density array with (B, M) slot weights -> (B, P)."""
    B, M = weights.shape
    return ad.sum(sigma_array * weights.reshape(B, 1, M), axis=-1)


def select_color(color_array, weights):
    """Contract the (B, P, N, 3) color array with (B, N) slot weights -> (B, P, 3)."""
    B, N = weights.shape
    return ad.sum(color_array * weights.reshape(B, 1, N, 1), axis=-2)


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"interpolation coefficient {lam} outside [0, 1]")


def interpolate_color(color_array, i, j, lam):
    """(1 - lam) * c[i] + lam * c[j] over the last-but-one axis."""
    _check_lambda(lam)
    c = np.asarray(color_array)
    if lam == 0.0:
        return c[..., i, :].copy()
    if lam == 1.0:
        return c[..., j, :].copy()
    return (1.0 - lam) * c[..., i, :] + lam * c[..., j, :]


def interpolate_density(sigma_array, i, j, lam):
    _check_lambda(lam)
    s = np.asarray(sigma_array)
    if lam == 0.0:
        return s[..., i].copy()
    if lam == 1.0:
        return s[..., j].copy()
    return (1.0 - lam) * s[..., i] + lam * s[..., j]
