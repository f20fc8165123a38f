"""Ray sampling and differentiable alpha compositing of field samples into pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ContractError
from .field import select_color, select_density
from .geometry import full_image_pattern, generate_patch_rays


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 32
    n_fine: int = 32
    hierarchical: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    bound: float = 1.5  # rays cover [radius - bound, radius + bound]

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ContractError("need at least 2 coarse samples per ray")
        if self.hierarchical and self.n_fine < 1:
            raise ContractError("hierarchical sampling needs n_fine >= 1")

    @property
    def samples_per_ray(self):
        return self.n_coarse + (self.n_fine if self.hierarchical else 0)

    def bounds(self, radius):
        return max(radius - self.bound, 1e-3), radius + self.bound


def stratified_sample(t_near, t_far, n, n_rays, rng):
    """One uniform draw per equal-width bin of [t_near, t_far]; returns (n_rays, n) ascending.

    ``t_near``/``t_far`` may be scalars or (n_rays,) arrays.
    """
    if n < 2:
        raise ContractError(f"stratified sampling needs n >= 2, got {n}")
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))[:, None]
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))[:, None]
    if np.any(t_near >= t_far):
        raise ContractError("t_near must be below t_far")
    width = (t_far - t_near) / n
    u = rng.random((n_rays, n))
    return t_near + (np.arange(n) + u) * width


def bin_edges(t_near, t_far, n, n_rays):
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))[:, None]
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))[:, None]
    return t_near + (t_far - t_near) * np.linspace(0.0, 1.0, n + 1)[None, :]


def hierarchical_resample(edges, weights, n_fine, rng, coarse_t=None):
    """Draw ``n_fine`` samples per ray from the piecewise-constant pdf of ``weights`` over ``edges``.

    Rays whose weights are all zero fall back to stratified samples. When
    ``coarse_t`` is given the result is the sorted union with it.
    """
    edges = np.asarray(edges, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ContractError("pdf weights must be nonnegative")
    R = weights.shape[0]
    u = rng.random((R, n_fine))
    total = weights.sum(axis=1)
    empty = total <= 0
    safe = weights.copy()
    safe[empty] = 1.0
    fine = kernels.sample_pdf(edges, safe, u)
    if np.any(empty):
        fine[empty] = stratified_sample(edges[empty, 0], edges[empty, -1], n_fine, int(empty.sum()), rng)
    if coarse_t is None:
        return np.sort(fine, axis=1)
    return np.sort(np.concatenate([coarse_t, fine], axis=1), axis=1)


def deltas(t, t_far):
    """Distances to the next sample; the last sample extends to ``t_far``."""
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), t.shape[:1])
    return np.concatenate([np.diff(t, axis=1), t_far[:, None] - t[:, -1:]], axis=1)


def composite(sigma, rgb, delta):
    """Discrete volume rendering along the last sample axis.

    Args:
        sigma: (R, S) nonnegative densities (tensor or array).
        rgb: (R, S, 3) colors (tensor or array).
        delta: (R, S) positive segment lengths (array).

    Returns:
        (color (R, 3) tensor, final transmittance (R,) tensor, weights (R, S) array).
    """
    sigma, rgb = ad.as_tensor(sigma), ad.as_tensor(rgb)
    delta = np.asarray(delta, dtype=sigma.dtype)
    if sigma.shape != delta.shape or rgb.shape != sigma.shape + (3,):
        raise ContractError(f"composite: shapes sigma {sigma.shape}, rgb {rgb.shape}, delta {delta.shape}")
    if np.any(sigma.values < 0):
        raise ContractError("composite: negative density")
    if np.any(delta <= 0):
        raise ContractError("composite: nonpositive sample spacing")
    color, t_final, weights = kernels.composite_forward(sigma.values, rgb.values, delta)
    packed = np.concatenate([color, t_final[:, None]], axis=1)

    def bw(g):
        g_sigma, g_rgb = kernels.composite_backward(
            sigma.values, rgb.values, delta, weights, t_final, g[:, :3], g[:, 3]
        )
        return g_sigma, g_rgb

    out = ad.custom_op("composite", [sigma, rgb], packed, bw)
    return out[:, :3], out[:, 3], weights


def _rays_for(intr, poses, patterns, config):
    origins, dirs, near, far = [], [], [], []
    for pose, pattern in zip(poses, patterns):
        tn, tf = config.bounds(pose.radius)
        rays = generate_patch_rays(intr, pose, pattern, tn, tf)
        origins.append(rays.origins.reshape(-1, 3))
        dirs.append(rays.directions.reshape(-1, 3))
        near.append(tn)
        far.append(tf)
    return np.stack(origins), np.stack(dirs), np.array(near), np.array(far)


def render_rays(
    field, origins, directions, t_near, t_far, z_shape, z_app, class_w, style_w, config, rng, fine_field=None,
    return_coarse=False,
):
    """Render (B, R) rays; returns pixel colors (B, R, 3) as a tensor.

    ``class_w``/``style_w`` are (B, slots) selection weights over the density
    and color arrays. With ``return_coarse`` the result is a pair whose second
    item is the coarse-pass render of a separate ``fine_field`` setup (None
    otherwise), so the coarse network can receive a loss of its own.
    """
    B, R, _ = origins.shape
    Sc = config.n_coarse
    near = np.repeat(t_near, R)
    far = np.repeat(t_far, R)
    t = stratified_sample(near, far, Sc, B * R, rng)

    def evaluate(net, t_vals):
        S = t_vals.shape[1]
        pts = origins[:, :, None, :] + t_vals.reshape(B, R, S, 1) * directions[:, :, None, :]
        dirs = np.broadcast_to(directions[:, :, None, :], pts.shape)
        sig_arr, col_arr = net(pts.reshape(B, R * S, 3), dirs.reshape(B, R * S, 3), z_shape, z_app)
        sig = ad.reshape(select_density(sig_arr, class_w), (B * R, S))
        col = ad.reshape(select_color(col_arr, style_w), (B * R, S, 3))
        return sig, col

    sigma, rgb = evaluate(field, t)
    coarse = None
    if config.hierarchical:
        _, _, w = composite(sigma.values, rgb.values, deltas(t, far))
        edges = bin_edges(near, far, Sc, B * R)
        t_fine = hierarchical_resample(edges, w, config.n_fine, rng)
        if fine_field is None:
            sig_f, col_f = evaluate(field, t_fine)
            t_all = np.concatenate([t, t_fine], axis=1)
            order = np.argsort(t_all, axis=1, kind="stable")
            t = np.take_along_axis(t_all, order, axis=1)
            sigma = ad.take_along_axis(ad.concat([sigma, sig_f], axis=1), order, axis=1)
            rgb = ad.take_along_axis(ad.concat([rgb, col_f], axis=1), order[:, :, None], axis=1)
        else:
            if return_coarse:
                coarse = _to_pixels(sigma, rgb, t, far, config, (B, R, 3))
            t = np.sort(np.concatenate([t, t_fine], axis=1), axis=1)
            sigma, rgb = evaluate(fine_field, t)
    pixels = _to_pixels(sigma, rgb, t, far, config, (B, R, 3))
    return (pixels, coarse) if return_coarse else pixels


def _to_pixels(sigma, rgb, t, far, config, shape):
    color, t_final, _ = composite(sigma, rgb, deltas(t, far))
    bg = np.asarray(config.background, dtype=color.dtype)
    return ad.reshape(color + ad.reshape(t_final, (shape[0] * shape[1], 1)) * bg, shape)


def render_patch(
    field, intr, poses, patterns, z_shape, z_app, class_ids, style_ids, config, rng,
    class_mix=None, style_mix=None, fine_field=None, return_coarse=False,
):
    """Render one patch per batch item; returns a (B, K, K, 3) tensor.

    ``class_mix``/``style_mix`` = (other_label, lam) switch the density/color
    selection and the label embedding to convex combinations of two labels. ``return_coarse`` behaves
    as in :func:`render_rays`.
    """
    B = len(poses)
    K = patterns[0].size
    if any(p.size != K for p in patterns):
        raise ContractError("all patterns in a batch must share the patch size")
    zs, za = field.embed_labels(z_shape, z_app, class_ids, style_ids, class_mix, style_mix)
    c = field.config
    cm = class_mix or (None, 0.0)
    sm = style_mix or (None, 0.0)
    class_w = field.slot_weights(class_ids, c.density_slots, *cm)
    style_w = field.slot_weights(style_ids, c.color_slots, *sm)
    origins, dirs, near, far = _rays_for(intr, poses, patterns, config)
    out = render_rays(field, origins, dirs, near, far, zs, za, class_w, style_w, config, rng, fine_field, return_coarse)
    if not return_coarse:
        return ad.reshape(out, (B, K, K, 3))
    pixels, coarse = out
    return ad.reshape(pixels, (B, K, K, 3)), None if coarse is None else ad.reshape(coarse, (B, K, K, 3))


def render_images(
    field, intr, poses, z_shape, z_app, class_ids, style_ids, config, rng,
    class_mix=None, style_mix=None, fine_field=None,
):
    """Render full (n, H, W, 3) images one at a time without recording gradients."""
    pattern = full_image_pattern(intr)
    n = len(poses)

    def per_item(mix):
        if mix is None:
            return [None] * n
        other = np.broadcast_to(np.asarray(mix[0], dtype=np.int64), (n,))
        return [(other[k : k + 1], mix[1]) for k in range(n)]

    cms, sms = per_item(class_mix), per_item(style_mix)
    out = []
    with ad.no_grad():
        for k, pose in enumerate(poses):
            img = render_patch(
                field, intr, [pose], [pattern], np.asarray(z_shape)[k : k + 1], np.asarray(z_app)[k : k + 1],
                np.asarray(class_ids)[k : k + 1], np.asarray(style_ids)[k : k + 1], config, rng,
                cms[k], sms[k], fine_field,
            )
            out.append(img.values[0])
    return np.stack(out)
