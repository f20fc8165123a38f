"""Pinhole cameras on a hemisphere, patch ray generation and bilinear patch lookup.

Conventions: world y is up, cameras look down their local -z axis, pixel
(col, row) = (x, y) has its center at integer coordinates, and image rows
grow downward. Angles are degrees at the interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, fov_deg=50.0):
        """Square pixels, principal point at the image center, horizontal field of view."""
        f = float(0.5 * width / np.tan(np.radians(fov_deg) / 2))
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


@dataclass(frozen=True)
class Pose:
    radius: float
    theta: float  # yaw, degrees
    phi: float  # pitch, degrees
    shift: float = 0.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractError(f"radius must be positive, got {self.radius}")
        if not -180 <= self.theta <= 180:
            raise ContractError(f"yaw {self.theta} outside [-180, 180]")
        if not 0 <= self.phi <= 90:
            raise ContractError(f"pitch {self.phi} outside [0, 90]")


@dataclass(frozen=True)
class PatchPattern:
    center: tuple  # (x, y) in pixels
    scale: float
    size: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractError("patch scale must be positive")
        if self.size < 2:
            raise ContractError("patch size must be at least 2")

    def coords(self):
        """Pixel coordinates (x, y), each (size, size), row-major."""
        offs = self.scale * (np.arange(self.size) - (self.size - 1) / 2)
        xs = self.center[0] + offs[None, :]
        ys = self.center[1] + offs[:, None]
        return np.broadcast_to(xs, (self.size, self.size)), np.broadcast_to(ys, (self.size, self.size))


@dataclass
class RayBundle:
    origins: np.ndarray  # (..., 3)
    directions: np.ndarray  # (..., 3), unit length
    t_near: float
    t_far: float

    def __post_init__(self):
        if not 0 <= self.t_near < self.t_far:
            raise ContractError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")

    def flatten(self):
        return RayBundle(self.origins.reshape(-1, 3), self.directions.reshape(-1, 3), self.t_near, self.t_far)


def full_image_pattern(intr):
    if intr.width != intr.height:
        raise ContractError("full-image patterns need a square image")
    return PatchPattern(((intr.width - 1) / 2, (intr.height - 1) / 2), 1.0, intr.width)


def pose_to_camera(pose):
    """Camera-to-world rotation (columns: right, up, back) and camera position."""
    if not 0 <= pose.phi <= 90:
        raise ContractError(f"pitch {pose.phi} outside [0, 90]")
    th, ph = np.radians(pose.theta), np.radians(pose.phi)
    position = np.array(
        [pose.radius * np.cos(ph) * np.sin(th) + pose.shift, pose.radius * np.sin(ph), pose.radius * np.cos(ph) * np.cos(th)]
    )
    target = np.array([pose.shift, 0.0, 0.0])
    forward = target - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 1.0, 0.0])
    if np.linalg.norm(right) < 1e-9:
        # looking straight down: world -z becomes "up" on the image
        right = np.cross(forward, [0.0, 0.0, -1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    rotation = np.stack([right, up, -forward], axis=1)
    return rotation, position


def pixel_directions(intr, xs, ys, rotation):
    """World-space unit directions through pixel coordinates."""
    cam = np.stack([(xs - intr.cx) / intr.fx, -(ys - intr.cy) / intr.fy, -np.ones_like(xs, dtype=float)], axis=-1)
    world = cam @ rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def generate_patch_rays(intr, pose, pattern, t_near, t_far):
    if t_near >= t_far:
        raise ContractError(f"t_near {t_near} must be below t_far {t_far}")
    rotation, position = pose_to_camera(pose)
    xs, ys = pattern.coords()
    dirs = pixel_directions(intr, xs, ys, rotation)
    origins = np.broadcast_to(position, dirs.shape).copy()
    return RayBundle(origins, dirs, t_near, t_far)


def extract_patch(image, pattern):
    """Bilinearly sample ``image`` (H, W, C) on the pattern grid; coordinates clamp to the border."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ContractError(f"extract_patch needs a nonempty (H, W, C) image, got {image.shape}")
    xs, ys = pattern.coords()
    out = kernels.bilinear_sample(image, xs.ravel(), ys.ravel())
    return out.reshape(pattern.size, pattern.size, image.shape[2])


@dataclass(frozen=True)
class PosePrior:
    theta: tuple = (-180.0, 180.0)
    phi: tuple = (0.0, 90.0)
    radius: tuple = (4.0, 4.0)
    shift: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("theta", "phi", "radius", "shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"inverted {name} range ({lo}, {hi})")


def sample_pose(prior, rng):
    return Pose(
        radius=float(rng.uniform(*prior.radius)),
        theta=float(rng.uniform(*prior.theta)),
        phi=float(rng.uniform(*prior.phi)),
        shift=float(rng.uniform(*prior.shift)),
    )


def sample_pattern(width, height, size, footprint, rng):
    """Uniform patch scale and center; ``footprint`` bounds the patch span as a fraction of the image."""
    lo, hi = footprint
    if lo > hi:
        raise ContractError(f"inverted footprint range ({lo}, {hi})")
    if not 0 < lo <= 1 or hi > 1:
        raise ContractError("footprint fractions must lie in (0, 1]")
    span = min(width, height) - 1
    scale = float(rng.uniform(lo, hi)) * span / (size - 1)
    half = scale * (size - 1) / 2
    cx = float(rng.uniform(half, width - 1 - half))
    cy = float(rng.uniform(half, height - 1 - half))
    return PatchPattern((cx, cy), scale, size)
