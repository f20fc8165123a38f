"""Procedural posed and labeled image sets: analytic primitives, PPM files and a TSV manifest.

Class ids pick the primitive (0 sphere, 1 box, 2 cylinder, 3 torus) and style
ids its base color (red, green, blue, yellow). Images are shaded with a
headlight and composited over a white background.

On-disk layout::

    root/manifest.tsv     "ctrlnerf-manifest 1" then one row per image:
                          path, class_id, style_id, theta_deg, phi_deg, radius, shift
    root/camera.txt       key=value intrinsics shared by every image
    root/images/*.ppm     binary P6, maxval 255
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .geometry import Intrinsics, Pose, PosePrior, full_image_pattern, generate_patch_rays, sample_pose

MANIFEST_HEADER = "ctrlnerf-manifest 1"
SHAPES = ("sphere", "box", "cylinder", "torus")
STYLE_COLORS = ((0.9, 0.1, 0.1), (0.1, 0.9, 0.1), (0.1, 0.1, 0.9), (0.9, 0.9, 0.1))
STYLE_NAMES = ("red", "green", "blue", "yellow")


class ManifestError(FormatError):
    def __init__(self, path, lineno, message):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    style_id: int
    scale: float = 1.0
    shading: bool = True

    def __post_init__(self):
        if not 0 <= self.class_id < len(SHAPES):
            raise ContractError(f"class id {self.class_id} has no primitive")
        if not 0 <= self.style_id < len(STYLE_COLORS):
            raise ContractError(f"style id {self.style_id} has no color")
        if not 0 < self.scale <= 1:
            raise ContractError("object scale must lie in (0, 1] to fit the unit sphere")

    @property
    def color(self):
        return np.array(STYLE_COLORS[self.style_id])


# ray / primitive intersection ----------------------------------------------


def _hit_sphere(o, d, radius):
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius**2
    disc = b * b - c
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(ok & (t0 > 0), t0, np.where(ok & (t1 > 0), t1, np.inf))
    n = o + np.where(np.isfinite(t), t, 0)[:, None] * d
    return t, n / radius


def _hit_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
    lo = np.nan_to_num(lo, nan=-np.inf)
    hi = np.nan_to_num(hi, nan=np.inf)
    tmin, tmax = lo.max(axis=1), hi.min(axis=1)
    hit = (tmax >= np.maximum(tmin, 0)) & (tmax > 0)
    t = np.where(hit, np.where(tmin > 0, tmin, tmax), np.inf)
    axis = lo.argmax(axis=1)
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_cylinder(o, d, radius, half):
    t = np.full(len(o), np.inf)
    n = np.zeros_like(o)
    A = d[:, 0] ** 2 + d[:, 2] ** 2
    B = o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2]
    C = o[:, 0] ** 2 + o[:, 2] ** 2 - radius**2
    disc = B * B - A * C
    ok = (disc >= 0) & (A > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0))
        for cand in ((-B - sq) / A, (-B + sq) / A):
            y = o[:, 1] + cand * d[:, 1]
            good = ok & (cand > 0) & (np.abs(y) <= half) & (cand < t)
            t = np.where(good, cand, t)
            p = o + np.where(good, cand, 0)[:, None] * d
            side = np.stack([p[:, 0], np.zeros(len(o)), p[:, 2]], axis=1) / radius
            n = np.where(good[:, None], side, n)
        for cap in (half, -half):
            cand = (cap - o[:, 1]) / d[:, 1]
            p = o + np.where(np.isfinite(cand), cand, 0)[:, None] * d
            good = np.isfinite(cand) & (cand > 0) & (p[:, 0] ** 2 + p[:, 2] ** 2 <= radius**2) & (cand < t)
            t = np.where(good, cand, t)
            n = np.where(good[:, None], np.array([0.0, np.sign(cap), 0.0]), n)
    return t, n


def _torus_sdf(p, major, minor):
    q = np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2) - major
    return np.sqrt(q * q + p[:, 1] ** 2) - minor


def _hit_torus(o, d, major, minor, steps=200, tol=1e-6):
    # sphere tracing from the bounding sphere
    bound = major + minor
    t_enter, _ = _hit_sphere(o, d, bound + 1e-3)
    b = np.einsum("ij,ij->i", o, d)
    t = np.where(np.isfinite(t_enter), t_enter, np.inf)
    t_exit = -b + np.sqrt(np.maximum(b * b - (np.einsum("ij,ij->i", o, o) - (bound + 1e-3) ** 2), 0))
    active = np.isfinite(t)
    hit = np.zeros(len(o), dtype=bool)
    for _ in range(steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = o[idx] + t[idx, None] * d[idx]
        dist = _torus_sdf(p, major, minor)
        done = dist < tol
        hit[idx[done]] = True
        t[idx] = t[idx] + np.where(done, 0, dist)
        escaped = t[idx] > t_exit[idx]
        active[idx[done | escaped]] = False
    t = np.where(hit, t, np.inf)
    p = o + np.where(hit, t, 0)[:, None] * d
    ring = np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        center = np.stack([p[:, 0] / ring * major, np.zeros(len(o)), p[:, 2] / ring * major], axis=1)
    n = np.nan_to_num(p - center)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return t, n


def intersect(spec, origins, directions):
    """First positive hit distance (inf on miss) and unit surface normals for each ray."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    s = spec.scale
    shape = SHAPES[spec.class_id]
    if shape == "sphere":
        return _hit_sphere(o, d, s)
    if shape == "box":
        return _hit_box(o, d, 0.55 * s)
    if shape == "cylinder":
        return _hit_cylinder(o, d, 0.6 * s, 0.6 * s)
    return _hit_torus(o, d, 0.65 * s, 0.25 * s)


def raytrace_reference(spec, intr, pose, background=(1.0, 1.0, 1.0)):
    """Render one (H, W, 3) float image of the scene; misses show the background."""
    rays = generate_patch_rays(intr, pose, full_image_pattern(intr), 1e-3, 1e3)
    d = rays.directions.reshape(-1, 3)
    t, n = intersect(spec, rays.origins.reshape(-1, 3), d)
    hit = np.isfinite(t)
    shade = np.clip(np.einsum("ij,ij->i", n, -d), 0, None) if spec.shading else np.ones(len(d))
    rgb = np.where(hit[:, None], spec.color[None, :] * shade[:, None], np.asarray(background)[None, :])
    return rgb.reshape(intr.height, intr.width, 3)


def hit_mask(spec, intr, pose):
    rays = generate_patch_rays(intr, pose, full_image_pattern(intr), 1e-3, 1e3)
    t, _ = intersect(spec, rays.origins.reshape(-1, 3), rays.directions.reshape(-1, 3))
    return np.isfinite(t).reshape(intr.height, intr.width)


# file formats ---------------------------------------------------------------


def write_ppm(path, image):
    """Write an (H, W, 3) image; floats are taken as [0, 1] and quantized."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"PPM images must be (H, W, 3), got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path):
    """Read a binary P6 file into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pixels = data[pos + 1 :]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


@dataclass(frozen=True)
class ManifestRow:
    path: str
    class_id: int
    style_id: int
    theta: float
    phi: float
    radius: float
    shift: float

    @property
    def pose(self):
        return Pose(self.radius, self.theta, self.phi, self.shift)

    def format(self):
        return "\t".join(
            [self.path, str(self.class_id), str(self.style_id), repr(self.theta), repr(self.phi), repr(self.radius), repr(self.shift)]
        )


def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(MANIFEST_HEADER + "\n")
        for row in rows:
            f.write(row.format() + "\n")


def read_manifest(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(path, 1, f"expected header {MANIFEST_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 7:
            raise ManifestError(path, lineno, f"expected 7 tab-separated fields, found {len(parts)}")
        try:
            row = ManifestRow(parts[0], int(parts[1]), int(parts[2]), *(float(p) for p in parts[3:]))
        except ValueError as exc:
            raise ManifestError(path, lineno, str(exc)) from None
        if not row.path or row.class_id < 0 or row.style_id < 0:
            raise ManifestError(path, lineno, "empty path or negative label")
        rows.append(row)
    return rows


def write_camera(path, intr):
    keys = ("fx", "fy", "cx", "cy", "width", "height")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k in keys:
            f.write(f"{k}={getattr(intr, k)!r}\n")


def read_camera(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    try:
        return Intrinsics(
            float(values["fx"]), float(values["fy"]), float(values["cx"]), float(values["cy"]),
            int(values["width"]), int(values["height"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad camera description ({exc})") from None


# labeled image sets ---------------------------------------------------------


@dataclass
class LabeledImageSet:
    root: Path
    rows: list
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    intrinsics: Intrinsics
    class_ids: np.ndarray = field(init=False)
    style_ids: np.ndarray = field(init=False)

    def __post_init__(self):
        self.class_ids = np.array([r.class_id for r in self.rows], dtype=np.int64)
        self.style_ids = np.array([r.style_id for r in self.rows], dtype=np.int64)

    def __len__(self):
        return len(self.rows)

    @property
    def poses(self):
        return [r.pose for r in self.rows]

    @property
    def n_classes(self):
        return int(self.class_ids.max()) + 1 if len(self) else 0

    @property
    def n_styles(self):
        return int(self.style_ids.max()) + 1 if len(self) else 0

    def label_pairs(self):
        return sorted({(int(c), int(s)) for c, s in zip(self.class_ids, self.style_ids)})

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.root, [self.rows[i] for i in indices], self.images[indices], self.intrinsics)


@dataclass
class Batch:
    images: np.ndarray
    class_ids: np.ndarray
    style_ids: np.ndarray
    poses: list
    indices: np.ndarray


def generate_dataset(
    out_dir, n_classes=4, n_styles=4, poses_per_cell=50, size=64, seed=0, radius=4.0,
    fov=50.0, scale=1.0, shading=True, prior=None,
):
    """Render every (class, style) cell from random hemisphere poses and write the set to disk."""
    if not 1 <= n_classes <= len(SHAPES) or not 1 <= n_styles <= len(STYLE_COLORS):
        raise ContractError(f"need 1..{len(SHAPES)} classes and 1..{len(STYLE_COLORS)} styles")
    if poses_per_cell < 1:
        raise ContractError("need at least one pose per cell")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"output directory {root} is not writable")
    prior = prior or PosePrior(radius=(radius, radius))
    intr = Intrinsics.from_fov(size, size, fov)
    rng = np.random.default_rng(seed)
    rows, images = [], []
    for c in range(n_classes):
        for s in range(n_styles):
            spec = SceneSpec(c, s, scale, shading)
            for k in range(poses_per_cell):
                pose = sample_pose(prior, rng)
                rel = f"images/c{c}_s{s}_{k:04d}.ppm"
                img = raytrace_reference(spec, intr, pose)
                q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                write_ppm(root / rel, q)
                images.append(q)
                rows.append(ManifestRow(rel, c, s, pose.theta, pose.phi, pose.radius, pose.shift))
    write_camera(root / "camera.txt", intr)
    write_manifest(root / "manifest.tsv", rows)
    return LabeledImageSet(root, rows, np.stack(images).astype(np.float32) / 255.0, intr)


def load_dataset(root):
    root = Path(root)
    rows = read_manifest(root / "manifest.tsv")
    intr = read_camera(root / "camera.txt")
    images = []
    for row in rows:
        path = root / row.path
        if not path.is_file():
            raise FileNotFoundError(f"image listed in manifest is missing: {path}")
        img = read_ppm(path)
        if img.shape != (intr.height, intr.width, 3):
            raise FormatError(f"{path}: size {img.shape[1]}x{img.shape[0]} != {intr.width}x{intr.height}")
        images.append(img)
    arr = np.stack(images).astype(np.float32) / 255.0 if images else np.zeros((0, intr.height, intr.width, 3), np.float32)
    return LabeledImageSet(root, rows, arr, intr)


def sample_batch(dataset, batch_size, rng):
    """Uniform sampling with replacement."""
    if len(dataset) == 0:
        raise ContractError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return Batch(
        dataset.images[idx], dataset.class_ids[idx], dataset.style_ids[idx], [dataset.rows[i].pose for i in idx], idx
    )
