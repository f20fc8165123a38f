import filecmp
from pathlib import Path

import numpy as np
import pytest

from condnerf.dataset import (
    MANIFEST_HEADER,
    STYLE_COLORS,
    ManifestError,
    ManifestRow,
    SceneSpec,
    generate_dataset,
    hit_mask,
    intersect,
    load_dataset,
    raytrace_reference,
    read_camera,
    read_manifest,
    read_ppm,
    sample_batch,
    write_camera,
    write_manifest,
    write_ppm,
)
from condnerf.errors import ContractError, FormatError
from condnerf.geometry import Intrinsics, Pose, pose_to_camera


def test_center_ray_hits_unit_sphere_at_depth_three():
    t, n = intersect(SceneSpec(0, 0), np.array([[0.0, 0, 4]]), np.array([[0.0, 0, -1]]))
    assert t[0] == pytest.approx(3.0, abs=1e-12)
    np.testing.assert_allclose(n[0], [0, 0, 1], atol=1e-12)


def test_sphere_silhouette_is_centered_disk():
    intr = Intrinsics.from_fov(65, 65, 50.0)
    img = raytrace_reference(SceneSpec(0, 0), intr, Pose(4, 0, 0))
    # the center pixel faces the headlight: full style color
    np.testing.assert_allclose(img[32, 32], STYLE_COLORS[0], atol=1e-12)
    np.testing.assert_array_equal(img[0, 0], [1, 1, 1])  # miss -> white background
    mask = hit_mask(SceneSpec(0, 0), intr, Pose(4, 0, 0))
    ys, xs = np.nonzero(mask)
    assert xs.mean() == pytest.approx(32, abs=1e-9) and ys.mean() == pytest.approx(32, abs=1e-9)
    assert np.array_equal(mask, mask[::-1]) and np.array_equal(mask, mask[:, ::-1])


def test_doubling_distance_halves_angular_diameter():
    intr = Intrinsics(2000.0, 2000.0, 1000.0, 0.0, 2001, 1)  # one fine scanline
    spec = SceneSpec(0, 0)

    def angular_diameter(r):
        rot, pos = pose_to_camera(Pose(r, 0, 0))
        xs = np.arange(intr.width, dtype=float)
        cam = np.stack([(xs - intr.cx) / intr.fx, np.zeros_like(xs), -np.ones_like(xs)], axis=-1)
        d = cam @ rot.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        t, _ = intersect(spec, np.broadcast_to(pos, d.shape), d)
        hit = np.nonzero(np.isfinite(t))[0]
        half = (hit.max() - hit.min() + 1) / 2
        return 2 * np.arctan(half / intr.fx)

    assert angular_diameter(3.5) / angular_diameter(7.0) == pytest.approx(2.0, rel=0.05)


@pytest.mark.parametrize("class_id", [0, 1, 2, 3])
def test_depth_sweep_shrinks_silhouette(class_id):
    intr = Intrinsics.from_fov(48, 48, 50.0)
    counts = [hit_mask(SceneSpec(class_id, 0), intr, Pose(r, 30, 20)).sum() for r in (3.5, 4.0, 4.5, 5.0)]
    assert all(a > b for a, b in zip(counts, counts[1:]))


@pytest.mark.parametrize("class_id", [0, 1, 2, 3])
def test_primitives_fit_inside_unit_sphere(class_id):
    # rays from far outside aimed past the unit sphere never hit
    rng = np.random.default_rng(class_id)
    d = rng.standard_normal((500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    perp = np.cross(d, rng.standard_normal((500, 3)))
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    origins = -6 * d + 1.01 * perp
    t, _ = intersect(SceneSpec(class_id, 0), origins, d)
    assert np.all(np.isinf(t))


def test_scene_spec_validation():
    with pytest.raises(ContractError):
        SceneSpec(4, 0)
    with pytest.raises(ContractError):
        SceneSpec(0, 0, scale=0.0)


def test_single_cell_dataset(tmp_path):
    ds = generate_dataset(tmp_path / "d", 1, 1, 1, size=8, seed=0)
    assert len(ds) == 1
    assert len(read_manifest(tmp_path / "d" / "manifest.tsv")) == 1
    assert len(list((tmp_path / "d" / "images").iterdir())) == 1


def test_default_desk_size_and_cells(tmp_path):
    ds = generate_dataset(tmp_path / "d", 4, 4, 50, size=8, seed=1)
    assert len(ds) == 800
    assert ds.label_pairs() == [(c, s) for c in range(4) for s in range(4)]
    assert (ds.n_classes, ds.n_styles) == (4, 4)


def test_round_trip_is_pixel_and_field_identical(tmp_path):
    ds = generate_dataset(tmp_path / "d", 2, 2, 3, size=16, seed=2)
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(ds.images, back.images)
    assert ds.rows == back.rows
    assert back.intrinsics == ds.intrinsics


def test_generation_is_deterministic(tmp_path):
    generate_dataset(tmp_path / "a", 2, 2, 2, size=12, seed=3)
    generate_dataset(tmp_path / "b", 2, 2, 2, size=12, seed=3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files], shallow=False)
    assert not mismatch and not errors and len(match) == len(files) == 10


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(blocker / "sub", 1, 1, 1, size=8)


def test_800px_image_size_accepted(tmp_path):
    img = np.zeros((800, 800, 3), dtype=np.uint8)
    img[400, 123] = (1, 2, 3)
    write_ppm(tmp_path / "big.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "big.ppm"), img)
    intr = Intrinsics.from_fov(800, 800)
    write_camera(tmp_path / "camera.txt", intr)
    assert read_camera(tmp_path / "camera.txt") == intr


def test_ppm_float_quantization_and_header_errors(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.full((2, 3, 3), 0.5))
    assert np.all(read_ppm(tmp_path / "a.ppm") == 128)
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "c.ppm")


def _manifest(tmp_path, lines):
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_manifest_truncated_line_reports_line_number(tmp_path):
    good = ManifestRow("images/a.ppm", 0, 1, 10.0, 20.0, 4.0, 0.0).format()
    path = _manifest(tmp_path, [MANIFEST_HEADER, good, good, "images/b.ppm\t0\t1\t10.0"])
    with pytest.raises(ManifestError) as info:
        read_manifest(path)
    assert info.value.lineno == 4
    assert ":4:" in str(info.value)


def test_manifest_bad_number_and_header(tmp_path):
    path = _manifest(tmp_path, [MANIFEST_HEADER, "a.ppm\t0\tzero\t1\t2\t3\t4"])
    with pytest.raises(ManifestError) as info:
        read_manifest(path)
    assert info.value.lineno == 2
    path = _manifest(tmp_path, ["not-a-manifest"])
    with pytest.raises(ManifestError) as info:
        read_manifest(path)
    assert info.value.lineno == 1


def test_manifest_round_trip_preserves_floats(tmp_path):
    rows = [ManifestRow("images/x.ppm", 3, 2, -179.99999999999997, 0.1 + 0.2, 4.0, -1e-17)]
    write_manifest(tmp_path / "m.tsv", rows)
    assert read_manifest(tmp_path / "m.tsv") == rows
    assert (tmp_path / "m.tsv").read_bytes().count(b"\r") == 0


def test_missing_image_names_path(tmp_path):
    generate_dataset(tmp_path / "d", 1, 1, 2, size=8)
    victim = tmp_path / "d" / "images" / "c0_s0_0001.ppm"
    victim.unlink()
    with pytest.raises(FileNotFoundError, match="c0_s0_0001.ppm"):
        load_dataset(tmp_path / "d")


def test_sample_batch(tmp_path):
    ds = generate_dataset(tmp_path / "d", 2, 1, 3, size=8)
    batch = sample_batch(ds, 8, np.random.default_rng(0))
    assert batch.images.shape == (8, 8, 8, 3) and len(batch.poses) == 8
    assert np.array_equal(batch.class_ids, ds.class_ids[batch.indices])
    counts = np.bincount(sample_batch(ds, 6000, np.random.default_rng(1)).indices, minlength=6)
    assert counts.min() > 900  # roughly uniform over the 6 images
    with pytest.raises(ContractError):
        sample_batch(ds.subset([]), 2, np.random.default_rng(0))


def test_unshaded_renders_flat_color():
    img = raytrace_reference(SceneSpec(2, 3, shading=False), Intrinsics.from_fov(16, 16), Pose(4, 45, 45))
    colors = {tuple(px) for px in img.reshape(-1, 3)}
    assert colors == {(1.0, 1.0, 1.0), STYLE_COLORS[3]}


def test_paths_are_relative(tmp_path):
    ds = generate_dataset(tmp_path / "d", 1, 2, 1, size=8)
    assert all(not Path(r.path).is_absolute() for r in ds.rows)
