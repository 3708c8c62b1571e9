"""OFF parsing, normalization, augmentation, and toy shape properties."""

import numpy as np
import pytest

from pointcont import pcnt_io
from pointcont.data import (
    OffParseError,
    TOY_CLASSES,
    augment,
    load_dataset,
    load_off,
    normalize_unit_sphere,
    sample_cube,
    sample_n,
    sample_sphere,
    sample_torus,
    save_dataset,
    synth_toy,
    write_ply,
)


# ---------------------------------------------------------------------------
# OFF reader


def _off(tmp_path, text, name="mesh.off"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_off_minimal(tmp_path):
    pts = load_off(_off(tmp_path, "OFF\n1 0 0\n0 0 0\n"))
    assert np.array_equal(pts, [[0.0, 0.0, 0.0]])


def test_load_off_cube_vertices(tmp_path):
    corners = [(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    body = "\n".join(f"{x} {y} {z}" for x, y, z in corners)
    pts = load_off(_off(tmp_path, f"OFF\n8 0 0\n{body}\n"))
    assert np.array_equal(pts, np.array(corners, dtype=float))


def test_load_off_glued_counts_header(tmp_path):
    pts = load_off(_off(tmp_path, "OFF2 0 0\n1 2 3\n4 5 6\n"))
    assert np.array_equal(pts, [[1, 2, 3], [4, 5, 6]])


def test_load_off_skips_comments_and_faces(tmp_path):
    text = "# comment\nOFF\n2 1 0\n0 0 0\n1 1 1\n3 0 1 0\n"
    assert load_off(_off(tmp_path, text)).shape == (2, 3)


def test_load_off_vertex_count_mismatch(tmp_path):
    with pytest.raises(OffParseError, match="line 2"):
        load_off(_off(tmp_path, "OFF\n3 0 0\n0 0 0\n1 1 1\n"))


def test_load_off_bad_header(tmp_path):
    with pytest.raises(OffParseError, match="line 1"):
        load_off(_off(tmp_path, "PLY\n1 0 0\n0 0 0\n"))


def test_load_off_empty_file(tmp_path):
    with pytest.raises(OffParseError, match="line 1"):
        load_off(_off(tmp_path, ""))


def test_load_off_bad_coordinate_names_line(tmp_path):
    with pytest.raises(OffParseError, match="line 4"):
        load_off(_off(tmp_path, "OFF\n2 0 0\n0 0 0\nx y z\n"))


# ---------------------------------------------------------------------------
# PLY / dataset container


def test_write_ply_layout(tmp_path):
    path = tmp_path / "out.ply"
    write_ply(path, [[0.5, -1.0, 2.0]], [[255, 0, 10]])
    lines = path.read_text().splitlines()
    assert lines[0] == "ply"
    assert lines[1] == "format ascii 1.0"
    assert lines[2] == "element vertex 1"
    assert lines[3:6] == ["property float x", "property float y", "property float z"]
    assert lines[6:9] == ["property uchar red", "property uchar green", "property uchar blue"]
    assert lines[9] == "end_header"
    assert lines[10] == "0.500000 -1.000000 2.000000 255 0 10"


def test_dataset_round_trip(tmp_path):
    clouds, labels = synth_toy(2, 32, 0.01, seed=5)
    path = tmp_path / "toy.pcnt"
    save_dataset(path, clouds, labels)
    pts, labs = load_dataset(path)
    assert pts.shape == (6, 32, 3) and pts.dtype == np.float64
    assert np.array_equal(labs, labels)
    # values survive the float32 container exactly up to f32 rounding
    assert np.allclose(pts, clouds, atol=1e-7)


def test_load_dataset_missing_tensor(tmp_path):
    path = tmp_path / "bad.pcnt"
    pcnt_io.write_tensors(path, {"points": np.zeros((1, 4, 3))})
    with pytest.raises(pcnt_io.PcntError, match="labels"):
        load_dataset(path)


# ---------------------------------------------------------------------------
# normalization / sampling / augmentation


def test_normalize_two_points():
    out = normalize_unit_sphere([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert np.allclose(out, [[-1, 0, 0], [1, 0, 0]], atol=1e-15)


def test_normalize_properties():
    pts = np.random.default_rng(0).normal(size=(100, 3)) * 4 + 7
    out = normalize_unit_sphere(pts)
    assert np.abs(out.mean(axis=0)).max() < 1e-12
    assert abs(np.linalg.norm(out, axis=1).max() - 1.0) < 1e-12


def test_normalize_idempotent():
    pts = np.random.default_rng(1).normal(size=(50, 3))
    once = normalize_unit_sphere(pts)
    twice = normalize_unit_sphere(once)
    assert np.abs(once - twice).max() < 1e-12


def test_normalize_degenerate_identical_points():
    out = normalize_unit_sphere(np.full((5, 3), 3.25))
    assert np.array_equal(out, np.zeros((5, 3)))


def test_sample_n_permutation_when_sizes_match():
    pts = np.arange(30, dtype=float).reshape(10, 3)
    out = sample_n(pts, 10, seed=3)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_sample_n_with_replacement():
    pts = np.arange(12, dtype=float).reshape(4, 3)
    out = sample_n(pts, 8, seed=4)
    rows = set(map(tuple, pts))
    assert out.shape == (8, 3)
    assert all(tuple(r) in rows for r in out)


def test_sample_n_seeded_and_validated():
    pts = np.random.default_rng(5).normal(size=(20, 3))
    assert np.array_equal(sample_n(pts, 7, seed=9), sample_n(pts, 7, seed=9))
    with pytest.raises(ValueError):
        sample_n(pts, 0, seed=0)


def test_augment_affine_arithmetic():
    pts = np.random.default_rng(6).normal(size=(40, 3))
    rng = np.random.default_rng(7)
    out = augment(pts, rng)
    probe = np.random.default_rng(7)
    scale = probe.uniform(0.8, 1.2, size=3)
    shift = probe.uniform(-0.1, 0.1, size=3)
    assert np.allclose(out, pts * scale + shift, atol=1e-15)
    assert np.allclose(out.mean(axis=0), pts.mean(axis=0) * scale + shift, atol=1e-12)


def test_augment_degenerate_ranges_identity():
    pts = np.random.default_rng(8).normal(size=(10, 3))
    out = augment(pts, np.random.default_rng(9), scale_min=1.0, scale_max=1.0, translate_max=0.0)
    assert np.allclose(out, pts, atol=1e-15)


# ---------------------------------------------------------------------------
# toy shapes


def test_sphere_points_on_unit_sphere():
    pts = sample_sphere(64, np.random.default_rng(10))
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)


def test_antipodal_centroids_cancel_to_machine_precision():
    # pairwise summation does not add mirrored points adjacently, so the sum
    # is not bitwise zero, but the statistical O(1/sqrt(n)) bias is gone
    rng = np.random.default_rng(11)
    for sampler in (sample_sphere, sample_cube, sample_torus):
        pts = sampler(100, rng)
        assert np.abs(pts.sum(axis=0)).max() < 1e-13


def test_cube_points_on_surface():
    pts = sample_cube(64, np.random.default_rng(12))
    assert np.allclose(np.abs(pts).max(axis=1), 1.0, atol=1e-12)
    assert np.abs(pts).max() <= 1.0 + 1e-12


def test_torus_points_on_surface():
    pts = sample_torus(64, np.random.default_rng(13))
    ring = np.hypot(pts[:, 0], pts[:, 1])
    tube = np.hypot(ring - 1.0, pts[:, 2])
    assert np.allclose(tube, 0.4, atol=1e-12)


def test_noise_free_sphere_norms_after_normalization():
    clouds, labels = synth_toy(3, 64, 0.0, seed=14)
    for cloud in clouds[labels == TOY_CLASSES.index("sphere")]:
        assert np.abs(np.linalg.norm(cloud, axis=1) - 1.0).max() < 1e-6


def test_noise_free_cube_max_coordinate_constant():
    clouds, labels = synth_toy(3, 64, 0.0, seed=15, rotate=False)
    for cloud in clouds[labels == TOY_CLASSES.index("cube")]:
        m = np.abs(cloud).max(axis=1)
        assert m.max() - m.min() < 1e-9


def test_synth_toy_balanced_and_seeded():
    clouds, labels = synth_toy(5, 32, 0.02, seed=16)
    assert clouds.shape == (15, 32, 3)
    assert np.array_equal(np.bincount(labels), [5, 5, 5])
    again, lag = synth_toy(5, 32, 0.02, seed=16)
    assert np.array_equal(clouds, again) and np.array_equal(labels, lag)
    other, _ = synth_toy(5, 32, 0.02, seed=17)
    assert not np.array_equal(clouds, other)


def test_synth_toy_normalized_outputs():
    clouds, _ = synth_toy(2, 48, 0.05, seed=18)
    for cloud in clouds:
        assert np.abs(cloud.mean(axis=0)).max() < 1e-12
        assert np.linalg.norm(cloud, axis=1).max() <= 1.0 + 1e-12


def test_synth_toy_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_toy(0, 32, 0.0, seed=0)
    with pytest.raises(ValueError):
        synth_toy(1, 32, -0.1, seed=0)
    with pytest.raises(ValueError):
        synth_toy(1, 32, 0.0, seed=0, classes=("sphere", "pyramid"))
