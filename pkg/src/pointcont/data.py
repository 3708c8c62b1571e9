"""Point-cloud ingestion, normalization, augmentation, and toy shapes.

The synthetic dataset covers three surfaces with deliberately different
frequency content: a sphere (smooth), a cube (sharp edges and corners),
and a torus (a hole plus curvature variation). Surface points are drawn
in antipodal pairs so a noise-free cloud has a centroid that cancels to
machine precision instead of the usual O(1/sqrt(n)) statistical offset,
which keeps the normalization step from distorting the exact surface
properties the tests rely on.
"""

import numpy as np

from . import pcnt_io

TOY_CLASSES = ("sphere", "cube", "torus")

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4


class OffParseError(ValueError):
    """Malformed OFF file; message carries the 1-based line number."""


# ---------------------------------------------------------------------------
# file formats


def load_off(path) -> np.ndarray:
    """Vertices of an OFF mesh as an (n, 3) float array; faces are ignored."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    lines = [
        (i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise OffParseError("line 1: missing OFF header")
    lineno, first = lines[0]
    if not first.startswith("OFF"):
        raise OffParseError(f"line {lineno}: expected OFF header, got {first[:20]!r}")
    rest = first[3:].strip()
    if rest:
        # header variant with the counts glued onto the magic line
        counts_line, counts_no, body = rest, lineno, lines[1:]
    else:
        if len(lines) < 2:
            raise OffParseError(f"line {lineno + 1}: missing element counts")
        counts_no, counts_line = lines[1]
        body = lines[2:]
    parts = counts_line.split()
    if len(parts) < 2:
        raise OffParseError(f"line {counts_no}: expected vertex/face counts, got {counts_line!r}")
    try:
        n_vertices = int(parts[0])
    except ValueError:
        raise OffParseError(f"line {counts_no}: bad vertex count {parts[0]!r}") from None
    if n_vertices < 1:
        raise OffParseError(f"line {counts_no}: vertex count must be positive")
    if len(body) < n_vertices:
        raise OffParseError(
            f"line {counts_no}: header declares {n_vertices} vertices, file has {len(body)}"
        )
    verts = np.empty((n_vertices, 3))
    for row, (lineno, ln) in enumerate(body[:n_vertices]):
        fields = ln.split()
        if len(fields) < 3:
            raise OffParseError(f"line {lineno}: expected 3 coordinates, got {ln!r}")
        try:
            verts[row] = [float(v) for v in fields[:3]]
        except ValueError:
            raise OffParseError(f"line {lineno}: bad coordinate in {ln!r}") from None
    return verts


def write_ply(path, points, colors) -> None:
    """ASCII PLY with one RGB color per point; colors are (n, 3) uint8."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors)
    if points.ndim != 2 or points.shape[1] != 3 or colors.shape != points.shape:
        raise ValueError("points and colors must both be (n, 3)")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(points, colors):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(c[0])} {int(c[1])} {int(c[2])}\n")


def save_dataset(path, points, labels) -> None:
    points = np.asarray(points)
    labels = np.asarray(labels)
    if points.ndim != 3 or points.shape[2] != 3 or labels.shape != (points.shape[0],):
        raise ValueError("expected points (n, p, 3) with labels (n,)")
    pcnt_io.write_tensors(path, {"points": points, "labels": labels})


def load_dataset(path):
    tensors = pcnt_io.read_tensors(path)
    for key in ("points", "labels"):
        if key not in tensors:
            raise pcnt_io.PcntError(f"dataset file is missing the '{key}' tensor")
    points = tensors["points"].astype(np.float64)
    labels = np.rint(tensors["labels"]).astype(np.int64)
    if points.ndim != 3 or points.shape[2] != 3 or labels.shape != (points.shape[0],):
        raise pcnt_io.PcntError("dataset tensors have inconsistent shapes")
    return points, labels


# ---------------------------------------------------------------------------
# normalization / sampling / augmentation


def normalize_unit_sphere(points) -> np.ndarray:
    """Center on the centroid and scale the farthest point to norm 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError("expected a nonempty (n, 3) array")
    out = points - points.mean(axis=0)
    scale = np.linalg.norm(out, axis=1).max()
    if scale > 0.0:  # all-identical input stays at scale 1
        out = out / scale
    return out


def sample_n(points, n, seed) -> np.ndarray:
    """Exactly n uniformly chosen points; without replacement when possible."""
    points = np.asarray(points, dtype=np.float64)
    if n < 1:
        raise ValueError("sample size must be positive")
    if points.shape[0] == 0:
        raise ValueError("cannot sample from an empty point set")
    rng = np.random.default_rng(seed)
    replace = points.shape[0] < n
    idx = rng.choice(points.shape[0], size=n, replace=replace)
    return points[idx]


def augment(points, rng, scale_min=0.8, scale_max=1.2, translate_max=0.1) -> np.ndarray:
    """Per-axis anisotropic scaling followed by a per-axis translation."""
    scale = rng.uniform(scale_min, scale_max, size=3)
    shift = rng.uniform(-translate_max, translate_max, size=3)
    return points * scale + shift


# ---------------------------------------------------------------------------
# toy surfaces (all sampled as antipodal pairs; all centrally symmetric)


def _pair_up(half, n):
    both = np.concatenate([half, -half])
    return both[:n]


def sample_sphere(n, rng) -> np.ndarray:
    half = rng.normal(size=((n + 1) // 2, 3))
    norms = np.linalg.norm(half, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return _pair_up(half / norms, n)


def sample_cube(n, rng) -> np.ndarray:
    m = (n + 1) // 2
    half = rng.uniform(-1.0, 1.0, size=(m, 3))
    axes = rng.integers(0, 3, size=m)
    half[np.arange(m), axes] = 1.0  # project onto the +axis face; mirror gives -axis
    return _pair_up(half, n)


def sample_torus(n, rng) -> np.ndarray:
    m = (n + 1) // 2
    out = np.empty((m, 3))
    done = 0
    while done < m:
        need = m - done
        u = rng.uniform(0.0, 2.0 * np.pi, size=need)
        v = rng.uniform(0.0, 2.0 * np.pi, size=need)
        # rejection step keeps the sampling uniform over surface area
        keep = rng.uniform(0.0, 1.0, size=need) <= (
            (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
        )
        u, v = u[keep], v[keep]
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
        take = min(len(pts), need)
        out[done : done + take] = pts[:take]
        done += take
    return _pair_up(out, n)


_SAMPLERS = {"sphere": sample_sphere, "cube": sample_cube, "torus": sample_torus}


def _rotate_z(points, angle):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def synth_toy(per_class, n_points, noise_sigma, seed, classes=TOY_CLASSES, rotate=True):
    """Balanced labeled clouds: (per_class*len(classes), n_points, 3) + labels."""
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if n_points < 1:
        raise ValueError("n_points must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    for name in classes:
        if name not in _SAMPLERS:
            raise ValueError(f"unknown toy class: {name!r}")
    rng = np.random.default_rng(seed)
    clouds = np.empty((per_class * len(classes), n_points, 3))
    labels = np.empty(per_class * len(classes), dtype=np.int64)
    row = 0
    for ci, name in enumerate(classes):
        sampler = _SAMPLERS[name]
        for _ in range(per_class):
            pts = sampler(n_points, rng)
            if rotate:
                pts = _rotate_z(pts, rng.uniform(0.0, 2.0 * np.pi))
            if noise_sigma > 0.0:
                pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
            clouds[row] = normalize_unit_sphere(pts)
            labels[row] = ci
            row += 1
    return clouds, labels
