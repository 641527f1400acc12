"""Point-cloud containers, sampling, neighbor search, rigid motions and file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "plane")

_BIN_MAGIC = b"RIPC"
_BIN_VERSION = 1


class GeometryError(ValueError):
    """Raised for invalid geometric input (empty clouds, bad indices, bad transforms)."""


class ParseError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise GeometryError("point cloud is empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise GeometryError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-6):
                raise GeometryError("normals must be unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices)
        normals = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], normals, self.label)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(rot) - 1.0) >= 1e-9:
            raise GeometryError("rotation must be orthogonal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


# --------------------------------------------------------------------------- I/O


def load_point_cloud(path, format: str = "auto") -> PointCloud:
    """Read a cloud from ``xyz`` text, ``off`` or the ``bin`` (RIPC) format.

    Six-column xyz files carry normals, which are renormalized to unit length.
    OFF files contribute their vertex set only.
    """
    path = Path(path)
    if format == "auto":
        format = {".off": "off", ".bin": "bin", ".ripc": "bin"}.get(path.suffix.lower(), "xyz")
    if format in ("xyz", "xyz-text"):
        return _read_xyz(path.read_text())
    if format == "off":
        return _read_off(path.read_text())
    if format in ("bin", "internal-binary"):
        return _read_bin(path.read_bytes())
    raise GeometryError(f"unknown point cloud format {format!r}")


def save_point_cloud(cloud: PointCloud, path, format: str = "auto") -> None:
    path = Path(path)
    if format == "auto":
        format = {".off": "off", ".bin": "bin", ".ripc": "bin"}.get(path.suffix.lower(), "xyz")
    if format in ("bin", "internal-binary"):
        path.write_bytes(_encode_bin(cloud))
    elif format in ("xyz", "xyz-text"):
        cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
        path.write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in cols) + "\n")
    elif format == "off":
        lines = ["OFF", f"{len(cloud)} 0 0"]
        lines += [" ".join(repr(float(v)) for v in row) for row in cloud.points]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise GeometryError(f"unknown point cloud format {format!r}")


def _parse_floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"line {lineno}: expected numbers, got {' '.join(tokens)!r}") from None


def _read_xyz(text: str) -> PointCloud:
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.replace(",", " ").split()
        if len(tokens) not in (3, 6):
            raise ParseError(f"line {lineno}: expected 3 or 6 columns, got {len(tokens)}")
        if width is not None and len(tokens) != width:
            raise ParseError(f"line {lineno}: column count changed from {width} to {len(tokens)}")
        width = len(tokens)
        rows.append(_parse_floats(tokens, lineno))
    if not rows:
        raise GeometryError("empty input: no points found")
    data = np.array(rows, dtype=np.float64)
    normals = None
    if width == 6:
        normals = data[:, 3:]
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(norms == 0):
            bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
            raise ParseError(f"point {bad}: zero-length normal")
        normals = normals / norms
    return PointCloud(data[:, :3], normals)


def _read_off(text: str) -> PointCloud:
    lines = [(i, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines(), start=1)]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines:
        raise ParseError("line 1: missing OFF header")
    lineno, header = lines[0]
    rest = lines[1:]
    # Some writers glue the counts onto the header ("OFF8 6 0").
    if not header.upper().startswith("OFF"):
        raise ParseError(f"line {lineno}: missing OFF header")
    tail = header[3:].strip()
    if tail:
        counts_line = (lineno, tail)
    else:
        if not rest:
            raise ParseError(f"line {lineno}: missing vertex/face counts")
        counts_line, rest = rest[0], rest[1:]
    try:
        nv = int(counts_line[1].split()[0])
    except (ValueError, IndexError):
        raise ParseError(f"line {counts_line[0]}: malformed counts {counts_line[1]!r}") from None
    if nv == 0:
        raise GeometryError("empty input: OFF file has no vertices")
    if len(rest) < nv:
        raise ParseError(f"line {lines[-1][0]}: expected {nv} vertices, found {len(rest)}")
    verts = []
    for i, ln in rest[:nv]:
        tokens = ln.split()
        if len(tokens) < 3:
            raise ParseError(f"line {i}: vertex needs 3 coordinates")
        verts.append(_parse_floats(tokens[:3], i))
    return PointCloud(np.array(verts))


def _encode_bin(cloud: PointCloud) -> bytes:
    has_n = cloud.normals is not None
    head = _BIN_MAGIC + struct.pack("<IIB", _BIN_VERSION, len(cloud), int(has_n))
    body = cloud.points.astype("<f8").tobytes()
    if has_n:
        body += cloud.normals.astype("<f8").tobytes()
    return head + body


def _read_bin(blob: bytes) -> PointCloud:
    if blob[:4] != _BIN_MAGIC:
        raise ParseError("offset 0: bad magic, expected 'RIPC'")
    if len(blob) < 13:
        raise ParseError(f"offset {len(blob)}: truncated header")
    version, n, has_n = struct.unpack_from("<IIB", blob, 4)
    if version != _BIN_VERSION:
        raise ParseError(f"offset 4: unsupported version {version}")
    if n == 0:
        raise GeometryError("empty input: binary cloud has no points")
    need = 13 + n * 24 * (2 if has_n else 1)
    if len(blob) != need:
        raise ParseError(f"offset {min(len(blob), need)}: expected {need} bytes, got {len(blob)}")
    pts = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=13).reshape(n, 3)
    normals = None
    if has_n:
        normals = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=13 + 24 * n).reshape(n, 3)
    return PointCloud(pts.astype(np.float64), None if normals is None else normals.astype(np.float64))


# ------------------------------------------------------------------ sampling


def _lexmin(points: np.ndarray, candidates: np.ndarray) -> int:
    """Candidate with the lexicographically smallest coordinate triple (then smallest index)."""
    if len(candidates) == 1:
        return int(candidates[0])
    c = points[candidates]
    order = np.lexsort((candidates, c[:, 2], c[:, 1], c[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sample(points, k: int) -> np.ndarray:
    """Greedy farthest point sampling, seeded at the point farthest from the centroid.

    Exact distance ties are resolved by the lexicographically smallest coordinate
    triple and then by index, so the selection only depends on geometry.
    """
    pts = _as_points(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise GeometryError(f"cannot sample {k} points from a cloud of {n}")
    centroid = pts.mean(axis=0)
    d0 = ((pts - centroid) ** 2).sum(axis=1)
    seed = _lexmin(pts, np.flatnonzero(d0 == d0.max()))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed
    mind = ((pts - pts[seed]) ** 2).sum(axis=1)
    for i in range(1, k):
        best = mind.max()
        cand = np.flatnonzero(mind == best)
        j = int(cand[0]) if len(cand) == 1 else _lexmin(pts, cand)
        chosen[i] = j
        np.minimum(mind, ((pts - pts[j]) ** 2).sum(axis=1), out=mind)
    return chosen


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences: duplicated coordinates give exactly 0
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_query(points, queries, k: int, exclude_coincident: bool = False) -> np.ndarray:
    """Indices of the ``k`` nearest ``points`` to each query, ascending distance.

    Ties go to the smaller index. With ``exclude_coincident`` points closer than
    1e-12 to the query are skipped.
    """
    pts = _as_points(points)
    qs = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = len(pts)
    if not 1 <= k <= n:
        raise GeometryError(f"k={k} outside [1, {n}]")
    d = pairwise_sqdist(qs, pts)
    if exclude_coincident:
        d = np.where(d < 1e-24, np.inf, d)
    if k == n:
        out = np.argsort(d, axis=1, kind="stable")
    else:
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
        pd = np.take_along_axis(d, part, axis=1)
        thresh = pd.max(axis=1)
        # a boundary tie would make argpartition's choice arbitrary
        clean = (d <= thresh[:, None]).sum(axis=1) == k
        order = np.lexsort((part, pd), axis=1)
        out = np.take_along_axis(part, order, axis=1)
        if not clean.all():
            rows = np.flatnonzero(~clean)
            out[rows] = np.argsort(d[rows], axis=1, kind="stable")[:, :k]
    if exclude_coincident and np.isinf(np.take_along_axis(d, out[:, :k], axis=1)).any():
        raise GeometryError("not enough non-coincident neighbors")
    return out[:, :k]


def knn(cloud, query: int, k: int) -> np.ndarray:
    """k nearest neighbors of point ``query`` (itself eligible) within ``cloud``."""
    pts = _as_points(cloud)
    if not 0 <= query < len(pts):
        raise GeometryError(f"query index {query} out of range")
    return knn_query(pts, pts[query:query + 1], k)[0]


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise GeometryError(f"expected a non-empty (N, 3) array, got {pts.shape}")
    return pts


# ----------------------------------------------------------- rigid motions


def apply_rigid_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    if normals is not None:
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(t.apply(cloud.points), normals, cloud.label)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return quaternion_to_matrix(np.concatenate([[np.cos(h)], np.sin(h) * axis]))


def random_rotation(mode: str, seed) -> RigidTransform:
    """z: uniform angle about +z. so3: Haar-uniform via a normalized Gaussian quaternion.

    ``seed`` may be an int or a ``numpy.random.Generator``. Mode ``none`` gives identity.
    """
    rng = np.random.default_rng(seed)
    if mode == "none":
        return RigidTransform()
    if mode == "z":
        theta = rng.uniform(0.0, 2 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        return RigidTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
    if mode == "so3":
        return RigidTransform(quaternion_to_matrix(rng.standard_normal(4)))
    raise GeometryError(f"unknown rotation mode {mode!r}")


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    if sigma < 0:
        raise GeometryError("sigma must be non-negative")
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    noisy = cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape)
    return PointCloud(noisy, cloud.normals, cloud.label)


def normalize_unit_diameter(cloud: PointCloud) -> PointCloud:
    """Center on the bounding-box center and scale the farthest point to radius 0.5."""
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    centered = cloud.points - 0.5 * (lo + hi)
    r = np.linalg.norm(centered, axis=1).max()
    if r == 0:
        raise GeometryError("cannot normalize a cloud of coincident points")
    return PointCloud(centered * (0.5 / r), cloud.normals, cloud.label)


def mean_nn_distance(points) -> float:
    pts = _as_points(points)
    idx = knn_query(pts, pts, 2, exclude_coincident=False)[:, 1]
    return float(np.linalg.norm(pts[idx] - pts, axis=1).mean())


# ------------------------------------------------------------ synthetic data


def synth_shape(kind: str, n: int, seed, params: Optional[dict] = None) -> PointCloud:
    """Sample ``n`` surface points of an analytic primitive with exact unit normals.

    Shapes sit in a canonical z-up pose, centered on their analytic center and
    scaled so the circumscribed radius is 0.5. ``params`` overrides the shape
    proportions (``aspect`` for cube/cylinder/cone/plane, ``major``/``minor``
    for the torus).
    """
    if kind not in SHAPE_KINDS:
        raise GeometryError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 8:
        raise GeometryError("need at least 8 points")
    rng = np.random.default_rng(seed)
    params = dict(params or {})
    label = SHAPE_KINDS.index(kind)
    pts, nrm = _SAMPLERS[kind](rng, n, params)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, label)


def _sphere(rng, n, params):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return 0.5 * v, v


def _box(rng, n, params):
    a = np.array(params.get("aspect", (1.0, 1.0, 1.0)), dtype=np.float64)
    half = 0.5 * a / np.linalg.norm(a)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    rows = np.arange(n)
    pts[rows, face_axis] = sign * half[face_axis]
    nrm = np.zeros((n, 3))
    nrm[rows, face_axis] = sign
    return pts, nrm


def _cylinder(rng, n, params):
    # aspect = height / (2 * radius)
    aspect = float(params.get("aspect", 1.0))
    r = 0.5 / np.sqrt(1.0 + aspect ** 2)
    h = 2.0 * aspect * r
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = r * np.sqrt(rng.uniform(0, 1, size=n))
    z = rng.uniform(-h / 2, h / 2, size=n)
    c, s = np.cos(theta), np.sin(theta)
    pts = np.where((kind == 0)[:, None],
                   np.stack([r * c, r * s, z], axis=1),
                   np.stack([rad * c, rad * s, np.where(kind == 1, h / 2, -h / 2)], axis=1))
    nrm = np.where((kind == 0)[:, None],
                   np.stack([c, s, np.zeros(n)], axis=1),
                   np.stack([np.zeros(n), np.zeros(n), np.where(kind == 1, 1.0, -1.0)], axis=1))
    return pts, nrm


def _cone(rng, n, params):
    # aspect = height / base radius; apex up, base centered on the bbox midpoint plane
    aspect = float(params.get("aspect", 1.5))
    r = 0.5 / np.sqrt(1.0 + (aspect / 2) ** 2)
    h = aspect * r
    slant = np.hypot(r, h)
    lateral, base = np.pi * r * slant, np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    c, s = np.cos(theta), np.sin(theta)
    # lateral area density grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(0, 1, size=n))
    rad_side = r * t
    rad_base = r * np.sqrt(rng.uniform(0, 1, size=n))
    z_side = h / 2 - h * t
    pts = np.where(on_side[:, None],
                   np.stack([rad_side * c, rad_side * s, z_side], axis=1),
                   np.stack([rad_base * c, rad_base * s, np.full(n, -h / 2)], axis=1))
    nrm = np.where(on_side[:, None],
                   np.stack([h * c, h * s, np.full(n, r)], axis=1) / slant,
                   np.tile([0.0, 0.0, -1.0], (n, 1)))
    return pts, nrm


def _torus(rng, n, params):
    major = float(params.get("major", 0.35))
    minor = float(params.get("minor", 0.15))
    scale = 0.5 / (major + minor)
    major, minor = major * scale, minor * scale
    u = np.empty(0)
    v = np.empty(0)
    while len(u) < n:
        m = 2 * (n - len(u)) + 16
        uu = rng.uniform(0, 2 * np.pi, m)
        vv = rng.uniform(0, 2 * np.pi, m)
        # area element is proportional to (R + r cos v)
        keep = rng.uniform(0, major + minor, m) < major + minor * np.cos(vv)
        u = np.concatenate([u, uu[keep]])
        v = np.concatenate([v, vv[keep]])
    u, v = u[:n], v[:n]
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return pts, nrm


def _plane(rng, n, params):
    aspect = float(params.get("aspect", 1.0))
    half = 0.5 * np.array([aspect, 1.0]) / np.hypot(aspect, 1.0)
    xy = rng.uniform(-1, 1, size=(n, 2)) * half
    pts = np.column_stack([xy, np.zeros(n)])
    return pts, np.tile([0.0, 0.0, 1.0], (n, 1))


_SAMPLERS = {
    "sphere": _sphere,
    "cube": _box,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
}
