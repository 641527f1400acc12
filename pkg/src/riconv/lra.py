"""Local reference axes: distance-weighted covariance, 3x3 Jacobi eigensolver, sign rule.

All routines broadcast over leading batch dimensions: a neighborhood is an
``(..., k, 3)`` array of neighbor coordinates paired with a ``(..., 3)`` center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, PointCloud, knn_query


class DegenerateAxisError(GeometryError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class Axis:
    """Unit direction(s) plus the spectral data needed to judge their stability.

    ``sign_margin`` is the weighted projection used by the sign rule, relative
    to the weighted mean neighbor distance; near 0 the sign is decided by
    rounding. ``scale`` is the mean squared support distance, the natural unit
    of the covariance eigenvalues.
    """

    direction: np.ndarray
    smallest_eigenvalue: np.ndarray
    eigengap: np.ndarray
    sign_margin: np.ndarray = None
    degenerate_weights: np.ndarray = None
    scale: np.ndarray = None

    def __len__(self):
        return len(self.direction)

    def __getitem__(self, idx):
        pick = lambda a: None if a is None else np.asarray(a)[idx]
        return Axis(self.direction[idx], pick(self.smallest_eigenvalue), pick(self.eigengap),
                    pick(self.sign_margin), pick(self.degenerate_weights), pick(self.scale))

    @property
    def relative_gap(self) -> np.ndarray:
        gap = np.asarray(self.eigengap, dtype=np.float64)
        return gap if self.scale is None else gap / self.scale

    def unstable(self, gap_tol: float = 1e-6, sign_tol: float = 1e-9) -> np.ndarray:
        """Mask of axes whose direction or sign is not pinned down by the geometry."""
        bad = self.relative_gap < gap_tol
        if self.sign_margin is not None:
            bad = bad | (np.abs(self.sign_margin) < sign_tol)
        return bad


# ------------------------------------------------------------------- weights


def support_weights(p, neighbors):
    """Weights ``(m - |x_i - p|) / sum_j (m - |x_j - p|)`` with ``m`` the max distance.

    Returns ``(weights, degenerate)``; when every neighbor sits at the same
    distance the weights fall back to uniform and ``degenerate`` is True.
    """
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(neighbors, dtype=np.float64)
    if x.shape[-2] < 2:
        raise GeometryError("support weights need at least 2 neighbors")
    dist = np.linalg.norm(x - p[..., None, :], axis=-1)
    if np.any(dist.max(axis=-1) == 0):
        raise GeometryError("all neighbors coincide with the center point")
    return _weights_from_dist(dist)


def _weights_from_dist(dist):
    m = dist.max(axis=-1, keepdims=True)
    raw = m - dist
    denom = raw.sum(axis=-1, keepdims=True)
    degenerate = denom[..., 0] <= 1e-12 * m[..., 0]
    safe = np.where(denom > 0, denom, 1.0)
    w = np.where(degenerate[..., None], 1.0 / dist.shape[-1], raw / safe)
    return w, degenerate


def weighted_covariance(p, neighbors, w):
    """``sum_i w_i (x_i - p)(x_i - p)^T``; exactly symmetric."""
    d = np.asarray(neighbors, dtype=np.float64) - np.asarray(p, dtype=np.float64)[..., None, :]
    w = np.asarray(w, dtype=np.float64)
    if w.shape != d.shape[:-1]:
        raise GeometryError(f"weights shape {w.shape} does not match neighbors {d.shape[:-1]}")
    s = np.swapaxes(d, -1, -2) @ (w[..., None] * d)
    return 0.5 * (s + np.swapaxes(s, -1, -2))


# --------------------------------------------------------------- eigensolver

_PAIRS = ((0, 1), (0, 2), (1, 2))


def jacobi_eigh(s, max_sweeps: int = 30, tol: float = 1e-15):
    """Cyclic Jacobi eigendecomposition of (a batch of) symmetric 3x3 matrices.

    Returns eigenvalues in ascending order and the matching eigenvectors as
    columns. Sweeps stop once every off-diagonal norm is below ``tol`` times
    the Frobenius norm of its matrix.
    """
    a = np.array(s, dtype=np.float64)
    if a.shape[-2:] != (3, 3):
        raise GeometryError(f"expected (..., 3, 3) matrices, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix has non-finite entries")
    batch = a.shape[:-2]
    a = a.reshape(-1, 3, 3)
    # unique entries and eigenvector components as contiguous 1-D arrays
    m = {(i, j): a[:, i, j].copy() for i in range(3) for j in range(i, 3)}
    ent = lambda i, j: m[(i, j) if i <= j else (j, i)]
    v = [[np.full(len(a), float(i == j)) for j in range(3)] for i in range(3)]
    limit = tol * np.sqrt((a * a).sum(axis=(1, 2)))
    for _ in range(max_sweeps):
        off = np.sqrt(m[0, 1] ** 2 + m[0, 2] ** 2 + m[1, 2] ** 2)
        active = off > limit
        if not active.any():
            break
        for p, q in _PAIRS:
            r = 3 - p - q
            apq = m[p, q]
            rot = active & (apq != 0.0)
            if not rot.any():
                continue
            app, aqq = m[p, p], m[q, q]
            theta = (aqq - app) / (2.0 * np.where(rot, apq, 1.0))
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(rot, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            arp, arq = ent(r, p), ent(r, q)
            m[p, p] = app - t * apq
            m[q, q] = aqq + t * apq
            m[p, q] = np.where(rot, 0.0, apq)
            m[min(r, p), max(r, p)] = c * arp - sn * arq
            m[min(r, q), max(r, q)] = sn * arp + c * arq
            for row in v:
                vp, vq = row[p], row[q]
                row[p] = c * vp - sn * vq
                row[q] = sn * vp + c * vq
    evals = np.stack([m[0, 0], m[1, 1], m[2, 2]], axis=1)
    v = np.stack([np.stack(row, axis=1) for row in v], axis=1)
    order = np.argsort(evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    evecs = np.take_along_axis(v, order[:, None, :], axis=2)
    return evals.reshape(batch + (3,)), evecs.reshape(batch + (3, 3))


def smallest_eigenvector(s) -> Axis:
    """Unit eigenvector of the smallest eigenvalue; ``eigengap`` = lambda_2 - lambda_3."""
    evals, evecs = jacobi_eigh(s)
    return Axis(evecs[..., :, 0], evals[..., 0], evals[..., 1] - evals[..., 0])


# ---------------------------------------------------------------- sign rule


def _first_nonzero_positive(d):
    first = np.take_along_axis(d, np.argmax(d != 0, axis=-1)[..., None], axis=-1)
    return np.where(first < 0, -d, d)


def _orient(direction, offsets, w):
    """Flip so the weighted projection of the offsets is <= 0; returns (dir, margin)."""
    proj = (w * (offsets @ direction[..., None])[..., 0]).sum(axis=-1)
    scale = (w * np.linalg.norm(offsets, axis=-1)).sum(axis=-1)
    flipped = np.where((proj > 0)[..., None], -direction, direction)
    flipped = np.where((proj == 0)[..., None], _first_nonzero_positive(direction), flipped)
    margin = np.abs(proj) / np.where(scale > 0, scale, 1.0)
    return flipped, margin


def disambiguate_sign(a: Axis, p, neighbors, w) -> Axis:
    """Point the axis away from the weighted neighbor mass.

    Exact zero projection keeps the orientation whose first nonzero component
    is positive.
    """
    offsets = np.asarray(neighbors, dtype=np.float64) - np.asarray(p, dtype=np.float64)[..., None, :]
    direction, margin = _orient(a.direction, offsets, np.asarray(w))
    return Axis(direction, a.smallest_eigenvalue, a.eigengap, margin, a.degenerate_weights, a.scale)


def local_axis(p, neighbors) -> Axis:
    """Weights, covariance, smallest eigenvector and sign rule for one or many neighborhoods."""
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(neighbors, dtype=np.float64)
    dist = np.linalg.norm(x - p[..., None, :], axis=-1)
    w, degenerate = _weights_from_dist(dist)
    axis = smallest_eigenvector(weighted_covariance(p, x, w))
    axis = disambiguate_sign(axis, p, x, w)
    scale = (dist ** 2).mean(axis=-1)
    return Axis(axis.direction, axis.smallest_eigenvalue, axis.eigengap, axis.sign_margin,
                degenerate, np.where(scale > 0, scale, 1.0))


def compute_lra(cloud: PointCloud, support_k: int = 16, use_normals: bool = False) -> Axis:
    """Local reference axis at every point of ``cloud``.

    The support is the ``support_k`` nearest points (the point itself included).
    With ``use_normals`` the stored normals are returned unchanged.
    """
    if use_normals:
        if cloud.normals is None:
            raise GeometryError("cloud has no normals to use as reference axes")
        n = len(cloud)
        return Axis(cloud.normals, np.zeros(n), np.full(n, np.inf), np.full(n, np.inf),
                    np.zeros(n, dtype=bool), np.ones(n))
    if support_k < 3:
        raise GeometryError("support_k must be at least 3")
    pts = cloud.points
    k = min(support_k, len(pts))
    idx = knn_query(pts, pts, k)
    axis = local_axis(pts, pts[idx])
    return Axis(axis.direction, axis.smallest_eigenvalue, axis.eigengap,
                axis.sign_margin, axis.degenerate_weights, _neighborhood_scale(pts, idx))


def _neighborhood_scale(pts, idx):
    d2 = ((pts[idx] - pts[:, None, :]) ** 2).sum(axis=-1)
    s = d2.mean(axis=-1)
    return np.where(s > 0, s, 1.0)


# -------------------------------------------------------------- pm and LRF


def compute_pm_axis(p, neighbors, strict: bool = True):
    """Unit vector from ``p`` toward the centroid of ``neighbors``.

    With ``strict`` a vanishing offset raises; otherwise ``(direction, degenerate)``
    is returned with degenerate rows set to +z.
    """
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(neighbors, dtype=np.float64)
    if x.shape[-2] < 1:
        raise GeometryError("pm axis needs at least one neighbor")
    v = x.mean(axis=-2) - p
    n = np.linalg.norm(v, axis=-1)
    degenerate = n < 1e-12
    if strict:
        if np.any(degenerate):
            raise DegenerateAxisError("neighbor centroid coincides with the reference point")
        return v / n[..., None]
    out = np.where(degenerate[..., None], np.array([0.0, 0.0, 1.0]),
                   v / np.where(degenerate, 1.0, n)[..., None])
    return out, degenerate


def pm_axes(cloud: PointCloud, support_k: int = 16) -> Axis:
    """pm reference vector at every point, in the same container as LRAs."""
    pts = cloud.points
    idx = knn_query(pts, pts, min(support_k, len(pts)))
    direction, degenerate = compute_pm_axis(pts, pts[idx], strict=False)
    offset = np.linalg.norm(pts[idx].mean(axis=1) - pts, axis=1)
    scale = np.sqrt(_neighborhood_scale(pts, idx))
    n = len(pts)
    return Axis(direction, np.zeros(n), np.full(n, np.inf), offset / scale, degenerate, np.ones(n))


def compute_lrf(p, neighbors):
    """Right-handed frame (columns x, y, z): z = oriented LRA, x = oriented dominant axis."""
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(neighbors, dtype=np.float64)
    offsets = x - p[..., None, :]
    w, _ = _weights_from_dist(np.linalg.norm(offsets, axis=-1))
    evals, evecs = jacobi_eigh(weighted_covariance(p, x, w))
    if np.any(evals[..., 1] <= 1e-12 * np.maximum(evals[..., 2], 1e-300)):
        raise GeometryError("support is collinear; frame is rank deficient")
    z, _ = _orient(evecs[..., :, 0], offsets, w)
    xa, _ = _orient(evecs[..., :, 2], offsets, w)
    y = np.cross(z, xa)
    return np.stack([xa, y, z], axis=-1)


# ------------------------------------------------------------------- errors


def axis_error(a, b):
    """Sign-folded angle between two axes, in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    # atan2 form stays accurate near 0 where arccos(|cos|) loses half the digits
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.abs((a * b).sum(axis=-1))
    return np.degrees(np.arctan2(cross, dot))


def frame_error(f, g):
    """Rotation angle between two frames, ``arccos((tr(F G^T) - 1) / 2)`` in degrees."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    tr = np.einsum("...ij,...ij->...", f, g)
    return np.degrees(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))
