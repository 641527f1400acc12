"""Clockwise neighbor ordering and the handcrafted rotation-invariant features.

Column layout of an IRIF row: ``d, phi, a0, a1, a2, b0, b1, b2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError
from .lra import DegenerateAxisError

IRIF_COLUMNS = ("d", "phi", "a0", "a1", "a2", "b0", "b1", "b2")

# Ablation presets. B keeps the six signed angles only (phi and d both off).
MODEL_MASKS = {
    "A": ("d", "phi", "a0", "a1", "a2", "b0", "b1", "b2"),
    "B": ("a0", "a1", "a2", "b0", "b1", "b2"),
    "C": ("d", "phi"),
    "D": ("d", "a0", "a1", "a2"),
}

_PROJ_EPS = 1e-10
_TWO_PI = 2.0 * np.pi


class OrderingError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class OrderedNeighborhood:
    center: np.ndarray
    center_axis: np.ndarray
    points: np.ndarray
    axes: np.ndarray
    order: np.ndarray
    angles: np.ndarray

    def __len__(self):
        return self.points.shape[-2]


@dataclass(frozen=True, eq=False)
class IrifMatrix:
    values: np.ndarray
    degenerate: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class FeatureMask:
    enabled: tuple

    def __post_init__(self):
        flags = tuple(bool(f) for f in self.enabled)
        if len(flags) != len(IRIF_COLUMNS):
            raise ValueError(f"mask needs {len(IRIF_COLUMNS)} flags, got {len(flags)}")
        if not any(flags):
            raise ValueError("feature mask must enable at least one attribute")
        object.__setattr__(self, "enabled", flags)

    @classmethod
    def from_names(cls, names) -> "FeatureMask":
        names = set(names)
        unknown = names - set(IRIF_COLUMNS)
        if unknown:
            raise ValueError(f"unknown IRIF attributes {sorted(unknown)}")
        return cls(tuple(c in names for c in IRIF_COLUMNS))

    @classmethod
    def model(cls, name: str) -> "FeatureMask":
        try:
            return cls.from_names(MODEL_MASKS[name.upper()])
        except KeyError:
            raise ValueError(f"unknown ablation model {name!r}") from None

    @property
    def columns(self) -> tuple:
        return tuple(c for c, on in zip(IRIF_COLUMNS, self.enabled) if on)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.enabled)

    def __len__(self):
        return sum(self.enabled)


FULL_MASK = FeatureMask((True,) * len(IRIF_COLUMNS))


def angle_between(a, b):
    """Unsigned angle in [0, pi]; equal to arccos of the clamped normalized dot.

    Evaluated as ``atan2(|a x b|, a . b)``, which keeps full precision near 0
    and pi. A zero-length input yields 0.
    """
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = (a * b).sum(axis=-1)
    return np.arctan2(cross, dot)


def clockwise_angles(center, center_axis, neighbors):
    """Ordering keys for neighborhoods: returns ``(order, angles)``.

    Angles are measured clockwise as seen from the +axis side, starting at the
    farthest neighbor x0. Broadcasts over leading dimensions.
    """
    off = np.asarray(neighbors, dtype=np.float64) - np.asarray(center, dtype=np.float64)[..., None, :]
    n = np.asarray(center_axis, dtype=np.float64)[..., None, :]
    dist = np.linalg.norm(off, axis=-1)
    proj = off - (off * n).sum(axis=-1, keepdims=True) * n
    pnorm = np.linalg.norm(proj, axis=-1)
    usable = pnorm >= _PROJ_EPS
    if not usable.any(axis=-1).all():
        raise OrderingError("every neighbor projects onto the center; ordering is undefined")
    # x0: farthest neighbor whose projection is usable; argmax keeps the smaller index on ties
    x0 = np.argmax(np.where(usable, dist, -np.inf), axis=-1)
    e1 = np.take_along_axis(proj, x0[..., None, None], axis=-2) / \
        np.take_along_axis(pnorm, x0[..., None], axis=-1)[..., None]
    e2 = np.cross(n, e1)
    theta = np.arctan2((proj * e2).sum(axis=-1), (proj * e1).sum(axis=-1))
    cw = np.mod(-theta, _TWO_PI)
    cw = np.where(cw >= _TWO_PI, 0.0, cw)
    cw = np.where(usable, cw, 0.0)
    k = dist.shape[-1]
    idx = np.broadcast_to(np.arange(k), dist.shape)
    is_x0 = idx == x0[..., None]
    cw = np.where(is_x0, 0.0, cw)
    order = np.lexsort((idx, dist, ~is_x0, cw), axis=-1)
    return order, np.take_along_axis(cw, order, axis=-1)


def clockwise_order(p, lra_p, neighbors, neighbor_axes=None) -> OrderedNeighborhood:
    """Sort the neighbors of ``p`` clockwise on its tangent disk.

    For a single neighborhood (``neighbors`` of shape ``(K, 3)``) points
    coincident with ``p`` are dropped first; ``order`` indexes the input list.
    """
    p = np.asarray(p, dtype=np.float64)
    lra_p = np.asarray(lra_p, dtype=np.float64)
    x = np.asarray(neighbors, dtype=np.float64)
    axes = None if neighbor_axes is None else np.asarray(neighbor_axes, dtype=np.float64)
    keep = np.arange(x.shape[-2])
    if x.ndim == 2:
        keep = np.flatnonzero(np.linalg.norm(x - p, axis=-1) >= 1e-12)
        x = x[keep]
        axes = None if axes is None else axes[keep]
    elif np.any(np.linalg.norm(x - p[..., None, :], axis=-1) < 1e-12):
        raise OrderingError("neighbor coincides with the reference point")
    if x.shape[-2] < 2:
        raise OrderingError("need at least 2 neighbors distinct from the reference point")
    order, angles = clockwise_angles(p, lra_p, x)
    pts = np.take_along_axis(x, order[..., None], axis=-2)
    if axes is not None:
        axes = np.take_along_axis(axes, order[..., None], axis=-2)
    return OrderedNeighborhood(p, lra_p, pts, axes, keep[order] if x.ndim == 2 else order, angles)


def signed_flags(a0, a1, b0, b1):
    """``S_a = +1`` iff ``a0 <= a1``; ``S_b = +1`` iff ``b0 <= b1``."""
    sa = np.where(np.asarray(a0) <= np.asarray(a1), 1.0, -1.0)
    sb = np.where(np.asarray(b0) <= np.asarray(b1), 1.0, -1.0)
    return sa, sb


def irif_features(center, center_axis, points, axes):
    """IRIF rows for clockwise-ordered neighbors. Returns ``(values, degenerate)``.

    ``values`` has shape ``(..., K, 8)``; the successor of the last neighbor is x0.
    """
    p = np.asarray(center, dtype=np.float64)[..., None, :]
    lp = np.asarray(center_axis, dtype=np.float64)[..., None, :]
    x = np.asarray(points, dtype=np.float64)
    lx = np.asarray(axes, dtype=np.float64)
    xn = np.roll(x, -1, axis=-2)
    ln = np.roll(lx, -1, axis=-2)
    to_p = p - x
    to_next = xn - x
    d = np.linalg.norm(to_p, axis=-1)
    phi = angle_between(p - xn, to_p)
    a0 = angle_between(lx, to_p)
    a1 = angle_between(np.broadcast_to(lp, to_p.shape), to_p)
    b0 = angle_between(lx, to_next)
    b1 = angle_between(ln, to_next)
    degenerate = np.linalg.norm(to_next, axis=-1) < 1e-12
    b0 = np.where(degenerate, 0.0, b0)
    b1 = np.where(degenerate, 0.0, b1)
    sa, sb = signed_flags(a0, a1, b0, b1)
    # + 0.0 turns a signed -0.0 into +0.0
    a2 = sa * angle_between(lx, np.broadcast_to(lp, lx.shape)) + 0.0
    b2 = np.where(degenerate, 0.0, sb * angle_between(lx, ln)) + 0.0
    return np.stack([d, phi, a0, a1, a2, b0, b1, b2], axis=-1), degenerate


def compute_irif(hood: OrderedNeighborhood) -> IrifMatrix:
    if hood.axes is None:
        raise GeometryError("neighborhood carries no per-neighbor axes")
    values, degenerate = irif_features(hood.center, hood.center_axis, hood.points, hood.axes)
    return IrifMatrix(values, degenerate)


def compute_rif_legacy(p, m, x):
    """``[|x - p|, |x - m|, angle at p (pm vs px), angle at m (mp vs mx)]``."""
    p = np.asarray(p, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    pm = m - p
    if np.any(np.linalg.norm(pm, axis=-1) < 1e-12):
        raise DegenerateAxisError("reference vector pm vanishes")
    d0 = np.linalg.norm(x - p, axis=-1)
    d1 = np.linalg.norm(x - m, axis=-1)
    if np.any(d0 < 1e-12) or np.any(d1 < 1e-12):
        raise GeometryError("x must be distinct from p and m")
    a0 = angle_between(pm, x - p)
    a1 = angle_between(-pm, x - m)
    return np.stack([d0, d1, a0, a1], axis=-1)


def apply_feature_mask(f, mask: FeatureMask):
    values = f.values if isinstance(f, IrifMatrix) else np.asarray(f)
    if not isinstance(mask, FeatureMask):
        mask = FeatureMask(tuple(mask))
    return values[..., mask.indices]
