"""The rotation-invariant convolution operator and the classification / segmentation networks.

Geometry (sampling, neighborhoods, ordering, handcrafted features) depends only
on the input cloud, so it is computed once per cloud into a ``GeometryPlan``;
the learnable part then runs on stacked plans.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nncore as nn
from .geometry import GeometryError, PointCloud, farthest_point_sample, knn_query
from .irif import FULL_MASK, FeatureMask, clockwise_angles, irif_features
from .lra import Axis, compute_lra, pm_axes

AXIS_SOURCES = ("lra", "normals", "pm")
FEATURE_KINDS = ("irif", "xyz")

# a neighborhood axis counts as ambiguous below these relative margins; both sit
# many orders of magnitude above float64 rounding of a rigid motion
GAP_TOL = 1e-6
SIGN_TOL = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    out_points: int
    out_dims: int
    neighbors_k: int
    kernel_size: int = 1
    lift_dims: int = 16

    def __post_init__(self):
        if self.neighbors_k < 2:
            raise ConfigError("neighbors_k must be at least 2")
        if self.kernel_size not in (1, 3, 5, 7):
            raise ConfigError("kernel_size must be one of 1, 3, 5, 7")
        if self.out_points < 1 or self.out_dims < 1 or self.lift_dims < 1:
            raise ConfigError("layer sizes must be positive")
        # K - 1 ordered neighbors remain once the center is dropped
        if self.neighbors_k - 1 < self.kernel_size:
            raise ConfigError("kernel_size exceeds the number of ordered neighbors")


@dataclass(frozen=True)
class DecoderStage:
    out_dims: int
    neighbors_k: int
    mlp_dims: Optional[int] = None
    kernel_size: int = 1
    lift_dims: int = 16

    def as_layer(self, points: int) -> LayerSpec:
        return LayerSpec(points, self.out_dims, self.neighbors_k, self.kernel_size, self.lift_dims)


@dataclass(frozen=True)
class NetworkConfig:
    task: str = "classify"
    in_points: int = 1024
    layers: tuple = ()
    decoder: tuple = ()
    head: tuple = (512, 256)
    num_classes: int = 40
    mask: FeatureMask = FULL_MASK
    axis_source: str = "lra"
    features: str = "irif"
    support_k: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.axis_source not in AXIS_SOURCES:
            raise ConfigError(f"axis_source must be one of {AXIS_SOURCES}")
        if self.features not in FEATURE_KINDS:
            raise ConfigError(f"features must be one of {FEATURE_KINDS}")
        if not self.layers:
            raise ConfigError("at least one layer is required")
        n = self.in_points
        for spec in self.layers:
            if spec.out_points > n:
                raise ConfigError(f"layer keeps {spec.out_points} points out of {n}")
            if spec.neighbors_k > n:
                raise ConfigError(f"neighbors_k={spec.neighbors_k} exceeds the {n} available points")
            n = spec.out_points
        if self.task == "classify" and self.layers[-1].out_points != 1:
            raise ConfigError("a classifier must end with a single representative")
        if self.task == "segment":
            if len(self.decoder) != len(self.layers):
                raise ConfigError("segmenter needs one decoder stage per encoder layer")
            if any(s.mlp_dims is None for s in self.decoder[:-1]):
                raise ConfigError("every decoder stage but the last needs mlp_dims")
            targets = [s.out_points for s in self.layers[:-1]][::-1] + [self.in_points]
            for stage, npts in zip(self.decoder, targets):
                if stage.neighbors_k > npts:
                    raise ConfigError(f"decoder neighbors_k={stage.neighbors_k} exceeds {npts} points")

    @property
    def feature_dims(self) -> int:
        return len(self.mask) if self.features == "irif" else 3

    def with_kernel(self, k: int) -> "NetworkConfig":
        return replace(self, layers=tuple(replace(s, kernel_size=k) for s in self.layers))


def full_classifier(num_classes=40, kernel_size=1, lift_dims=8, **kw) -> NetworkConfig:
    """Full-size classifier: 1024 -> 1024 -> 512 -> 256 -> 128 -> 1 points."""
    rows = [(1024, 32, 8), (512, 64, 16), (256, 128, 32), (128, 256, 64), (1, 512, 128)]
    layers = tuple(LayerSpec(p, d, k, kernel_size, lift_dims) for p, d, k in rows)
    return NetworkConfig("classify", 1024, layers, num_classes=num_classes, **kw)


def full_segmenter(num_classes=50, in_points=2048, lift_dims=16, **kw) -> NetworkConfig:
    rows = [(512, 64, 8), (256, 128, 16), (128, 256, 32), (64, 512, 64)]
    layers = tuple(LayerSpec(p, d, k, 1, lift_dims) for p, d, k in rows)
    decoder = (DecoderStage(512, 8, 512, lift_dims=lift_dims),
               DecoderStage(512, 16, 256, lift_dims=lift_dims),
               DecoderStage(256, 32, 128, lift_dims=lift_dims),
               DecoderStage(num_classes, 32, None, lift_dims=lift_dims))
    return NetworkConfig("segment", in_points, layers, decoder, num_classes=num_classes, **kw)


def desk_classifier(num_classes=6, in_points=512, **kw) -> NetworkConfig:
    """Reduced classifier used for the desk-scale experiments."""
    rows = [(256, 32, 8, 16), (128, 48, 16, 16), (64, 64, 16, 16), (32, 96, 16, 16), (1, 128, 32, 32)]
    kernel = kw.pop("kernel_size", 1)
    layers = tuple(LayerSpec(p, d, k, kernel, lift) for p, d, k, lift in rows)
    return NetworkConfig("classify", in_points, layers, head=(64, 32), num_classes=num_classes, **kw)


def desk_segmenter(num_classes=2, in_points=512, **kw) -> NetworkConfig:
    rows = [(256, 32, 8), (128, 64, 16), (64, 96, 16), (32, 128, 16)]
    layers = tuple(LayerSpec(p, d, k, 1, 16) for p, d, k in rows)
    decoder = (DecoderStage(96, 8, 96), DecoderStage(64, 8, 64),
               DecoderStage(48, 16, 32), DecoderStage(num_classes, 16, None))
    return NetworkConfig("segment", in_points, layers, decoder, head=(), num_classes=num_classes, **kw)


# ------------------------------------------------------------ geometry plans


@dataclass
class LayerPlan:
    """Neighborhood structure of one operator application.

    ``reps`` index the representatives in the layer's input point set;
    ``neighbors`` (M, K-1) index their clockwise-ordered neighbors there.
    """

    reps: np.ndarray
    neighbors: np.ndarray
    features: np.ndarray
    unstable: bool = False


@dataclass
class InterpPlan:
    index: np.ndarray
    weight: np.ndarray


@dataclass
class GeometryPlan:
    layers: list
    decoder: list = field(default_factory=list)
    interp: list = field(default_factory=list)
    level_points: list = field(default_factory=list)
    unstable: bool = False


def reference_axes(cloud: PointCloud, source: str, support_k: int) -> Axis:
    if source == "lra":
        return compute_lra(cloud, support_k)
    if source == "normals":
        return compute_lra(cloud, use_normals=True)
    if source == "pm":
        return pm_axes(cloud, support_k)
    raise ConfigError(f"unknown axis source {source!r}")


def neighborhood_plan(points, axes, unstable_axes, reps, k, cfg: NetworkConfig) -> LayerPlan:
    """kNN (self excluded), clockwise ordering and per-neighbor features for ``reps``."""
    n = len(points)
    if k > n:
        raise ConfigError(f"neighbors_k={k} exceeds the {n} available points")
    centers = points[reps]
    try:
        nbr = knn_query(points, centers, k - 1, exclude_coincident=True)
    except GeometryError as err:
        raise ConfigError(str(err)) from None
    order, _ = clockwise_angles(centers, axes[reps], points[nbr])
    nbr = np.take_along_axis(nbr, order, axis=1)
    if cfg.features == "irif":
        feats, degenerate = irif_features(centers, axes[reps], points[nbr], axes[nbr])
        feats = feats[..., cfg.mask.indices]
        unstable = bool(degenerate.any())
    else:
        feats = points[nbr] - centers[:, None, :]
        unstable = False
    unstable = unstable or bool(unstable_axes[reps].any() or unstable_axes[nbr].any())
    return LayerPlan(reps, nbr, feats, unstable)


def interpolation_plan(coarse, fine) -> InterpPlan:
    """Inverse-distance weights over the 3 nearest coarse points; exact hits are copied."""
    k = min(3, len(coarse))
    idx = knn_query(coarse, fine, k)
    d = np.linalg.norm(coarse[idx] - fine[:, None, :], axis=-1)
    w = 1.0 / (d + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    hit = d[:, 0] == 0
    w[hit] = 0.0
    w[hit, 0] = 1.0
    return InterpPlan(idx, w)


def build_plan(cloud: PointCloud, cfg: NetworkConfig) -> GeometryPlan:
    if len(cloud) != cfg.in_points:
        raise ConfigError(f"network expects {cfg.in_points} points, cloud has {len(cloud)}")
    axes_info = reference_axes(cloud, cfg.axis_source, cfg.support_k)
    axes = axes_info.direction
    unstable_axes = axes_info.unstable(GAP_TOL, SIGN_TOL)
    if cfg.axis_source == "pm":
        unstable_axes = unstable_axes | axes_info.degenerate_weights
    current = np.arange(len(cloud))
    levels = [current]
    plans = []
    for spec in cfg.layers:
        pts = cloud.points[current]
        reps = farthest_point_sample(pts, spec.out_points)
        plans.append(neighborhood_plan(pts, axes[current], unstable_axes[current], reps,
                                       spec.neighbors_k, cfg))
        current = current[reps]
        levels.append(current)
    plan = GeometryPlan(plans, level_points=levels)
    if cfg.task == "segment":
        # decoder walks back up: level L-1, ..., 0
        for stage, (coarse, fine) in zip(cfg.decoder, zip(levels[:0:-1], levels[-2::-1])):
            cpts, fpts = cloud.points[coarse], cloud.points[fine]
            plan.interp.append(interpolation_plan(cpts, fpts))
            reps = np.arange(len(fine))
            plan.decoder.append(neighborhood_plan(fpts, axes[fine], unstable_axes[fine], reps,
                                                  stage.neighbors_k, cfg))
    plan.unstable = any(p.unstable for p in plan.layers + plan.decoder)
    return plan


def stack_plans(plans):
    """Batch per-cloud plans into arrays with a leading batch axis."""
    def stack_layers(items):
        return [LayerPlan(np.stack([p.reps for p in group]),
                          np.stack([p.neighbors for p in group]),
                          np.stack([p.features for p in group]),
                          any(p.unstable for p in group))
                for group in zip(*items)]

    batch = GeometryPlan(stack_layers([p.layers for p in plans]))
    if plans[0].decoder:
        batch.decoder = stack_layers([p.decoder for p in plans])
        batch.interp = [InterpPlan(np.stack([i.index for i in group]), np.stack([i.weight for i in group]))
                        for group in zip(*[p.interp for p in plans])]
    batch.unstable = any(p.unstable for p in plans)
    return batch


# --------------------------------------------------------------- operators


class RIConvOperator(nn.Module):
    """Lift the handcrafted features, join previous-layer features, scale, convolve, max-pool."""

    def __init__(self, spec: LayerSpec, feature_dims: int, prev_dims: int, rng, out_norm=True):
        self.spec = spec
        self.prev_dims = prev_dims
        # biases directly in front of a BatchNorm are redundant and left out
        self.lift = nn.Affine(feature_dims, spec.lift_dims, rng, bias=False)
        self.lift_norm = nn.BatchNorm(spec.lift_dims)
        width = spec.lift_dims + prev_dims
        self.scale = nn.Scale(width)
        self.conv = nn.Conv1d(width, spec.out_dims, spec.kernel_size, rng, bias=not out_norm)
        self.out_norm = nn.BatchNorm(spec.out_dims) if out_norm else None

    def __call__(self, plan: LayerPlan, f_prev=None) -> nn.Tensor:
        f = nn.relu(self.lift_norm(self.lift(plan.features)))
        if self.prev_dims:
            if f_prev is None:
                raise ConfigError("operator expects previous-layer features")
            f = nn.concat([nn.gather_rows(f_prev, plan.neighbors), f], axis=-1)
        f = self.conv(self.scale(f))
        f = nn.maxpool_set(f, axis=-2)
        if self.out_norm is not None:
            f = nn.relu(self.out_norm(f))
        return f


def riconvpp_operator(op: RIConvOperator, plan: LayerPlan, f_prev=None) -> nn.Tensor:
    return op(plan, f_prev)


def feature_interpolate(features, plan: InterpPlan) -> nn.Tensor:
    """Spread (B, Nc, C) coarse features onto fine points with precomputed weights."""
    gathered = nn.gather_rows(nn.as_tensor(features), plan.index)
    return (gathered * plan.weight[..., None]).sum(axis=-2)


class Classifier(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        if cfg.task != "classify":
            raise ConfigError("Classifier needs a classify config")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.ops = []
        prev = 0
        for spec in cfg.layers:
            self.ops.append(RIConvOperator(spec, cfg.feature_dims, prev, rng))
            prev = spec.out_dims
        widths = (prev,) + tuple(cfg.head)
        self.head = nn.MLP(widths, rng)
        self.out = nn.Affine(widths[-1], cfg.num_classes, rng)

    def plan(self, cloud: PointCloud) -> GeometryPlan:
        return build_plan(cloud, self.cfg)

    def forward_plan(self, batch: GeometryPlan) -> nn.Tensor:
        f = None
        for op, lp in zip(self.ops, batch.layers):
            f = op(lp, f)
        b = f.shape[0]
        return self.out(self.head(f.reshape(b, -1)))

    def __call__(self, clouds) -> nn.Tensor:
        return self.forward_plan(stack_plans([self.plan(c) for c in clouds]))


class Segmenter(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        if cfg.task != "segment":
            raise ConfigError("Segmenter needs a segment config")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = []
        prev = 0
        skips = []
        for spec in cfg.layers:
            self.encoder.append(RIConvOperator(spec, cfg.feature_dims, prev, rng))
            prev = spec.out_dims
            skips.append(prev)
        skip_dims = skips[:-1][::-1] + [0]
        targets = [s.out_points for s in cfg.layers[:-1]][::-1] + [cfg.in_points]
        self.decoder = []
        self.mixers = []
        for i, (stage, skip, npts) in enumerate(zip(cfg.decoder, skip_dims, targets)):
            last = i == len(cfg.decoder) - 1
            self.decoder.append(RIConvOperator(stage.as_layer(npts), cfg.feature_dims, prev, rng,
                                               out_norm=not last))
            prev = stage.out_dims
            if not last:
                self.mixers.append(nn.MLP((prev + skip, stage.mlp_dims), rng))
                prev = stage.mlp_dims
        if cfg.decoder[-1].out_dims != cfg.num_classes:
            raise ConfigError("last decoder stage must output num_classes channels")

    def plan(self, cloud: PointCloud) -> GeometryPlan:
        return build_plan(cloud, self.cfg)

    def forward_plan(self, batch: GeometryPlan) -> nn.Tensor:
        f = None
        skips = []
        for op, lp in zip(self.encoder, batch.layers):
            f = op(lp, f)
            skips.append(f)
        skips = skips[:-1][::-1]
        for i, (op, lp, ip) in enumerate(zip(self.decoder, batch.decoder, batch.interp)):
            f = op(lp, feature_interpolate(f, ip))
            if i < len(self.mixers):
                f = self.mixers[i](nn.concat([f, skips[i]], axis=-1))
        return f

    def __call__(self, clouds) -> nn.Tensor:
        return self.forward_plan(stack_plans([self.plan(c) for c in clouds]))


def build_classifier(cfg: NetworkConfig) -> Classifier:
    return Classifier(cfg)


def build_segmenter(cfg: NetworkConfig) -> Segmenter:
    return Segmenter(cfg)


def build_network(cfg: NetworkConfig):
    return Classifier(cfg) if cfg.task == "classify" else Segmenter(cfg)
