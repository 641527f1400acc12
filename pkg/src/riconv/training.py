"""Desk-scale datasets, the training loop and evaluation under rotation regimes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nncore as nn
from .geometry import (
    SHAPE_KINDS,
    PointCloud,
    add_gaussian_noise,
    apply_rigid_transform,
    random_rotation,
    synth_shape,
)
from .model import stack_plans

log = logging.getLogger(__name__)

ROTATION_MODES = ("none", "z", "so3")


@dataclass
class Dataset:
    """Clouds with one label per cloud (classification) or per point (segmentation)."""

    clouds: list
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.clouds)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([self.clouds[i] for i in idx], self.labels[idx], self.num_classes)


def _instance_params(kind, rng):
    if kind == "cube":
        return {"aspect": rng.uniform(0.7, 1.3, size=3)}
    if kind == "cylinder":
        return {"aspect": rng.uniform(0.8, 1.6)}
    if kind == "cone":
        return {"aspect": rng.uniform(1.2, 2.2)}
    if kind == "torus":
        return {"major": 0.35, "minor": 0.35 * rng.uniform(0.3, 0.55)}
    if kind == "plane":
        return {"aspect": rng.uniform(0.6, 1.0)}
    return {}


def make_primitive_dataset(n_train=100, n_test=50, n_points=512, jitter=0.004, seed=0,
                           kinds=SHAPE_KINDS):
    """Six primitive classes in canonical (z-up) pose with jittered proportions.

    A small Gaussian jitter on the coordinates keeps every neighborhood
    generic, so reference axes and their signs are decided by geometry rather
    than by rounding. Returns ``(train, test)``.
    """
    rng = np.random.default_rng(seed)
    splits = []
    for count in (n_train, n_test):
        clouds, labels = [], []
        for label, kind in enumerate(kinds):
            for _ in range(count):
                cloud = synth_shape(kind, n_points, rng, _instance_params(kind, rng))
                cloud = add_gaussian_noise(cloud, jitter, rng)
                clouds.append(PointCloud(cloud.points, cloud.normals, label))
                labels.append(label)
        splits.append(Dataset(clouds, np.array(labels), len(kinds)))
    return splits[0], splits[1]


def make_part_dataset(n_train=40, n_test=20, n_points=512, jitter=0.003, seed=0):
    """Cylinders and cones labeled per point: 0 = lateral surface, 1 = flat cap."""
    rng = np.random.default_rng(seed)
    splits = []
    for count in (n_train, n_test):
        clouds, labels = [], []
        for i in range(count):
            kind = ("cylinder", "cone")[i % 2]
            cloud = synth_shape(kind, n_points, rng, _instance_params(kind, rng))
            part = (np.abs(cloud.normals[:, 2]) > 0.999).astype(np.int64)
            cloud = add_gaussian_noise(cloud, jitter, rng)
            clouds.append(cloud)
            labels.append(part)
        splits.append(Dataset(clouds, np.stack(labels), 2))
    return splits[0], splits[1]


def rotate(cloud: PointCloud, mode: str, seed) -> PointCloud:
    if mode == "none":
        return cloud
    return apply_rigid_transform(cloud, random_rotation(mode, seed))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    network: object
    history: list = field(default_factory=list)


def _batches(n, batch, rng):
    order = rng.permutation(n)
    out = [order[i:i + batch] for i in range(0, n, batch)]
    # a trailing batch of one cannot be batch-normalized
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def batch_loss(network, clouds, labels):
    logits = network.forward_plan(stack_plans([network.plan(c) for c in clouds]))
    return nn.softmax_cross_entropy(logits, labels), logits


def train(network, dataset: Dataset, epochs: int, batch: int = 16, lr: float = 1e-3, seed: int = 0,
          augment: str = "z", test: Optional[Dataset] = None, test_mode: Optional[str] = None,
          callback=None) -> TrainResult:
    """Adam on shuffled mini-batches; every sample gets a fresh rotation each epoch.

    ``history`` holds one dict per epoch with ``train_loss``, ``train_acc``
    and, when ``test`` is given, ``test_metric``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if batch > len(dataset):
        raise ValueError(f"batch size {batch} exceeds dataset size {len(dataset)}")
    if batch < 2:
        raise ValueError("batch size must be at least 2 for batch normalization")
    if augment not in ROTATION_MODES:
        raise ValueError(f"augment must be one of {ROTATION_MODES}")
    if np.any(dataset.labels < 0) or np.any(dataset.labels >= network.cfg.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    opt = nn.Adam(network.parameters(), lr=lr)
    result = TrainResult(network)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng((seed, epoch))
        network.train()
        losses, correct, seen = [], 0, 0
        for bidx in _batches(len(dataset), batch, rng):
            clouds = [rotate(dataset.clouds[i], augment, (seed, epoch, int(i))) for i in bidx]
            opt.zero_grad()
            loss, logits = batch_loss(network, clouds, dataset.labels[bidx])
            loss.backward()
            opt.step()
            losses.append(float(loss.data) * len(bidx))
            pred = logits.data.argmax(axis=-1)
            correct += int((pred == dataset.labels[bidx]).sum())
            seen += int(np.size(dataset.labels[bidx]))
        row = {"epoch": epoch, "train_loss": sum(losses) / len(dataset), "train_acc": correct / seen}
        if test is not None:
            ev = evaluate(network, test, test_mode or augment, seed=seed + 7919 * epoch)
            row["test_metric"] = ev.metric
        result.history.append(row)
        log.info("epoch %d %s", epoch, row)
        if callback is not None:
            callback(row)
    network.eval()
    return result


def initial_loss(network, dataset: Dataset, augment="none", seed=0, batch=None) -> float:
    """Mean training-mode loss of the current weights, without updating anything."""
    network.train()
    saved = [(bn.running_mean.copy(), bn.running_var.copy())
             for bn in network.modules() if isinstance(bn, nn.BatchNorm)]
    batch = batch or len(dataset)
    total = 0.0
    for start in range(0, len(dataset), batch):
        idx = np.arange(start, min(start + batch, len(dataset)))
        clouds = [rotate(dataset.clouds[i], augment, (seed, 0, int(i))) for i in idx]
        loss, _ = batch_loss(network, clouds, dataset.labels[idx])
        total += float(loss.data) * len(idx)
    bns = [bn for bn in network.modules() if isinstance(bn, nn.BatchNorm)]
    for bn, (m, v) in zip(bns, saved):
        bn.running_mean[...] = m
        bn.running_var[...] = v
    return total / len(dataset)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    metric: float
    per_class: np.ndarray
    predictions: np.ndarray
    logits: np.ndarray
    unstable: np.ndarray
    task: str = "classify"

    @property
    def accuracy(self) -> float:
        return self.metric


def predict(network, clouds, batch: int = 32):
    """Eval-mode logits plus a per-cloud flag for ambiguous neighborhoods."""
    network.eval()
    out, flags = [], []
    for start in range(0, len(clouds), batch):
        plans = [network.plan(c) for c in clouds[start:start + batch]]
        flags.extend(p.unstable for p in plans)
        out.append(network.forward_plan(stack_plans(plans)).data)
    return np.concatenate(out), np.array(flags, dtype=bool)


def mean_iou(pred, labels, num_classes):
    """Per-class IoU accumulated over the whole split, then averaged over present classes."""
    ious = np.full(num_classes, np.nan)
    for c in range(num_classes):
        inter = np.sum((pred == c) & (labels == c))
        union = np.sum((pred == c) | (labels == c))
        if union:
            ious[c] = inter / union
    return float(np.nanmean(ious)), ious


def evaluate(network, dataset: Dataset, rotation_mode: str = "none", trials: int = 1, seed: int = 0,
             noise_sigma: float = 0.0) -> EvalResult:
    """Accuracy (classify) or mIoU (segment), each sample under fresh seeded rotations.

    With ``trials > 1`` every sample is evaluated that many times and all
    predictions enter the metric.
    """
    if rotation_mode not in ROTATION_MODES:
        raise ValueError(f"rotation_mode must be one of {ROTATION_MODES}")
    clouds, labels = [], []
    for t in range(trials):
        for i, cloud in enumerate(dataset.clouds):
            c = rotate(cloud, rotation_mode, (seed, t, i))
            if noise_sigma > 0:
                c = add_gaussian_noise(c, noise_sigma, (seed, t, i, 1))
            clouds.append(c)
            labels.append(dataset.labels[i])
    labels = np.asarray(labels)
    logits, unstable = predict(network, clouds)
    pred = logits.argmax(axis=-1)
    k = dataset.num_classes
    if network.cfg.task == "segment":
        metric, per_class = mean_iou(pred, labels, k)
        return EvalResult(metric, per_class, pred, logits, unstable, "segment")
    per_class = np.array([np.mean(pred[labels == c] == c) if np.any(labels == c) else np.nan
                          for c in range(k)])
    return EvalResult(float(np.mean(pred == labels)), per_class, pred, logits, unstable)
