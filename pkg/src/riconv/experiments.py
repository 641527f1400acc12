"""Experiment protocols: rotation-regime grid, noise sweep, ablation and axis repeatability."""

from __future__ import annotations

import csv
import glob
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_mask
from .geometry import (
    PointCloud,
    add_gaussian_noise,
    apply_rigid_transform,
    farthest_point_sample,
    knn_query,
    load_point_cloud,
    mean_nn_distance,
    normalize_unit_diameter,
    random_rotation,
    synth_shape,
    RigidTransform,
)
from .irif import IRIF_COLUMNS, clockwise_angles, irif_features
from .lra import axis_error, compute_lra, compute_lrf, compute_pm_axis, frame_error, local_axis
from .model import build_network, full_classifier
from .training import Dataset, evaluate, make_part_dataset, make_primitive_dataset, train

log = logging.getLogger(__name__)

RESULT_HEADER = ("experiment", "condition", "metric", "value", "seed")
HIST_EDGES = np.arange(0.0, 180.0 + 10.0, 10.0)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    condition: str
    metric: str
    value: float
    seed: int


class ResultTable:
    """Append-only list of ``(experiment, condition, metric, value, seed)`` rows."""

    def __init__(self, rows=()):
        self._rows = list(rows)

    def append(self, experiment, condition, metric, value, seed) -> None:
        self._rows.append(ResultRow(str(experiment), str(condition), str(metric), float(value), int(seed)))

    def extend(self, other: "ResultTable") -> None:
        self._rows.extend(other.rows)

    @property
    def rows(self) -> tuple:
        return tuple(self._rows)

    def __len__(self):
        return len(self._rows)

    def get(self, condition, metric, experiment=None) -> float:
        hits = [r.value for r in self._rows if r.condition == condition and r.metric == metric
                and (experiment is None or r.experiment == experiment)]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match ({experiment}, {condition}, {metric})")
        return hits[0]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESULT_HEADER)
            for r in self._rows:
                w.writerow((r.experiment, r.condition, r.metric, repr(r.value), r.seed))
        return path

    @classmethod
    def read_csv(cls, path) -> "ResultTable":
        table = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                table.append(row["experiment"], row["condition"], row["metric"], float(row["value"]),
                             int(row["seed"]))
        return table


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# ------------------------------------------------------------------ datasets


def _load_files(pattern, n_points, seed, labels=None):
    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        raise FileNotFoundError(f"no files match {pattern!r}")
    names = labels or sorted({Path(p).parent.name for p in paths})
    rng = np.random.default_rng(seed)
    clouds, ys = [], []
    for p in paths:
        cloud = load_point_cloud(p)
        if len(cloud) < n_points:
            raise ValueError(f"{p} has {len(cloud)} points, {n_points} needed")
        idx = np.sort(rng.choice(len(cloud), n_points, replace=False))
        label = names.index(Path(p).parent.name)
        cloud = normalize_unit_diameter(cloud.subset(idx))
        clouds.append(PointCloud(cloud.points, cloud.normals, label))
        ys.append(label)
    return Dataset(clouds, np.array(ys), len(names)), names


def build_datasets(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.kind == "primitives":
        return make_primitive_dataset(d.n_train, d.n_test, d.n_points, d.jitter, cfg.seed)
    if d.kind == "parts":
        return make_part_dataset(d.n_train, d.n_test, d.n_points, d.jitter, cfg.seed)
    tr, names = _load_files(d.train_glob, d.n_points, cfg.seed)
    te, _ = _load_files(d.test_glob, d.n_points, cfg.seed + 1, names)
    return tr, te


def fit(cfg: ExperimentConfig, data=None, train_mode=None, callback=None):
    """Build the configured network and train it; returns ``(network, history, test_set)``."""
    tr, te = data if data is not None else build_datasets(cfg)
    net = build_network(cfg.network_config(num_classes=tr.num_classes))
    t = cfg.train
    res = train(net, tr, t.epochs, t.batch, t.lr, cfg.seed, train_mode or t.train_mode,
                callback=callback)
    return net, res.history, te


# ------------------------------------------------------------ rotation grid


def run_rotation_grid(cfg: ExperimentConfig, data=None, label=None) -> ResultTable:
    """Train one model per train mode and evaluate it under every test mode.

    Accuracies are in percent. The named cells z/z, so3/so3 and z/so3 also get
    their population standard deviation (``std_named``); each model gets the
    standard deviation over its own test modes (``std``).
    """
    label = label or f"grid-{cfg.network.features}-{cfg.network.axis_source}"
    data = data if data is not None else build_datasets(cfg)
    table = ResultTable()
    seed = cfg.seed
    cells = {}
    for train_mode in cfg.train.train_modes:
        net, _, te = fit(cfg, data, train_mode)
        accs, preds = [], {}
        for test_mode in cfg.train.test_modes:
            ev = evaluate(net, te, test_mode, cfg.train.trials, seed + 1)
            acc = 100.0 * ev.metric
            cells[(train_mode, test_mode)] = acc
            preds[test_mode] = ev
            accs.append(acc)
            table.append(label, f"{train_mode}/{test_mode}", "accuracy_pct", acc, seed)
            table.append(label, f"{train_mode}/{test_mode}", "unstable_samples", ev.unstable.sum(), seed)
        table.append(label, f"train={train_mode}", "std", np.std(accs), seed)
        if "z" in preds and "so3" in preds:
            ok = ~(preds["z"].unstable | preds["so3"].unstable)
            agree = np.mean(preds["z"].predictions[ok] == preds["so3"].predictions[ok]) if ok.any() else np.nan
            table.append(label, f"train={train_mode}", "argmax_agreement_z_so3", agree, seed)
    named = [("z", "z"), ("so3", "so3"), ("z", "so3")]
    if all(c in cells for c in named):
        table.append(label, "z/z,so3/so3,z/so3", "std_named", np.std([cells[c] for c in named]), seed)
    return table


# --------------------------------------------------------------- noise sweep


def run_noise_sweep(cfg: ExperimentConfig, data=None, csv_path=None) -> ResultTable:
    """Train once per axis source on clean data; add test-time noise at every sigma."""
    data = data if data is not None else build_datasets(cfg)
    table = ResultTable()
    rows = []
    for source in cfg.noise.axis_sources:
        sub = cfg.with_network(axis_source=source)
        net, _, te = fit(sub, data)
        for sigma in cfg.noise.sigmas:
            ev = evaluate(net, te, cfg.train.test_mode, cfg.train.trials, cfg.seed + 1, noise_sigma=sigma)
            acc = 100.0 * ev.metric
            table.append("noise", f"{source}/sigma={sigma:g}", "accuracy_pct", acc, cfg.seed)
            rows.append((source, sigma, acc, cfg.seed))
        drop = rows[-len(cfg.noise.sigmas)][2] - rows[-1][2]
        table.append("noise", source, "drop_at_max_sigma_pct", drop, cfg.seed)
    if csv_path is not None:
        write_rows(csv_path, ("axis_source", "sigma", "accuracy_pct", "seed"), rows)
    return table


# ------------------------------------------------------------------ ablation


def run_ablation(cfg: ExperimentConfig, data=None) -> ResultTable:
    """Feature-mask variants trained under one seed, plus parameter counts per kernel size."""
    data = data if data is not None else build_datasets(cfg)
    table = ResultTable()
    seed = cfg.seed
    for mask in cfg.ablation.masks:
        sub = cfg.with_network(mask=mask)
        net, _, te = fit(sub, data)
        ev = evaluate(net, te, cfg.train.test_mode, cfg.train.trials, seed + 1)
        table.append("ablation", f"model={mask}", "accuracy_pct", 100.0 * ev.metric, seed)
        table.append("ablation", f"model={mask}", "lift_input_width", len(parse_mask(mask)), seed)
        table.append("ablation", f"model={mask}", "params", net.num_parameters(), seed)
    num_classes = data[0].num_classes
    for k in cfg.ablation.kernels:
        sub = cfg.with_network(kernel_size=k)
        net = build_network(sub.network_config(num_classes=num_classes))
        table.append("ablation", f"kernel={k}", "params", net.num_parameters(), seed)
        table.append("ablation", f"kernel={k}", "params_full",
                     build_network(full_classifier(kernel_size=k)).num_parameters(), seed)
        if cfg.ablation.train_kernels:
            net, _, te = fit(sub, data)
            ev = evaluate(net, te, cfg.train.test_mode, cfg.train.trials, seed + 1)
            table.append("ablation", f"kernel={k}", "accuracy_pct", 100.0 * ev.metric, seed)
    return table


# -------------------------------------------------------------- repeatability


@dataclass
class RepeatabilityResult:
    table: ResultTable
    errors: list       # (model_id, point_id, method, error_deg)
    histogram: list    # (model_id, method, bin_lo, bin_hi, count, fraction)


def _support(points, queries, k):
    idx = knn_query(points, queries, min(k, len(points)))
    return points[idx]


def reference_errors(model: PointCloud, scene_points, transform: RigidTransform, model_ids, scene_ids,
                     k_model: int, k_scene: int):
    """Axis / frame errors at paired model and scene points; scene quantities are mapped back."""
    rot = transform.rotation
    mp = model.points[model_ids]
    sp = scene_points[scene_ids]
    m_sup = _support(model.points, mp, k_model)
    s_sup = _support(scene_points, sp, k_scene)
    out = {}
    a_m, a_s = local_axis(mp, m_sup), local_axis(sp, s_sup)
    ok = (a_m.relative_gap > 1e-6) & (a_s.relative_gap > 1e-6)
    out["lra"] = (axis_error(a_m.direction, a_s.direction @ rot), ok)
    try:
        f_m, f_s = compute_lrf(mp, m_sup), compute_lrf(sp, s_sup)
        out["lrf"] = (frame_error(f_m, rot.T @ f_s), np.ones(len(mp), dtype=bool))
    except ValueError:
        f_err = np.empty(len(mp))
        for i in range(len(mp)):
            try:
                f_err[i] = frame_error(compute_lrf(mp[i], m_sup[i]), rot.T @ compute_lrf(sp[i], s_sup[i]))
            except ValueError:
                f_err[i] = np.nan
        out["lrf"] = (f_err, np.isfinite(f_err))
    p_m, dm = compute_pm_axis(mp, m_sup, strict=False)
    p_s, ds = compute_pm_axis(sp, s_sup, strict=False)
    out["pm"] = (axis_error(p_m, p_s @ rot), ~(dm | ds))
    return out


def run_repeatability(cfg: ExperimentConfig, noise_factor=None, subsample=None, transform=True
                      ) -> RepeatabilityResult:
    """Model vs. noisy, resampled and rigidly moved scene, per shape and method.

    The scene keeps a random ``subsample`` fraction of the model points, adds
    Gaussian noise of ``noise_factor`` times the model's mean nearest-neighbor
    distance and is rotated and translated at random. Model points are paired
    with the closest scene point in the model frame. The scene support size is
    scaled by the resampling ratio so both supports span the same area.
    """
    r = cfg.repeat
    noise_factor = r.noise_factor if noise_factor is None else noise_factor
    subsample = r.subsample if subsample is None else subsample
    table = ResultTable()
    errors, hist = [], []
    seed = cfg.seed
    for shape_id, kind in enumerate(r.shapes):
        rng = np.random.default_rng((seed, shape_id))
        model = synth_shape(kind, r.n_points, rng)
        keep = np.sort(rng.choice(r.n_points, int(round(subsample * r.n_points)), replace=False))
        sigma = noise_factor * mean_nn_distance(model.points)
        scene = add_gaussian_noise(PointCloud(model.points[keep]), sigma, rng)
        if transform:
            move = random_rotation("so3", rng)
            move = RigidTransform(move.rotation, rng.uniform(-1, 1, size=3))
        else:
            move = RigidTransform(np.eye(3), np.zeros(3))
        moved = apply_rigid_transform(scene, move).points
        model_ids = np.sort(rng.choice(r.n_points, min(r.pairs, r.n_points), replace=False))
        scene_ids = knn_query(scene.points, model.points[model_ids], 1)[:, 0]
        k_scene = max(3, int(round(r.support_k * subsample)))
        res = reference_errors(model, moved, move, model_ids, scene_ids, r.support_k, k_scene)
        for method, (err, ok) in res.items():
            for pid, e, good in zip(model_ids, err, ok):
                if good:
                    errors.append((kind, int(pid), method, float(e)))
            e = err[ok]
            counts, _ = np.histogram(e, bins=HIST_EDGES)
            frac = counts / max(len(e), 1)
            for lo, hi, c, f in zip(HIST_EDGES[:-1], HIST_EDGES[1:], counts, frac):
                hist.append((kind, method, lo, hi, int(c), float(f)))
            table.append("repeat", f"{kind}/{method}", "low_bin_mass", frac[0], seed)
            table.append("repeat", f"{kind}/{method}", "tail_mass_gt60", np.mean(e > 60.0) if len(e) else np.nan, seed)
            table.append("repeat", f"{kind}/{method}", "median_deg", np.median(e) if len(e) else np.nan, seed)
            table.append("repeat", f"{kind}/{method}", "excluded", int((~ok).sum()), seed)
    return RepeatabilityResult(table, errors, hist)


# -------------------------------------------------------------------- extract


def extract_irif(cloud: PointCloud, reps: int, neighbors_k: int, support_k: int = 16):
    """Rows ``(rep_id, nbr_rank, d, phi, a0, a1, a2, b0, b1, b2)`` for FPS representatives."""
    axes = compute_lra(cloud, support_k).direction
    pts = cloud.points
    rep = farthest_point_sample(pts, min(reps, len(pts)))
    nbr = knn_query(pts, pts[rep], neighbors_k - 1, exclude_coincident=True)
    order, _ = clockwise_angles(pts[rep], axes[rep], pts[nbr])
    nbr = np.take_along_axis(nbr, order, axis=1)
    feats, _ = irif_features(pts[rep], axes[rep], pts[nbr], axes[nbr])
    rows = []
    for r, rid in enumerate(rep):
        for rank in range(feats.shape[1]):
            rows.append((int(rid), rank, *(float(v) for v in feats[r, rank])))
    return rows


EXTRACT_HEADER = ("rep_id", "nbr_rank") + IRIF_COLUMNS
