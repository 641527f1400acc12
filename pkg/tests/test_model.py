import numpy as np
import pytest

from riconv import nncore as nn
from riconv.geometry import PointCloud, apply_rigid_transform, random_rotation, synth_shape
from riconv.irif import FeatureMask
from riconv.model import (
    ConfigError,
    InterpPlan,
    LayerSpec,
    NetworkConfig,
    build_classifier,
    build_network,
    build_segmenter,
    desk_classifier,
    desk_segmenter,
    feature_interpolate,
    interpolation_plan,
    stack_plans,
    full_classifier,
    full_segmenter,
)
from riconv.training import make_primitive_dataset

FULL_POINTS = [1024, 512, 256, 128, 1]
FULL_DIMS = [32, 64, 128, 256, 512]
FULL_K = [8, 16, 32, 64, 128]


@pytest.fixture(scope="module")
def clouds():
    tr, _ = make_primitive_dataset(1, 0, 512, seed=3)
    return tr.clouds


def per_layer_outputs(net, plan):
    f, outs = None, []
    for op, lp in zip(net.ops, plan.layers):
        f = op(lp, f)
        outs.append(f.shape)
    return outs


# ----------------------------------------------------------------- configs


def test_full_schedule_and_shapes():
    cfg = full_classifier()
    assert [s.out_points for s in cfg.layers] == FULL_POINTS
    assert [s.out_dims for s in cfg.layers] == FULL_DIMS
    assert [s.neighbors_k for s in cfg.layers] == FULL_K
    assert cfg.head == (512, 256)
    net = build_classifier(cfg).eval()
    cs = [synth_shape(k, 1024, i) for i, k in enumerate(("cube", "torus"))]
    plan = stack_plans([net.plan(c) for c in cs])
    assert per_layer_outputs(net, plan) == [(2, p, d) for p, d in zip(FULL_POINTS, FULL_DIMS)]
    logits = net.forward_plan(plan)
    assert logits.shape == (2, 40) and np.all(np.isfinite(logits.data))
    np.testing.assert_array_equal(net.forward_plan(plan).data, logits.data)


def test_full_parameter_budget_and_kernel_trend():
    counts = [build_classifier(full_classifier(kernel_size=k)).num_parameters() for k in (1, 3, 5, 7)]
    assert 300_000 <= counts[0] <= 600_000
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_full_segmenter_widths():
    seg = build_segmenter(full_segmenter(num_classes=50))
    assert [m.layers[0].weight.shape for m in seg.mixers] == [(768, 512), (640, 256), (320, 128)]
    assert [op.spec.neighbors_k for op in seg.decoder] == [8, 16, 32, 32]
    assert [op.spec.out_points for op in seg.encoder] == [512, 256, 128, 64]


def test_mask_sets_lift_width():
    for name, width in (("A", 8), ("D", 4), ("C", 2), ("B", 6)):
        net = build_classifier(desk_classifier(mask=FeatureMask.model(name)))
        assert net.ops[0].lift.weight.shape[0] == width


def test_config_errors():
    with pytest.raises(ConfigError):
        LayerSpec(8, 8, 1)
    with pytest.raises(ConfigError):
        LayerSpec(8, 8, 3, kernel_size=3)
    with pytest.raises(ConfigError):
        NetworkConfig("classify", 16, (LayerSpec(1, 4, 32),))
    with pytest.raises(ConfigError):
        NetworkConfig("classify", 16, (LayerSpec(4, 4, 4),))
    with pytest.raises(ConfigError):
        NetworkConfig("cluster", 16, (LayerSpec(1, 4, 4),))
    net = build_classifier(desk_classifier())
    with pytest.raises(ConfigError):
        net.plan(synth_shape("cube", 256, 0))


# --------------------------------------------------------------- invariances


def test_rotation_translation_permutation_invariance(clouds):
    net = build_classifier(desk_classifier()).eval()
    base = net(clouds)
    rng = np.random.default_rng(0)
    stable = [not net.plan(c).unstable for c in clouds]
    for _ in range(5):
        moved = []
        for c in clouds:
            t = random_rotation("so3", rng)
            moved.append(apply_rigid_transform(c, t))
        drift = np.abs(net(moved).data - base.data).max(axis=1)
        assert np.all(drift[stable] < 1e-5)
    shifted = [PointCloud(c.points + [3.0, -1.0, 2.0], c.normals) for c in clouds]
    assert np.abs(net(shifted).data - base.data).max() < 1e-8
    perm = [c.subset(rng.permutation(len(c))) for c in clouds]
    assert np.abs(net(perm).data - base.data).max() < 1e-6


def test_xyz_baseline_is_not_invariant(clouds):
    net = build_classifier(desk_classifier(features="xyz")).eval()
    base = net(clouds).data
    moved = [apply_rigid_transform(c, random_rotation("so3", i)) for i, c in enumerate(clouds)]
    assert np.abs(net(moved).data - base).max() > 1e-3


def test_gradient_flow(clouds):
    net = build_classifier(desk_classifier())
    loss = nn.softmax_cross_entropy(net(clouds), [c.label for c in clouds])
    loss.backward()
    total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in net.parameters() if p.grad is not None))
    assert np.isfinite(total) and total > 0
    assert all(p.grad is not None for p in net.parameters())


def test_same_seed_same_weights():
    a = build_classifier(desk_classifier(seed=5))
    b = build_classifier(desk_classifier(seed=5))
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_axis_sources(clouds):
    for source in ("normals", "pm"):
        net = build_network(desk_classifier(axis_source=source)).eval()
        assert np.all(np.isfinite(net(clouds[:2]).data))


# ---------------------------------------------------------------- segmenter


def test_interpolation_constant_and_identity():
    rng = np.random.default_rng(1)
    coarse, fine = rng.normal(size=(10, 3)), rng.normal(size=(40, 3))
    plan = interpolation_plan(coarse, fine)
    np.testing.assert_allclose(plan.weight.sum(axis=1), 1)
    batch = InterpPlan(plan.index[None], plan.weight[None])
    const = np.full((1, 10, 4), 2.5)
    np.testing.assert_allclose(feature_interpolate(const, batch).data, 2.5, atol=1e-12)
    same = interpolation_plan(coarse, coarse)
    feats = rng.normal(size=(1, 10, 3))
    out = feature_interpolate(feats, InterpPlan(same.index[None], same.weight[None])).data
    np.testing.assert_array_equal(out, feats)


def test_segmenter_output_and_invariance():
    cfg = desk_segmenter(num_classes=3)
    seg = build_segmenter(cfg).eval()
    cs = [synth_shape(k, 512, i) for i, k in enumerate(("cylinder", "cone"))]
    cs = [PointCloud(c.points + np.random.default_rng(9).normal(scale=0.003, size=c.points.shape)) for c in cs]
    out = seg(cs)
    assert out.shape == (2, 512, 3)
    moved = [apply_rigid_transform(c, random_rotation("so3", 4)) for c in cs]
    if not any(seg.plan(c).unstable for c in cs):
        assert np.abs(seg(moved).data - out.data).max() < 1e-5
    seg.train()
    loss = nn.softmax_cross_entropy(seg(cs), np.zeros((2, 512), dtype=int))
    loss.backward()
    assert np.isfinite(loss.data)
