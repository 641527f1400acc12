import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_check, naive_conv
from riconv import nncore as nn
from riconv.nncore import Parameter, ShapeError, Tensor
from riconv.nncore.checkpoint import CheckpointError


def param(rng, *shape):
    return Parameter(rng.normal(size=shape))


# ----------------------------------------------------------------------- affine


def test_affine_identity_and_bias_grad():
    x = Parameter(np.arange(6.0).reshape(2, 3))
    w, b = Parameter(np.eye(3)), Parameter(np.zeros(3))
    y = nn.affine(x, w, b)
    np.testing.assert_array_equal(y.data, x.data)
    y.sum().backward()
    np.testing.assert_array_equal(b.grad, [2, 2, 2])
    with pytest.raises(ShapeError):
        nn.affine(x, Parameter(np.eye(4)))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
def test_affine_fd(seed, n, cin, cout):
    rng = np.random.default_rng(seed)
    fd_check(nn.affine, [param(rng, 2, n, cin), param(rng, cin, cout), param(rng, cout)], 1e-4)


# ------------------------------------------------------------------------ scale


def test_scale_cases():
    rng = np.random.default_rng(1)
    x = param(rng, 2, 3, 4)
    np.testing.assert_array_equal(nn.elementwise_scale(x, Parameter(np.ones(4))).data, x.data)
    y = nn.elementwise_scale(x, Parameter(np.zeros(4)))
    assert np.all(y.data == 0)
    y.sum().backward()
    assert np.all(x.grad == 0)
    fd_check(nn.elementwise_scale, [x, param(rng, 4)], 1e-4)
    with pytest.raises(ShapeError):
        nn.elementwise_scale(x, Parameter(np.ones(3)))


# ---------------------------------------------------------------- relu and BN


def test_relu():
    x = Parameter(np.array([-1.0, 0.0, 2.0]))
    y = nn.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])
    rng = np.random.default_rng(2)
    z = Parameter(rng.normal(size=(3, 4)) + 0.1)
    z.data[np.abs(z.data) < 1e-3] = 0.5
    fd_check(nn.relu, [z], 1e-4)


def test_batch_norm_train_stats_and_errors():
    rng = np.random.default_rng(3)
    bn = nn.BatchNorm(5)
    x = rng.normal(loc=3, scale=2, size=(8, 7, 5))
    y = bn(x).data.reshape(-1, 5)
    assert np.abs(y.mean(axis=0)).max() < 1e-6
    assert np.abs(y.var(axis=0) - 1).max() < 1e-4
    flat = x.reshape(-1, 5)
    np.testing.assert_allclose(bn.running_mean, 0.1 * flat.mean(axis=0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * flat.var(axis=0, ddof=1))
    with pytest.raises(ShapeError):
        bn(x[:1])
    bn.eval()
    bn(x[:1])  # eval mode accepts a single sample


def test_batch_norm_fd_train_and_eval():
    rng = np.random.default_rng(4)
    x, g, b = param(rng, 4, 3, 2), param(rng, 2), param(rng, 2)
    rm, rv = np.zeros(2), np.ones(2)

    def train(x, g, b):
        return nn.batch_norm(x, g, b, rm.copy(), rv.copy(), True)

    def evaluate(x, g, b):
        return nn.batch_norm(x, g, b, np.array([0.3, -0.2]), np.array([1.5, 0.7]), False)

    fd_check(train, [x, g, b], 1e-3)
    fd_check(evaluate, [x, g, b], 1e-4)


# ----------------------------------------------------------------------- conv1d


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_conv1d_matches_triple_loop(k):
    rng = np.random.default_rng(k)
    x, kern, b = rng.normal(size=(2, 3, 9, 4)), param(rng, 5, 4, k), param(rng, 5)
    np.testing.assert_allclose(nn.conv1d(x, kern, b).data, naive_conv(x, kern.data, b.data), atol=1e-10)
    np.testing.assert_allclose(nn.conv1d(x, kern).data, naive_conv(x, kern.data), atol=1e-10)


def test_conv1d_trivial_cases():
    x = np.random.default_rng(5).normal(size=(3, 4))
    ident = Parameter(np.eye(4)[:, :, None])
    np.testing.assert_array_equal(nn.conv1d(x, ident).data, x)
    ones = Parameter(np.ones((1, 4, 3)))
    np.testing.assert_allclose(nn.conv1d(x, ones).data, [[x.sum()]])
    with pytest.raises(ShapeError):
        nn.conv1d(x[:2], ones)
    with pytest.raises(ValueError):
        nn.Conv1d(4, 4, 2, np.random.default_rng(0))


@pytest.mark.parametrize("k", [1, 3])
def test_conv1d_fd(k):
    rng = np.random.default_rng(6 + k)
    fd_check(nn.conv1d, [param(rng, 2, 5, 3), param(rng, 2, 3, k), param(rng, 2)], 1e-4)


# ---------------------------------------------------------------------- maxpool


def test_maxpool():
    x = Parameter(np.array([[[1.0], [3.0], [3.0], [2.0]]]))
    y = nn.maxpool_set(x)
    assert y.data.tolist() == [[3.0]]
    y.sum().backward()
    assert x.grad[..., 0].tolist() == [[0, 1, 0, 0]]
    single = np.array([[[4.0, 5.0]]])
    np.testing.assert_array_equal(nn.maxpool_set(single).data, [[4.0, 5.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_maxpool_permutation_and_mass(seed):
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(2, 6, 3)))
    perm = rng.permutation(6)
    np.testing.assert_array_equal(nn.maxpool_set(x).data, nn.maxpool_set(x.data[:, perm]).data)
    up = rng.normal(size=(2, 3))
    (nn.maxpool_set(x) * up).sum().backward()
    np.testing.assert_allclose(x.grad.sum(axis=1), up)
    fd_check(nn.maxpool_set, [x], 1e-4)


# ------------------------------------------------------------ structural ops


def test_gather_concat_reshape_fd():
    rng = np.random.default_rng(7)
    x = param(rng, 2, 5, 3)
    idx = rng.integers(0, 5, size=(2, 4, 3))
    fd_check(lambda t: nn.gather_rows(t, idx), [x], 1e-4)
    y = param(rng, 2, 5, 2)
    fd_check(lambda a, b: nn.concat([a, b], axis=-1), [x, y], 1e-4)
    fd_check(lambda a: (a * a).reshape(2, -1).sum(axis=-1), [x], 1e-4)
    fd_check(lambda a, b: a - b * 2.0 + a * b.sum(axis=-1).reshape(2, 5, 1), [x, param(rng, 2, 5, 3)], 1e-4)


def test_gradient_accumulates_over_reuse():
    x = Parameter(np.array([2.0]))
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0])


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        Parameter(np.ones(3)).backward()


# ---------------------------------------------------------------- loss and Adam


def test_cross_entropy_values():
    k = 7
    loss = nn.softmax_cross_entropy(np.zeros((4, k)), [0, 1, 2, 3])
    assert loss.data == pytest.approx(math.log(k))
    big = np.zeros((1, 3))
    big[0, 1] = 1e4
    assert nn.softmax_cross_entropy(big, [1]).data == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((1, 3)), [3])
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 4, size=(3, 2))
    fd_check(lambda z: nn.softmax_cross_entropy(z, labels), [param(rng, 3, 2, 4)], 1e-4)


def test_adam_quadratic():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(4, 4))
    h = a @ a.T + 4 * np.eye(4)
    target = rng.normal(size=4)
    x = Parameter(target + 0.05 * rng.normal(size=4))
    opt = nn.Adam([x], lr=5e-3)
    for _ in range(100):
        opt.zero_grad()
        d = x - target
        (nn.affine(d.reshape(1, 4), Parameter(h)) * d.reshape(1, 4)).sum().backward()
        opt.step()
    assert np.abs(x.data - target).max() < 1e-3


def test_adam_step_bias_correction():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([2.0])
    nn.adam_step([p], lr=0.1)
    # first step moves by lr * g / |g|
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)
    assert p.step == 1
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        nn.adam_step([p])


# ------------------------------------------------------------------ checkpoints


class Tiny(nn.Module):
    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        self.fc = nn.Affine(3, 4, rng)
        self.bn = nn.BatchNorm(4)
        self.mlp = nn.MLP((4, 5, 2), rng)


def test_checkpoint_roundtrip(tmp_path):
    a = Tiny(0)
    a.bn(np.random.default_rng(1).normal(size=(5, 4)))
    for p in a.parameters():
        p.grad = np.ones_like(p.data)
    nn.Adam(a.parameters()).step()
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(a, path)
    b = Tiny(1)
    nn.load_checkpoint(b, path)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()
        assert pa.m.tobytes() == pb.m.tobytes() and pa.v.tobytes() == pb.v.tobytes()
        assert pa.step == pb.step == 1
    for (_, x), (_, y) in zip(a.named_buffers(), b.named_buffers()):
        assert x.tobytes() == y.tobytes()
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        nn.load_checkpoint(b, path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        nn.read_checkpoint(path)


def test_module_bookkeeping():
    m = Tiny(0)
    names = [n for n, _ in m.named_parameters()]
    assert names[:2] == ["fc.weight", "fc.bias"]
    assert m.num_parameters() == 3 * 4 + 4 + 4 + 4 + (4 * 5 + 5 + 5) + (5 * 2 + 2 + 2)
    m.eval()
    assert not any(x.training for x in m.modules())
    assert isinstance(nn.as_tensor(np.ones(2)), Tensor)
