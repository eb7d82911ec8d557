import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpbsde import nn
from jumpbsde.models import make_problem
from jumpbsde.sampling import RngStream
from jumpbsde.solver import NetworkStack, rollout_loss


def _plain_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _straight_line(params, x):
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _plain_sigmoid(h @ w + b)
    return h @ params.weights[-1] + params.biases[-1]


def _params(seed, d=3, width=5, n_hidden=2, stack=()):
    return nn.init_params(RngStream(seed), nn.MlpArchitecture(d, width, n_hidden), stack=stack)


def test_constant_hidden_network():
    p = _params(0)
    for w in p.weights[:-1]:
        w[...] = 0.0
    p.biases[-1][...] = 0.3
    out = nn.mlp_forward(nn.Graph(), p, np.ones((4, 3))).value
    assert np.allclose(out, 0.5 * p.weights[-1].sum() + 0.3, rtol=1e-15)


def test_single_linear_layer():
    p = _params(1, n_hidden=0)
    x = np.random.default_rng(0).normal(size=(6, 3))
    out, grad = nn.mlp_value_and_input_gradient(nn.Graph(), p, x)
    assert np.array_equal(out.value, x @ p.weights[0] + p.biases[0])
    assert np.allclose(grad.value, np.broadcast_to(p.weights[0][:, 0], (6, 3)), rtol=0, atol=0)


def test_forward_matches_straight_line_evaluation():
    rng = np.random.default_rng(2)
    for seed in range(20):
        p = _params(seed, d=4, width=7, stack=3)
        x = rng.normal(size=(3, 10, 4))
        assert np.allclose(nn.mlp_forward(nn.Graph(), p, x).value, _straight_line(p, x), rtol=0, atol=1e-14)


def _fd_input_gradient(p, x, h=1e-5):
    out = np.zeros_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros_like(x)
        e[..., j] = h
        out[..., j] = (_straight_line(p, x + e) - _straight_line(p, x - e))[..., 0] / (2 * h)
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_input_gradient_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, width = int(rng.integers(1, 5)), int(rng.integers(1, 8))
    p = nn.init_params(rng, nn.MlpArchitecture(d, width, int(rng.integers(1, 4))))
    x = rng.normal(size=(5, d))
    grad = nn.mlp_input_gradient(nn.Graph(), p, x).value
    fd = _fd_input_gradient(p, x)
    assert np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-5


def test_zero_weight_network_has_zero_gradient():
    p = _params(3)
    for w in p.weights:
        w[...] = 0.0
    assert np.all(nn.mlp_input_gradient(nn.Graph(), p, np.ones((2, 3))).value == 0.0)


def test_sum_square_gradient():
    a = np.random.default_rng(4).normal(size=(3, 4))
    g = nn.Graph()
    grads = g.gradients(g.sum(g.square(g.parameter(a))), [a])
    assert np.array_equal(grads[0], 2 * a)


def test_constant_loss_gives_zero_gradients():
    a = np.ones((2, 2))
    g = nn.Graph()
    g.parameter(a)
    loss = g.sum(g.constant(np.ones((3,))))
    assert np.array_equal(g.gradients(loss, [a])[0], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    g = nn.Graph()
    with pytest.raises(ValueError):
        g.backward(g.parameter(np.ones((2, 2))))


def test_shape_mismatch():
    g = nn.Graph()
    with pytest.raises(ValueError):
        g.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        nn.mlp_forward(nn.Graph(), _params(0, d=3), np.ones((4, 2)))


def _op_cases():
    # each case maps a list of parameter arrays to a scalar loss through one op kind
    def weights(g, out):
        return g.sum(g.mul(out, np.linspace(-1, 1, out.value.size).reshape(out.value.shape)))

    return {
        "add_broadcast": ([(3, 4), (1, 4)], lambda g, a, b: weights(g, g.add(a, b))),
        "sub": ([(3, 4), (3, 1)], lambda g, a, b: weights(g, g.sub(a, b))),
        "elementwise_mul": ([(2, 3, 4), (3, 4)], lambda g, a, b: weights(g, g.mul(a, b))),
        "scale": ([(3, 4)], lambda g, a: weights(g, g.scale(a, -1.7))),
        "matmul": ([(2, 3, 4), (4, 5)], lambda g, a, b: weights(g, g.matmul(a, b))),
        "transpose": ([(2, 3, 4)], lambda g, a: weights(g, g.transpose(a))),
        "sigmoid": ([(3, 4)], lambda g, a: weights(g, g.sigmoid(a))),
        "square": ([(3, 4)], lambda g, a: weights(g, g.square(a))),
        "sum": ([(3, 4, 2)], lambda g, a: weights(g, g.sum(a, axis=1))),
        "sum_keepdims": ([(3, 4, 2)], lambda g, a: weights(g, g.sum(a, axis=-1, keepdims=True))),
        "mean": ([(3, 4)], lambda g, a: weights(g, g.mean(a, axis=0))),
        "take": ([(3, 4, 2)], lambda g, a: weights(g, g.take(a, 2, axis=0))),
        "gather_rows": ([(5, 3)], lambda g, a: weights(g, g.gather_rows(a, [0, 3, 3, 1]))),
        "concat_rows": ([(2, 3), (4, 3)], lambda g, a, b: weights(g, g.concat_rows([a, b]))),
        "segment_sum": ([(2, 4, 2)], lambda g, a: weights(g, g.segment_sum(a, [[0, 4, -1, 4], [1, 1, 5, -1]], (2, 3)))),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_each_op_against_central_differences(name):
    shapes, build = _op_cases()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.normal(size=s) for s in shapes]

    def value():
        g = nn.Graph()
        return float(build(g, *[g.parameter(a) for a in arrays]).value)

    g = nn.Graph()
    grads = g.gradients(build(g, *[g.parameter(a) for a in arrays]), arrays)
    h = 1e-6
    for a, ga in zip(arrays, grads):
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = value()
            a[idx] = old - h
            down = value()
            a[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(ga[idx] - fd) <= 1e-6 * max(1.0, abs(fd))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_autodiff_random_composite_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = nn.init_params(rng, nn.MlpArchitecture(2, 3, 1), stack=2)
    x = rng.normal(size=(2, 4, 2))
    arrays = p.arrays()

    def loss(g):
        out, grad = nn.mlp_value_and_input_gradient(g, p, x)
        return g.sum(g.square(out)) + g.mean(g.mul(grad, grad))

    g = nn.Graph()
    grads = g.gradients(loss(g), arrays)
    k = int(rng.integers(len(arrays)))
    a = arrays[k]
    idx = tuple(int(rng.integers(n)) for n in a.shape)
    h = 1e-6
    old = a[idx]
    a[idx] = old + h
    up = float(loss(nn.Graph()).value)
    a[idx] = old - h
    down = float(loss(nn.Graph()).value)
    a[idx] = old
    fd = (up - down) / (2 * h)
    assert abs(grads[k][idx] - fd) <= 1e-5 * max(abs(fd), 1e-2)


def test_rollout_loss_gradient_against_finite_differences():
    prob = make_problem("merton_call", n_steps=6)
    stack = NetworkStack.initialize(RngStream(5), prob.d, prob.n_steps, width=4)
    stack.y0[...] = 0.2
    batch = prob.simulate(RngStream(6), 256)
    arrays = stack.arrays()
    g = nn.Graph()
    grads = g.gradients(rollout_loss(g, prob, stack, batch), arrays)
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(20):
        k = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(n)) for n in arrays[k].shape)
        old = arrays[k][idx]
        arrays[k][idx] = old + h
        up = float(rollout_loss(nn.Graph(), prob, stack, batch).value)
        arrays[k][idx] = old - h
        down = float(rollout_loss(nn.Graph(), prob, stack, batch).value)
        arrays[k][idx] = old
        fd = (up - down) / (2 * h)
        assert abs(grads[k][idx] - fd) <= 1e-4 * max(abs(fd), 1e-4)


def test_graph_forward_is_replayable():
    p = _params(8)
    x = np.random.default_rng(9).normal(size=(5, 3))
    a = nn.mlp_forward(nn.Graph(), p, x).value
    b = nn.mlp_forward(nn.Graph(), p, x).value
    assert np.array_equal(a, b)


def test_parameter_nodes_are_shared():
    a = np.ones(3)
    g = nn.Graph()
    assert g.parameter(a) is g.parameter(a)
    grads = g.gradients(g.sum(g.add(g.parameter(a), g.parameter(a))), [a])
    assert np.array_equal(grads[0], 2 * np.ones(3))


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    state = nn.AdamState([(0, 0.1)])
    for _ in range(10):
        nn.adam_step(state, p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_constant_gradient_step_size():
    p = [np.zeros(3)]
    state = nn.AdamState([(0, 1e-3)])
    for _ in range(500):
        before = p[0].copy()
        nn.adam_step(state, p, [np.array([0.5, -3.0, 100.0])])
    step = p[0] - before
    assert np.allclose(np.abs(step), 1e-3, rtol=0.05)
    assert np.array_equal(np.sign(step), [-1.0, 1.0, -1.0])


def test_adam_schedule_and_determinism():
    state = nn.AdamState([(0, 1e-2), (100, 1e-3)])
    assert state.lr(0) == 1e-2 and state.lr(99) == 1e-2 and state.lr(100) == 1e-3

    def run():
        rng = np.random.default_rng(10)
        p = [np.ones(4)]
        st_ = nn.AdamState([(0, 1e-2), (5, 1e-3)])
        for _ in range(10):
            nn.adam_step(st_, p, [rng.normal(size=4)])
        return p[0]

    assert np.array_equal(run(), run())
    with pytest.raises(ValueError):
        nn.adam_step(nn.AdamState(), [np.ones(2)], [np.ones(3)])


def test_init_params_statistics():
    p = nn.init_params(RngStream(11), nn.MlpArchitecture(100, 1000, 1))
    w = p.weights[0]
    assert w.size == 10**5
    assert w.var() == pytest.approx(0.01, rel=0.1)
    assert all(np.all(b == 0.0) for b in p.biases)
    q = nn.init_params(RngStream(11), nn.MlpArchitecture(100, 1000, 1))
    assert np.array_equal(p.weights[1], q.weights[1])
    assert nn.MlpArchitecture(3, 5, 2).n_params() == 5 * 4 + 5 * 6 + 1 * 6


def test_checkpoint_round_trip(tmp_path):
    p = _params(12, stack=4)
    arrays = {f"w{i}": a for i, a in enumerate(p.arrays())}
    nn.save_checkpoint(tmp_path / "c.bin", arrays)
    back = nn.load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "trail.bin").write_bytes(raw + b"x")
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "trail.bin")


def test_tape_is_freed_without_cycle_collection():
    import gc
    import weakref

    gc.disable()
    try:
        g = nn.Graph()
        out = nn.mlp_forward(g, _params(13), np.ones((2, 3)))
        ref = weakref.ref(g)
        del g
        assert ref() is None
        assert out.value.shape == (2, 1)
        with pytest.raises(ValueError):
            out + 1.0
    finally:
        gc.enable()
