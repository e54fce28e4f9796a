import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from actiongrad.autodiff import (
    Adam,
    MlpParams,
    RngStream,
    Tape,
    Tensor,
    backward,
    grad_wrt_action,
    init_mlp,
    mlp_forward,
    quadratic_critic,
)
from actiongrad.autodiff import checkpoint
from actiongrad.autodiff import tensor as T
from actiongrad.errors import ConfigurationError, UsageError

from conftest import central_diff, rel_close


def straight_line_mlp(weights, biases, x):
    """Hand-rolled ReLU MLP forward, one loop per matrix element."""
    h = list(x)
    for layer, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            out.append(acc)
        if layer < len(weights) - 1:
            out = [v if v > 0 else 0.0 for v in out]
        h = out
    return np.array(h)


# --- mlp_forward ----------------------------------------------------------


def test_identity_net():
    p = MlpParams([Tensor([[1.0]])], [Tensor([0.0])])
    assert mlp_forward(p, [0.3]).data.tolist() == [0.3]


def test_zero_weight_net_returns_bias():
    p = MlpParams([Tensor(np.zeros((3, 2)))], [Tensor([0.25, -4.0])])
    out = mlp_forward(p, [1.0, -2.0, 7.0])
    np.testing.assert_array_equal(out.data, [0.25, -4.0])


def test_random_net_matches_hand_rolled_forward():
    p = init_mlp([2, 5, 1], RngStream(7))
    x = [0.1, 0.2]
    expected = straight_line_mlp([w.data for w in p.weights], [b.data for b in p.biases], x)
    np.testing.assert_allclose(mlp_forward(p, x).data, expected, rtol=0, atol=1e-14)


def test_dimension_mismatch():
    p = init_mlp([2, 4, 1], RngStream(0))
    with pytest.raises(ConfigurationError):
        mlp_forward(p, [1.0, 2.0, 3.0])
    with pytest.raises(ConfigurationError):
        MlpParams([Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1)))], [Tensor(np.ones(3)), Tensor(np.ones(1))])


def test_batch_forward_matches_rows():
    p = init_mlp([3, 8, 8, 2], RngStream(1))
    x = RngStream(2).normal(size=(5, 3))
    batch = mlp_forward(p, x).data
    for i in range(5):
        np.testing.assert_allclose(batch[i], mlp_forward(p, x[i]).data, atol=1e-14)


# --- backward ---------------------------------------------------------------


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    tape = Tape()
    with tape:
        y = x * x
    assert backward(tape, y)[x] == pytest.approx(6.0)


def test_constant_gradient_is_zero():
    x = Tensor(3.0, requires_grad=True)
    c = Tensor(2.0, requires_grad=True)
    tape = Tape()
    with tape:
        y = c * 1.0
    g = backward(tape, y)
    assert g[x] == 0.0


def test_output_not_on_tape():
    tape = Tape()
    with pytest.raises(UsageError):
        backward(tape, Tensor(1.0))


def test_non_scalar_needs_cotangent():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        backward(tape, y)
    np.testing.assert_array_equal(backward(tape, y, np.ones(2))[x], [2.0, 2.0])


def test_no_recording_without_tape():
    x = Tensor(1.0, requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_each_node_visited_once():
    calls = []
    x = Tensor(2.0, requires_grad=True)
    tape = Tape()
    with tape:
        y = x * x
        z = y + y
    for node in tape.nodes:
        fn = node.backward
        node.backward = (lambda f: (lambda g: (calls.append(1), f(g))[1]))(fn)
    backward(tape, z)
    assert len(calls) == len(tape.nodes) == 2


def _loss_of_params(p: MlpParams, x):
    return float(mlp_forward(p, x).data.sum())


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("activation", ["relu", "gelu", "tanh"])
def test_mlp_param_gradients_match_finite_differences(seed, activation):
    rng = RngStream(seed, "fd")
    p = init_mlp([3, 6, 4, 1], rng, activation=activation)
    x = rng.normal(size=(4, 3))
    tape = Tape()
    with tape:
        out = mlp_forward(p, x).sum()
    grads = backward(tape, out)
    for w in p.weights + p.biases:
        orig = w.data.copy()

        def f(v):
            w.data = v
            return _loss_of_params(p, x)

        numeric = central_diff(f, orig)
        w.data = orig
        assert rel_close(grads[w], numeric, rtol=1e-4, floor=1e-8)


def _fd_check(build, *shapes, seed=0, rtol=1e-5):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    cot = rng.normal(size=np.shape(build(*[Tensor(a) for a in arrays]).data))
    tape = Tape()
    with tape:
        out = build(*tensors)
    grads = backward(tape, out, cot)
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(x) for x in arrays]
            args[k] = Tensor(v)
            return float((build(*args).data * cot).sum())

        assert rel_close(grads[tensors[k]], central_diff(f, a), rtol=rtol, floor=1e-7), k


def test_primitive_gradients():
    _fd_check(lambda a, b: a @ b, (2, 3, 4), (4, 5))
    _fd_check(lambda a, b: a @ b, (2, 3, 4), (2, 4, 5))
    _fd_check(lambda a, b: a * b + a / (b * b + 1.0), (3, 4), (1, 4))
    _fd_check(lambda a: T.softmax(a, axis=-1), (2, 5))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    _fd_check(lambda a: T.softmax(a, axis=-1, mask=mask), (2, 4, 4))
    _fd_check(lambda a: T.layer_norm(a), (3, 6))
    _fd_check(lambda a: T.gelu(a).exp().log(), (3, 4))
    _fd_check(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))
    _fd_check(lambda a, b: T.stack([a, b], axis=1), (2, 3), (2, 3))
    _fd_check(lambda a: a.transpose(0, 2, 1).reshape(2, -1).sum(axis=1), (2, 3, 4))
    _fd_check(lambda a: T.embedding(a, [[0, 2, 2], [1, 1, 0]]), (3, 4))
    _fd_check(lambda a: a[:, 1:3].mean(axis=0), (3, 4))
    _fd_check(lambda a: T.tanh(a).square().sqrt(), (3, 3))


def test_clip_gradient_zero_outside():
    x = Tensor([-3.0, 0.5, 4.0], requires_grad=True)
    tape = Tape()
    with tape:
        y = T.clip(x, -1.0, 2.0).sum()
    np.testing.assert_array_equal(backward(tape, y)[x], [0.0, 1.0, 0.0])


def test_masked_softmax_exact_zero():
    x = Tensor(np.zeros((1, 3)))
    out = T.softmax(x, mask=np.array([[True, False, True]]))
    assert out.data[0, 1] == 0.0
    assert out.data[0, 0] == 0.5


# --- grad_wrt_action --------------------------------------------------------


def test_quadratic_critic_gradient():
    q = quadratic_critic(obs_dim=1)
    assert grad_wrt_action(q, [0.0], [0.6])[0] == pytest.approx(-1.2, abs=1e-15)
    assert grad_wrt_action(q, [0.0], [0.0])[0] == 0.0


def test_state_gets_no_gradient():
    q = init_mlp([3, 8, 1], RngStream(3))
    frozen = q.frozen()
    s = Tensor([0.1, 0.2], requires_grad=False)
    a = Tensor([0.5], requires_grad=True)
    tape = Tape()
    with tape:
        out = mlp_forward(frozen, T.concat([s, a])).sum()
    g = backward(tape, out)
    assert s not in g
    assert np.all(g[s] == 0.0)
    for w in frozen.weights:
        assert w not in g


@pytest.mark.parametrize("seed", range(10))
def test_grad_wrt_action_matches_fd(seed):
    rng = RngStream(seed, "gwa")
    q = init_mlp([4, 16, 16, 1], rng)
    s, a = rng.normal(size=2), rng.uniform(-1, 1, size=2)
    numeric = central_diff(lambda v: float(mlp_forward(q, np.concatenate([s, v])).data[0]), a)
    assert rel_close(grad_wrt_action(q, s, a), numeric, rtol=1e-4, floor=1e-8)


# --- determinism / finiteness ----------------------------------------------


def test_deterministic_forward_backward():
    def run():
        p = init_mlp([3, 8, 1], RngStream(11))
        x = RngStream(12).normal(size=(6, 3))
        tape = Tape()
        with tape:
            out = mlp_forward(p, x).sum()
        g = backward(tape, out)
        return out.data.tobytes(), b"".join(g[w].tobytes() for w in p.weights)

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(-10, 10), st.floats(-10, 10))
def test_finite_outputs_bounded_weights(seed, x0, x1):
    rng = RngStream(seed)
    p = init_mlp([2, 8, 8, 1], rng, activation="gelu")
    for w in p.weights:
        w.data = np.clip(w.data * 20, -10, 10)
    tape = Tape()
    with tape:
        out = mlp_forward(p, Tensor([x0, x1], requires_grad=True)).sum()
    g = backward(tape, out)
    assert np.isfinite(out.data).all()
    assert all(np.isfinite(g[w]).all() for w in p.weights)


def test_rng_stream_reproducible_and_children_independent():
    a, b = RngStream(5, "x"), RngStream(5, "x")
    np.testing.assert_array_equal(a.uniform(size=4), b.uniform(size=4))
    assert a.draws == 1
    c1 = RngStream(5).child("one").uniform(size=3)
    root = RngStream(5)
    root.uniform(size=100)
    np.testing.assert_array_equal(root.child("one").uniform(size=3), c1)


# --- Adam ---------------------------------------------------------------------


def scalar_adam(g_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return x


def test_adam_zero_gradient():
    p = Tensor([1.5, -2.0], requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3)
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert opt.step_count == 1


def test_adam_first_and_second_step():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3)
    opt.step({"p": np.array([1.0])})
    assert p.data[0] == pytest.approx(scalar_adam([1.0]), abs=1e-15)
    assert p.data[0] == pytest.approx(-0.001, rel=1e-6)
    opt.step({"p": np.array([1.0])})
    assert p.data[0] == pytest.approx(scalar_adam([1.0, 1.0]), abs=1e-15)


# --- checkpoint ---------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    p = init_mlp([3, 4, 1], RngStream(9))
    path = tmp_path / "net.ckpt"
    h1 = checkpoint.save(path, p.parameters(), {"kind": "test"})
    arrays, meta = checkpoint.load(path)
    assert meta == {"kind": "test"}
    for k, t in p.parameters().items():
        np.testing.assert_array_equal(arrays[k], t.data)
    assert checkpoint.save(tmp_path / "again.ckpt", p.parameters(), {"kind": "test"}) == h1
    blob = path.read_bytes()
    assert blob[:8] == b"AGCKPT01"
