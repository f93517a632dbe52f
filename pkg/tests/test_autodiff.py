"""Engine-level contracts: exact values on trivial graphs, gradients
against the finite-difference oracle, error behavior, and checkpoints."""

import numpy as np
import pytest

import exnode.autodiff as ad
from exnode import Graph, Params, backward, forward, grad_check
from exnode.errors import (BackwardBeforeForwardError, CheckpointError,
                           NonScalarOutputError, ShapeError,
                           UnboundInputError)

from conftest import central_diff, rel_err


def test_identity_matmul():
    g = Graph()
    a = g.const(np.eye(2))
    x = g.input("x", np.array([[1.0], [2.0]]))
    out = g.matmul(a, x)
    assert np.array_equal(out.value.ravel(), [1.0, 2.0])


def test_tanh_zero():
    g = Graph()
    out = g.tanh(g.input("x", [0.0]))
    assert np.array_equal(out.value, [0.0])


def test_softmax_uniform_on_zeros():
    g = Graph()
    out = g.softmax(g.input("x", [0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.value, [1 / 3] * 3, atol=1e-15)


def test_square_gradient():
    g = Graph()
    x = g.input("x", 3.0)
    g.mul(x, x)
    grads = backward(g, np.asarray(1.0))
    assert float(g.input_grad(grads, "x")) == pytest.approx(6.0, abs=1e-12)


def test_sum_gradient_all_ones(rng):
    g = Graph()
    x = g.input("x", rng.standard_normal((3, 4, 2)))
    g.reduce_sum(x, axis=None)
    grads = backward(g, np.asarray(1.0))
    assert np.array_equal(g.input_grad(grads, "x"), np.ones((3, 4, 2)))


def test_tanh_net_matches_fd_oracle(rng):
    """sum(tanh(W x)) gradient vs central differences, step 1e-5."""
    w0 = rng.standard_normal((4, 3))
    x = rng.standard_normal((3, 2))

    def f(w):
        return np.sum(np.tanh(w @ x))

    fd = central_diff(f, w0, step=1e-5)
    store = Params()
    store.add("w", w0)
    g = Graph()
    g.reduce_sum(g.tanh(g.matmul(g.param(store, "w"), g.input("x", x))),
                 axis=None)
    grads = g.param_grads(backward(g, np.asarray(1.0)))
    assert rel_err(grads["w"], fd) < 1e-5


def test_forward_rebinding_replays():
    g = Graph()
    x = g.input("x", [1.0, 2.0])
    g.reduce_sum(g.mul(x, x), axis=None)
    assert float(forward(g)) == pytest.approx(5.0)
    assert float(forward(g, {"x": np.array([3.0, 4.0])})) == pytest.approx(25.0)


def test_forward_deterministic_bitwise(rng):
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))

    def build():
        g = Graph()
        return g.reduce_sum(
            g.softmax(g.tanh(g.matmul(g.input("x", x), g.const(w))), axis=1),
            axis=None).value

    assert np.array_equal(build(), build())


def test_unbound_input_errors():
    g = Graph()
    with pytest.raises(UnboundInputError):
        g.input("x", None)
    g2 = Graph()
    g2.input("x", [1.0])
    with pytest.raises(UnboundInputError):
        forward(g2, {"y": np.array([1.0])})
    with pytest.raises(UnboundInputError):
        forward(g2, {})


def test_backward_before_forward_error():
    g = Graph()
    with pytest.raises(BackwardBeforeForwardError):
        backward(g, np.asarray(1.0))


def test_shape_mismatch_names_node():
    g = Graph()
    a = g.input("a", np.zeros((2, 3)))
    b = g.input("b", np.zeros((4, 2)))
    with pytest.raises(ShapeError) as exc:
        g.matmul(a, b)
    assert "matmul" in str(exc.value)
    with pytest.raises(ShapeError):
        g.add(a, b)


def test_broadcast_restricted_to_suffix_and_scalar():
    g = Graph()
    a = g.input("a", np.zeros((2, 3, 4)))
    mid = g.input("m", np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        g.add(a, mid)  # middle broadcast is out of contract
    g.add(a, g.const(np.zeros(4)))        # suffix is fine
    g.add(a, g.const(0.5))                # scalar is fine


def test_seed_shape_checked(rng):
    g = Graph()
    g.reduce_sum(g.input("x", rng.standard_normal(3)), axis=None)
    with pytest.raises(ShapeError):
        backward(g, np.ones(3))


def test_max_gradient_routes_to_first_maximal_index():
    g = Graph()
    x = g.input("x", np.array([[1.0, 5.0, 5.0, 0.0]]))
    g.reduce_max(x, axis=1)
    grads = backward(g, np.ones(1))
    assert np.array_equal(g.input_grad(grads, "x"),
                          np.array([[0.0, 1.0, 0.0, 0.0]]))


def test_max_pool_duplicate_elements_unchanged(rng):
    x = rng.standard_normal((2, 5, 3))
    dup = np.concatenate([x, x[:, :1]], axis=1)
    g1 = Graph()
    v1 = g1.reduce_max(g1.input("x", x), axis=1).value
    g2 = Graph()
    v2 = g2.reduce_max(g2.input("x", dup), axis=1).value
    assert np.array_equal(v1, v2)


def test_grad_check_affine_is_exact(rng):
    """Affine gradients are exact; hand-written Jacobian agrees too."""
    store = Params()
    w0 = rng.standard_normal((3, 2))
    b0 = rng.standard_normal(2)
    x = rng.standard_normal((4, 3))
    store.add("w", w0)
    store.add("b", b0)
    g = Graph()
    out = g.add(g.matmul(g.input("x", x), g.param(store, "w")),
                g.param(store, "b"))
    g.reduce_sum(out, axis=None)
    report = grad_check(g, tolerance=1e-9)
    assert report.passed, report
    assert report.worst() < 1e-9
    # hand Jacobian: d sum(xW+b)/dW = x^T 1, /db = count of rows
    grads = g.param_grads(backward(g, np.asarray(1.0)))
    assert np.allclose(grads["w"], x.T @ np.ones((4, 2)), atol=1e-12)
    assert np.allclose(grads["b"], 4.0, atol=1e-12)


def test_grad_check_two_layer_tanh_net(rng):
    store = Params()
    store.add("w1", 0.5 * rng.standard_normal((3, 5)))
    store.add("w2", 0.5 * rng.standard_normal((5, 1)))
    x = rng.standard_normal((6, 3))
    g = Graph()
    h = g.tanh(g.matmul(g.input("x", x), g.param(store, "w1")))
    g.reduce_sum(g.tanh(g.matmul(h, g.param(store, "w2"))), axis=None)
    report = grad_check(g, tolerance=1e-4)
    assert report.passed, report


def test_grad_check_flags_corrupted_rule(rng, monkeypatch):
    """Negative control: a corrupted backward rule is caught and named."""
    monkeypatch.setitem(ad._BACKWARD, "tanh",
                        lambda n, g, v: (1.05 * (1 - n.value ** 2) * g,))
    store = Params()
    store.add("w", rng.standard_normal((3, 3)))
    g = Graph()
    g.reduce_sum(g.tanh(g.matmul(g.input("x", rng.standard_normal((2, 3))),
                                 g.param(store, "w"))), axis=None)
    report = grad_check(g, tolerance=1e-4)
    assert not report.passed
    assert "w" in report.flagged


def test_grad_check_requires_scalar(rng):
    g = Graph()
    store = Params()
    store.add("w", rng.standard_normal(3))
    g.mul(g.param(store, "w"), g.const(np.ones(3)))
    with pytest.raises(NonScalarOutputError):
        grad_check(g, tolerance=1e-4)


def test_param_appears_once():
    store = Params()
    store.add("w", np.ones(2))
    g = Graph()
    g.param(store, "w")
    with pytest.raises(ValueError):
        g.param(store, "w")
    # param_node dedupes instead
    n1 = g.param_node(store, "w")
    n2 = g.param_node(store, "w")
    assert n1 is n2


def test_params_unique_names():
    store = Params()
    store.add("w", np.ones(2))
    with pytest.raises(ValueError):
        store.add("w", np.ones(2))


def test_checkpoint_roundtrip_exact(tmp_path, rng):
    store = Params()
    store.add("layer.w", rng.standard_normal((3, 4)))
    store.add("layer.b", rng.standard_normal(4), trainable=False)
    path = tmp_path / "ckpt.json"
    store.save(path, meta={"task": "unit"})
    loaded, meta = Params.load(path)
    assert meta["task"] == "unit"
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded[name], store[name])
    assert not loaded.is_trainable("layer.b")


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"version": "other", "params": {}}')
    with pytest.raises(CheckpointError):
        Params.load(path)
