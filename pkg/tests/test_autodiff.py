import math

import numpy as np
import pytest

from mafrec import autodiff as ad
from mafrec.autodiff import GradTape, ShapeError, Tensor

from helpers import fd_relative_errors, fd_setup


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def grad_of(build, *arrays):
    leaves = [ad.parameter(a.copy()) for a in arrays]
    with GradTape() as tape:
        loss = build(*leaves)
    return ad.backward(tape, loss, leaves)


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    B = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(ad.matmul(np.eye(3), B).numpy(), B)


def test_matmul_one_by_one():
    assert ad.matmul([[2.0]], [[3.0]]).numpy().tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(ad.matmul(a, b).numpy() - ref).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_batched_matmul_gradients():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = rng.normal(size=(2, 3, 5))
    ga, gb = grad_of(lambda x, y: ad.sum(ad.matmul(x, y) * w), a, b)
    assert np.allclose(ga, numeric_grad(lambda x: float(((x @ b) * w).sum()), a.copy()), atol=1e-7)
    assert np.allclose(gb, numeric_grad(lambda y: float(((a @ y) * w).sum()), b.copy()), atol=1e-7)


# -- masked softmax ----------------------------------------------------------

def test_softmax_symmetric_row():
    out = ad.masked_softmax_rows([[0.0, 0.0]], [[True, True]]).numpy()
    assert out.tolist() == [[0.5, 0.5]]


def test_softmax_single_allowed_position():
    out = ad.masked_softmax_rows([[5.0, -1.0]], [[True, False]]).numpy()
    assert out.tolist() == [[1.0, 0.0]]


def test_softmax_log_two():
    out = ad.masked_softmax_rows([[0.0, math.log(2.0)]], [[True, True]]).numpy()
    assert np.allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)


def test_softmax_all_masked_row_reports_index():
    with pytest.raises(ValueError, match=r"row \(1,\)"):
        ad.masked_softmax_rows(np.zeros((2, 2)), [[True, False], [False, False]])


def test_softmax_stable_for_large_scores():
    out = ad.masked_softmax_rows([[1000.0, 999.0, -1000.0]], [[True, True, True]]).numpy()
    assert np.isfinite(out).all()
    assert np.isclose(out.sum(), 1.0)


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(3, 4))
    mask = np.tril(np.ones((3, 4), dtype=bool), k=1)
    w = rng.normal(size=(3, 4))

    def f(x):
        e = np.where(mask, np.exp(x - x.max(axis=1, keepdims=True)), 0.0)
        return float((e / e.sum(axis=1, keepdims=True) * w).sum())

    (g,) = grad_of(lambda x: ad.sum(ad.masked_softmax_rows(x, mask) * w), s)
    assert np.allclose(g, numeric_grad(f, s.copy()), atol=1e-8)
    assert (g[~mask] == 0).all()


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_slice():
    out = ad.layer_norm([[2.5, 2.5, 2.5]], np.ones(3), np.zeros(3)).numpy()
    assert np.allclose(out, 0.0)


def test_layer_norm_already_normalized():
    out = ad.layer_norm([[-1.0, 1.0]], np.ones(2), np.zeros(2), eps=1e-300).numpy()
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_moments():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(6, 16))
    out = ad.layer_norm(x, np.ones(16), np.zeros(16)).numpy()
    assert np.abs(out.mean(axis=1)).max() < 1e-9
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    x, gain, bias = rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))

    def ref(x, gain, bias):
        xh = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-12)
        return float(((xh * gain + bias) * w).sum())

    gx, gg, gb = grad_of(lambda a, b, c: ad.sum(ad.layer_norm(a, b, c) * w), x, gain, bias)
    assert np.allclose(gx, numeric_grad(lambda a: ref(a, gain, bias), x.copy()), atol=1e-7)
    assert np.allclose(gg, numeric_grad(lambda b: ref(x, b, bias), gain.copy()), atol=1e-7)
    assert np.allclose(gb, numeric_grad(lambda c: ref(x, gain, c), bias.copy()), atol=1e-7)


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones():
    (g,) = grad_of(lambda p: ad.sum(p), np.random.default_rng(6).normal(size=(2, 3, 4)))
    assert np.array_equal(g, np.ones((2, 3, 4)))


def test_backward_quadratic_gives_p():
    p = np.random.default_rng(7).normal(size=(3, 2))
    (g,) = grad_of(lambda t: ad.sum(t * t) * 0.5, p)
    assert np.allclose(g, p, atol=1e-15)


def test_unused_parameter_gets_exact_zero():
    a, b = ad.parameter(np.ones(3)), ad.parameter(np.ones((2, 2)))
    with GradTape() as tape:
        loss = ad.sum(a * a)
    ga, gb = ad.backward(tape, loss, [a, b])
    assert np.array_equal(gb, np.zeros((2, 2)))
    assert np.array_equal(ga, 2 * np.ones(3))


def test_backward_requires_scalar():
    a = ad.parameter(np.ones(3))
    with GradTape() as tape:
        out = a * 2.0
    with pytest.raises(ShapeError):
        ad.backward(tape, out, [a])


def test_replay_is_reverse_recording_order():
    a = ad.parameter(np.ones(2))
    with GradTape() as tape:
        loss = ad.sum(ad.relu(a * 3.0) + a)
    ad.backward(tape, loss, [a])
    assert tape.replay_order == sorted(tape.replay_order, reverse=True)
    assert len(tape.replay_order) == len(tape)


def test_no_recording_outside_tape():
    a = ad.parameter(np.ones(2))
    out = a * 2.0
    assert isinstance(out, Tensor)
    with GradTape() as tape:
        pass
    assert len(tape) == 0


@pytest.mark.parametrize("op", ["sigmoid", "relu", "take_rows", "mean", "index", "transpose"])
def test_elementwise_and_indexing_gradients(op):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3)) + 0.05
    w = rng.normal(size=(4, 3))
    ids = np.array([[1, 0], [3, 1]])
    build, ref = {
        "sigmoid": (lambda t: ad.sum(ad.sigmoid(t) * w), lambda v: float((w / (1 + np.exp(-v))).sum())),
        "relu": (lambda t: ad.sum(ad.relu(t) * w), lambda v: float((np.maximum(v, 0) * w).sum())),
        "take_rows": (lambda t: ad.sum(ad.take_rows(t, ids) * ad.take_rows(Tensor(w), ids)),
                      lambda v: float(((v * (np.arange(4) != 0)[:, None])[ids] * w[ids]).sum())),
        "mean": (lambda t: ad.sum(ad.mean(t, axis=0) * w[0]), lambda v: float((v.mean(0) * w[0]).sum())),
        "index": (lambda t: ad.sum(t[1:3] * w[1:3]), lambda v: float((v[1:3] * w[1:3]).sum())),
        "transpose": (lambda t: ad.sum(ad.transpose(t, (1, 0)) * w.T), lambda v: float((v.T * w.T).sum())),
    }[op]
    (g,) = grad_of(build, x)
    assert np.allclose(g, numeric_grad(ref, x.copy()), atol=1e-7)


def test_cross_entropy_and_bce_gradients():
    rng = np.random.default_rng(9)
    z, t = rng.normal(size=(3, 4)), np.array([0, 3, 1])
    bits = (rng.random((3, 4)) < 0.5).astype(float)

    def ce(v):
        e = v - v.max(1, keepdims=True)
        return float((np.log(np.exp(e).sum(1)) - e[np.arange(3), t]).mean())

    def bce(v):
        s = 1 / (1 + np.exp(-v))
        return float(-(bits * np.log(s) + (1 - bits) * np.log(1 - s)).sum() / 3)

    (g1,) = grad_of(lambda x: ad.cross_entropy(x, t), z)
    (g2,) = grad_of(lambda x: ad.bce_with_logits(x, bits), z)
    assert np.allclose(g1, numeric_grad(ce, z.copy()), atol=1e-8)
    assert np.allclose(g2, numeric_grad(bce, z.copy()), atol=1e-8)


def test_full_model_finite_differences_sum_fusion():
    config, _, batch, params = fd_setup("sum", 10.0)
    errors = fd_relative_errors(params, batch, config)
    assert max(errors.values()) < 1e-4, errors
