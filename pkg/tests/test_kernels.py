"""Kernel contracts: brute-force float64 oracles, stability, determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccoe.errors import ConfigError, DimensionError, NumericError
from ccoe.kernels import causal_attention, gelu, gelu_grad, layer_norm, matmul, softmax_rows
from ccoe.rng import Rng


# --- float64 reference oracles (independent of the implementation path) -----


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def softmax_oracle(row):
    exps = [math.exp(float(v)) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def layer_norm_oracle(row, gain, bias, eps):
    xs = [float(v) for v in row]
    mu = sum(xs) / len(xs)
    var = sum((v - mu) ** 2 for v in xs) / len(xs)
    return [
        (v - mu) / math.sqrt(var + eps) * float(g) + float(b)
        for v, g, b in zip(xs, gain, bias)
    ]


def attention_oracle(q, k, v, n_heads):
    t, d = q.shape
    hd = d // n_heads
    out = np.zeros((t, d), dtype=np.float64)
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(t):
            scores = [
                float(np.dot(q[i, sl].astype(np.float64), k[j, sl].astype(np.float64)))
                / math.sqrt(hd)
                for j in range(i + 1)
            ]
            probs = softmax_oracle(scores)
            for j in range(i + 1):
                out[i, sl] += probs[j] * v[j, sl].astype(np.float64)
    return out


# --- matmul ------------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    eye = np.eye(2, dtype=np.float32)
    assert np.array_equal(matmul(eye, a), a)


def test_matmul_annihilator():
    eye = np.eye(2, dtype=np.float32)
    z = np.zeros((2, 2), dtype=np.float32)
    assert np.array_equal(matmul(eye, z), z)


def test_matmul_against_oracle_seed7():
    rng = Rng(7)
    a = rng.normal((3, 4))
    b = rng.normal((4, 2))
    assert np.abs(matmul(a, b) - matmul_oracle(a, b)).max() < 1e-5


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))


def test_matmul_nonfinite_raises():
    big = np.full((2, 2), 3e38, dtype=np.float32)
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        matmul(big, big)


@pytest.mark.parametrize("seed", range(100))
def test_matmul_oracle_sweep(seed):
    rng = Rng(seed)
    m, k, n = (int(x) for x in rng.integers(1, 7, size=3))
    a, b = rng.normal((m, k), 2.0), rng.normal((k, n), 2.0)
    assert np.abs(matmul(a, b) - matmul_oracle(a, b)).max() < 1e-5


# --- softmax -----------------------------------------------------------------


def test_softmax_symmetry():
    out = softmax_rows(np.array([[0.0, 0.0]], dtype=np.float32))
    assert np.allclose(out, [[0.5, 0.5]])


def test_softmax_extreme_logits_no_overflow():
    out = softmax_rows(np.array([[1000.0, 0.0]], dtype=np.float32))
    assert out[0, 0] > 0.999999
    assert out[0, 1] < 1e-6


def test_softmax_frozen_oracle_values():
    # softmax_oracle([1, 2, 3]) computed in float64
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    out = softmax_rows(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert np.abs(out[0] - np.array(expected)).max() < 1e-6
    assert softmax_oracle([1.0, 2.0, 3.0]) == pytest.approx(expected)


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    out = softmax_rows(np.array([row], dtype=np.float32))
    assert abs(float(out.sum()) - 1.0) < 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_softmax_oracle_sweep(seed):
    rng = Rng(1000 + seed)
    row = rng.normal((5,), 3.0)
    got = softmax_rows(row[None])[0]
    want = softmax_oracle(row)
    assert np.abs(got - np.array(want)).max() < 1e-6


# --- layer norm ----------------------------------------------------------------


def test_layer_norm_constant_row_collapses_to_zero():
    x = np.full((1, 3), 5.0, dtype=np.float32)
    out = layer_norm(x, np.ones(3, np.float32), np.zeros(3, np.float32))
    assert np.allclose(out, 0.0)


def test_layer_norm_zero_gain_returns_bias():
    rng = Rng(3)
    x = rng.normal((2, 8))
    bias = rng.normal((8,))
    out = layer_norm(x, np.zeros(8, np.float32), bias)
    assert np.array_equal(out, np.broadcast_to(bias, (2, 8)))


def test_layer_norm_oracle_seed11():
    rng = Rng(11)
    x = rng.normal((1, 16), 2.0)
    g = rng.normal((16,))
    b = rng.normal((16,))
    want = layer_norm_oracle(x[0], g, b, 1e-5)
    got = layer_norm(x, g, b, 1e-5)[0]
    assert np.abs(got - np.array(want)).max() < 1e-5


def test_layer_norm_standardizes():
    rng = Rng(12)
    x = rng.normal((4, 32), 3.0)
    out = layer_norm(x, np.ones(32, np.float32), np.zeros(32, np.float32))
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


def test_layer_norm_rejects_nonpositive_eps():
    x = np.zeros((1, 4), np.float32)
    with pytest.raises(ConfigError):
        layer_norm(x, np.ones(4, np.float32), np.zeros(4, np.float32), eps=0.0)


@pytest.mark.parametrize("seed", range(100))
def test_layer_norm_oracle_sweep(seed):
    rng = Rng(2000 + seed)
    x = rng.normal((2, 8), 2.0)
    g, b = rng.normal((8,)), rng.normal((8,))
    got = layer_norm(x, g, b, 1e-5)
    want = np.array([layer_norm_oracle(r, g, b, 1e-5) for r in x])
    assert np.abs(got - want).max() < 1e-5


# --- causal attention -----------------------------------------------------------


def test_attention_single_position_returns_v():
    rng = Rng(5)
    q, k, v = rng.normal((1, 4)), rng.normal((1, 4)), rng.normal((1, 4))
    assert np.array_equal(causal_attention(q, k, v, 2), v)


def test_attention_zero_logits_uniform_average():
    rng = Rng(6)
    t, d = 5, 4
    z = np.zeros((t, d), dtype=np.float32)
    v = rng.normal((t, d))
    out = causal_attention(z, z, v, 1)
    for i in range(t):
        assert np.abs(out[i] - v[: i + 1].mean(axis=0)).max() < 1e-6


def test_attention_oracle_seed13():
    rng = Rng(13)
    q, k, v = rng.normal((3, 4)), rng.normal((3, 4)), rng.normal((3, 4))
    got = causal_attention(q, k, v, 1)
    want = attention_oracle(q, k, v, 1)
    assert np.abs(got - want).max() < 1e-5


def test_attention_head_divisibility_error():
    z = np.zeros((2, 6), dtype=np.float32)
    with pytest.raises(ConfigError):
        causal_attention(z, z, z, 4)


@pytest.mark.parametrize("seed", range(100))
def test_attention_oracle_sweep(seed):
    rng = Rng(3000 + seed)
    t = int(rng.integers(1, 6))
    heads = int(rng.choice([1, 2]))
    d = 4 * heads
    q, k, v = rng.normal((t, d)), rng.normal((t, d)), rng.normal((t, d))
    got = causal_attention(q, k, v, heads)
    want = attention_oracle(q, k, v, heads)
    assert np.abs(got - want).max() < 1e-5


def test_attention_causality_perturbation():
    # changing row j leaves rows < j bit-identical
    rng = Rng(21)
    t, d = 6, 8
    q, k, v = rng.normal((t, d)), rng.normal((t, d)), rng.normal((t, d))
    base = causal_attention(q, k, v, 2)
    for j in (2, 4):
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        q2[j] += 1.0
        k2[j] -= 1.0
        v2[j] *= 2.0
        out = causal_attention(q2, k2, v2, 2)
        assert np.array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j:], base[j:])


def test_kernels_bit_identical_across_calls():
    rng = Rng(99)
    a, b = rng.normal((5, 6)), rng.normal((6, 3))
    x = rng.normal((4, 8), 2.0)
    g, bias = rng.normal((8,)), rng.normal((8,))
    q, k, v = rng.normal((4, 8)), rng.normal((4, 8)), rng.normal((4, 8))
    assert np.array_equal(matmul(a, b), matmul(a, b))
    assert np.array_equal(softmax_rows(x), softmax_rows(x))
    assert np.array_equal(layer_norm(x, g, bias), layer_norm(x, g, bias))
    assert np.array_equal(causal_attention(q, k, v, 2), causal_attention(q, k, v, 2))


def test_gelu_matches_finite_difference():
    x = Rng(17).normal((64,), 2.0).astype(np.float64)
    h = 1e-6
    fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert np.abs(gelu_grad(x) - fd).max() < 1e-6


def test_rng_same_seed_same_stream():
    a = Rng(123).normal((100,))
    b = Rng(123).normal((100,))
    assert np.array_equal(a, b)
    assert Rng(123).child("x", 1).uniform() == Rng(123).child("x", 1).uniform()
    assert Rng(123).child("x").uniform() != Rng(123).child("y").uniform()
