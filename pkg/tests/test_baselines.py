import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mergeforge import baselines as bl
from mergeforge.checkpoint import Checkpoint, TaskVector
from mergeforge.errors import DivergenceError, IncompatibleCheckpoints, InvalidInput

small = arrays(np.float64, st.integers(1, 30), elements=st.floats(-10, 10, allow_nan=False))


def _ckpts(rng, T, shape=(4, 5)):
    base = Checkpoint(OrderedDict(w=rng.standard_normal(shape), b=rng.standard_normal(shape[0])))
    tasks = [Checkpoint(OrderedDict(w=base["w"] + rng.standard_normal(shape),
                                    b=base["b"] + rng.standard_normal(shape[0]))) for _ in range(T)]
    return base, tasks


def _tv(base, theta):
    return TaskVector(OrderedDict(w=theta["w"] - base["w"]))


def brute_ties(a, b, k):
    """Per-coordinate loop version of trim / elect / disjoint mean."""
    def trim(x):
        n = x.size
        keep = math.ceil(n * k / 100)
        order = sorted(range(n), key=lambda i: (-abs(x[i]), i))[:keep]
        out = np.zeros(n)
        for i in order:
            out[i] = x[i]
        return out
    ta, tb = trim(a.ravel()).tolist(), trim(b.ravel()).tolist()
    res = np.zeros(a.size)
    for i in range(a.size):
        s = ta[i] + tb[i]
        sign = (s > 0) - (s < 0)
        vals = [v for v in (ta[i], tb[i]) if v != 0 and ((v > 0) - (v < 0)) == sign]
        res[i] = sum(vals) / len(vals) if vals else 0.0
    return res.reshape(a.shape)


def test_wa_equals_batch_mean(rng):
    base, tasks = _ckpts(rng, 6)
    state = bl.initial_state(base, ["w"])
    for th in tasks:
        state = bl.wa_step(state, th)
    for name in ("w", "b"):
        mean = np.mean([t[name] for t in tasks], axis=0)
        assert np.max(np.abs(state.merged[name] - mean)) <= 1e-12


def test_ta_equals_batch_arithmetic(rng):
    base, tasks = _ckpts(rng, 5)
    state = bl.initial_state(base, ["w"])
    for th in tasks:
        state = bl.ta_step(state, _tv(base, th), 0.3)
    expect = base["w"] + 0.3 * sum(t["w"] - base["w"] for t in tasks)
    assert np.max(np.abs(state.merged["w"] - expect)) <= 1e-12
    assert np.array_equal(state.merged["b"], base["b"])
    assert state.step_index == 5
    assert np.allclose(state.cumulative["w"], state.merged["w"] - base["w"], atol=1e-9)


def test_ties_matches_brute_force_on_thousand_vectors():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        a = rng.integers(-3, 4, size=n).astype(float)  # integers make ties common
        b = rng.integers(-3, 4, size=n).astype(float)
        k = float(rng.choice([10, 20, 50, 100]))
        assert np.array_equal(bl.ties_merge_arrays(a, b, k), brute_ties(a, b, k))


def test_magmax_matches_brute_force_on_thousand_vectors():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        a = rng.integers(-3, 4, size=n).astype(float)
        b = rng.integers(-3, 4, size=n).astype(float)
        expect = np.array([y if abs(y) > abs(x) else x for x, y in zip(a, b)])
        assert np.array_equal(bl.magmax_arrays(a, b), expect)


@given(small, st.sampled_from([5.0, 20.0, 60.0, 100.0]), st.integers(0, 2**31 - 1))
def test_ties_support_and_magnitude(a, k, seed):
    b = np.random.default_rng(seed).standard_normal(a.shape)
    out = bl.ties_merge_arrays(a, b, k)
    support = (bl.trim_top_k(a, k) != 0) | (bl.trim_top_k(b, k) != 0)
    assert np.all(out[~support] == 0)
    assert np.all(np.abs(out) <= np.maximum(np.abs(a), np.abs(b)) + 1e-12)


@given(small, small, small)
def test_magmax_algebra(a, b, c):
    n = min(a.size, b.size, c.size)
    a, b, c = a[:n], b[:n], c[:n]
    m = bl.magmax_arrays
    assert np.array_equal(m(a, a), a)
    assert np.array_equal(np.abs(m(a, b)), np.abs(m(b, a)))
    assert np.array_equal(m(m(a, b), c), m(a, m(b, c)))


def test_single_task_accumulators_reduce_to_task_arithmetic(rng):
    base, tasks = _ckpts(rng, 1)
    tv = _tv(base, tasks[0])
    for step in (lambda s: bl.ties_step(s, tv, 0.3, 20.0), lambda s: bl.magmax_step(s, tv, 0.3)):
        st_ = step(bl.initial_state(base, ["w"]))
        assert np.allclose(st_.merged["w"], base["w"] + 0.3 * tv["w"], atol=1e-12)


def test_literal_recursive_compounds(rng):
    base, tasks = _ckpts(rng, 2)
    s1 = s2 = bl.initial_state(base, ["w"])
    for th in tasks:
        s1 = bl.magmax_step(s1, _tv(base, th), 0.5)
        s2 = bl.magmax_step(s2, _tv(base, th), 0.5, literal_recursive=True)
    acc = bl.magmax_arrays(tasks[0]["w"] - base["w"], tasks[1]["w"] - base["w"])
    assert np.allclose(s1.merged["w"], base["w"] + 0.5 * acc)
    assert np.allclose(s2.merged["w"], base["w"] + 0.5 * (tasks[0]["w"] - base["w"]) + 0.5 * acc)


def test_opcm_projection_orthogonal(rng):
    for _ in range(50):
        cum = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 9))
        tau = rng.standard_normal((6, 9))
        proj = bl.opcm_project(cum, tau, 128)
        _, _, Vt = np.linalg.svd(cum)
        V = Vt[:3].T
        assert np.linalg.norm(proj @ V) <= 1e-9 * np.linalg.norm(tau)


def test_opcm_schedule(rng):
    base, tasks = _ckpts(rng, 3)
    state = bl.initial_state(base, ["w"])
    state = bl.opcm_step(state, _tv(base, tasks[0]), alpha=0.5)
    assert np.allclose(state.merged["w"], base["w"] + 0.5 * (tasks[0]["w"] - base["w"]))
    assert bl.opcm_lambda(4, 0.5) == pytest.approx(4.0)
    with pytest.raises(InvalidInput):
        bl.opcm_step(state, _tv(base, tasks[1]), alpha=0.0)


def wudi_closed_form(ops):
    G = [t.T @ t / np.sum(t * t) for t in ops]
    lhs = sum(G)
    rhs = sum(t @ g for t, g in zip(ops, G))
    return np.linalg.lstsq(lhs.T, rhs.T, rcond=None)[0].T


def test_wudi_converges_to_normal_equations(rng):
    for _ in range(20):
        ops = [rng.standard_normal((6, 5)) for _ in range(2)]
        X = wudi_closed_form(ops)
        L = 2 * np.linalg.eigvalsh(sum(t.T @ t / np.sum(t * t) for t in ops)).max()
        out, trace = bl.wudi_layer(ops, lr=1.0 / L, iters=4000)
        best = bl.wudi_loss(X, ops)
        assert trace[-1] <= best * (1 + 1e-4) + 1e-12


def test_wudi_gradient_matches_finite_differences(rng):
    ops = [rng.standard_normal((3, 4)) for _ in range(3)]
    X = rng.standard_normal((3, 4))
    g = bl.wudi_gradient(X, ops)
    h = 1e-6
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        fd = (bl.wudi_loss(X + E, ops) - bl.wudi_loss(X - E, ops)) / (2 * h)
        assert fd == pytest.approx(g[idx], rel=1e-5, abs=1e-8)


def test_wudi_default_lr_is_monotone(rng):
    ops = [rng.standard_normal((8, 10)) for _ in range(2)]
    _, trace = bl.wudi_layer(ops, lr=1e-5, iters=50)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_wudi_divergence_is_reported(rng):
    ops = [rng.standard_normal((4, 4)) * 1e3 for _ in range(2)]
    with pytest.raises(DivergenceError):
        bl.wudi_layer(ops, lr=1e6, iters=500)


def test_shape_errors(rng):
    with pytest.raises(IncompatibleCheckpoints):
        bl.magmax_arrays(np.zeros(3), np.zeros(4))
    with pytest.raises(InvalidInput):
        bl.ties_merge_arrays(np.zeros(3), np.zeros(3), 0.0)
    base, _ = _ckpts(rng, 1)
    with pytest.raises(IncompatibleCheckpoints):
        bl.ta_step(bl.initial_state(base, ["w"]), TaskVector({"w": np.zeros((2, 2))}), 0.3)
