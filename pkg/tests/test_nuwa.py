from collections import OrderedDict

import numpy as np
import pytest

from mergeforge.checkpoint import Checkpoint, LayerSelector
from mergeforge.errors import InvalidConfig, MergeForgeError
from mergeforge.linalg import OrthonormalBasis, top_right_singular_vectors
from mergeforge.nuwa import (LoraAdapter, NuwaConfig, adam_step, adapt, assemble_operands, build_filter, fuse,
                             init_adapter, layer_seed, merge_sequence, objective, objective_gradient)


def random_instance(rng, d_o=7, d_i=9, r_l=3, r_p=4, r_v=2):
    cum = rng.standard_normal((d_o, 3)) @ rng.standard_normal((3, d_i))
    tau = rng.standard_normal((d_o, d_i))
    filt = build_filter(cum, r_p)
    ops = assemble_operands(cum, tau, filt, r_v)
    ad = LoraAdapter(rng.standard_normal((r_l, d_i)), rng.standard_normal((d_i, r_l)))
    return cum, tau, filt, ops, ad


def test_filter_examples(rng):
    f0 = build_filter(np.zeros((3, 4)), 8)
    assert f0.basis.rank == 0 and np.array_equal(f0.projector, np.eye(4))
    e1 = np.zeros((2, 3))
    e1[0, 0] = 2.0
    f1 = build_filter(e1, 1)
    assert np.allclose(f1.projector @ [1, 0, 0], 0) and np.allclose(f1.projector @ [0, 1, 0], [0, 1, 0])
    cum = rng.standard_normal((20, 5)) @ rng.standard_normal((5, 30))
    f = build_filter(cum, 128)
    assert f.basis.rank == 5
    assert np.linalg.norm(cum @ f.projector) <= 1e-8 * np.linalg.norm(cum)
    P = f.projector
    assert np.allclose(P @ f.basis.columns, 0, atol=1e-10)
    assert np.allclose(P, P.T) and np.allclose(P @ P, P, atol=1e-12)
    X = rng.standard_normal((4, 30))
    assert np.allclose(f.apply_right(X), X @ P, atol=1e-12)


def test_adapter_init():
    a = init_adapter(5, 7, 3, 0.02, layer_seed(0, 2, "fc"))
    b = init_adapter(5, 7, 3, 0.02, layer_seed(0, 2, "fc"))
    assert a.B.shape == (7, 3) and a.A.shape == (3, 7)
    assert not a.A.any()
    assert np.array_equal(a.B, b.B)
    assert not np.array_equal(a.B, init_adapter(5, 7, 3, 0.02, layer_seed(0, 2, "fc2")).B)
    with pytest.raises(InvalidConfig):
        init_adapter(5, 7, 0, 0.02, 0)


def test_adapter_init_std():
    big = init_adapter(1, 1000, 1000, 0.02, 1)
    assert abs(big.B.std() / 0.02 - 1) < 0.02
    assert abs(big.B.mean()) < 1e-3


def test_operand_blocks(rng):
    cum, tau, filt, ops, _ = random_instance(rng)
    V_old = filt.basis.columns
    V_new = top_right_singular_vectors(tau, 2).columns
    assert np.allclose(ops.T[:, :ops.r_a], cum @ V_old, atol=1e-10)
    assert np.allclose(ops.T[:, ops.r_a:], tau @ V_new, atol=1e-10)
    assert np.allclose(ops.M, cum + tau @ filt.projector, atol=1e-10)
    assert np.allclose(ops.V_hat, np.hstack([V_old, V_new]))


def test_operands_first_task_and_zero_tau(rng):
    tau = rng.standard_normal((4, 6))
    ops = assemble_operands(np.zeros((4, 6)), tau, build_filter(np.zeros((4, 6)), 8), 2)
    assert ops.r_a == 0 and np.allclose(ops.M, tau)
    assert np.allclose(ops.T, tau @ top_right_singular_vectors(tau, 2).columns)
    cum = rng.standard_normal((4, 6))
    ops0 = assemble_operands(cum, np.zeros((4, 6)), build_filter(cum, 8), 2)
    assert ops0.r_b == 0
    ad = init_adapter(4, 6, 2, 0.02, 0)
    assert objective(ad, ops0) == pytest.approx(0.0, abs=1e-20)


def test_objective_decomposition(rng):
    for _ in range(200):
        cum, tau, filt, ops, ad = random_instance(rng)
        new_cum = cum + tau @ (filt.projector + ad.B @ ad.A)
        V_old = filt.basis.columns
        V_new = ops.V_hat[:, ops.r_a:]
        expect = (np.sum(((new_cum - cum) @ V_old) ** 2) + np.sum(((new_cum - tau) @ V_new) ** 2))
        L = objective(ad, ops)
        assert abs(L - expect) <= 1e-9 * (1 + L)


def test_objective_trivial_cases(rng):
    _, _, _, ops, ad = random_instance(rng)
    zero = LoraAdapter(np.zeros_like(ad.A), ad.B)
    assert objective(zero, ops) == pytest.approx(np.sum((ops.T - ops.M @ ops.V_hat) ** 2))
    gA, gB = objective_gradient(zero, ops)
    assert not gB.any()
    assert np.any(gA)


def _fd(f, X, h=1e-6):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h * max(1.0, abs(X[idx]))
        g[idx] = (f(X + E) - f(X - E)) / (2 * E[idx])
    return g


def test_gradient_matches_finite_differences(rng):
    for _ in range(20):
        _, _, _, ops, ad = random_instance(rng, d_o=4, d_i=5, r_l=2, r_p=2, r_v=2)
        gA, gB = objective_gradient(ad, ops)
        fA = _fd(lambda A: objective(LoraAdapter(A, ad.B), ops), ad.A)
        fB = _fd(lambda B: objective(LoraAdapter(ad.A, B), ops), ad.B)
        assert np.linalg.norm(gA - fA) <= 1e-4 * np.linalg.norm(fA)
        assert np.linalg.norm(gB - fB) <= 1e-4 * np.linalg.norm(fB)


def reference_adam(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(x)
    return out


def test_adam_examples():
    p, m, v = adam_step(np.array([1.0]), np.array([0.0]), np.zeros(1), np.zeros(1), 1, 0.1)
    assert p[0] == 1.0
    p, _, _ = adam_step(np.array([0.0]), np.array([3.0]), np.zeros(1), np.zeros(1), 1, 0.1)
    assert p[0] == pytest.approx(-0.1 * 3 / (3 + 1e-8), rel=1e-12)
    grad = lambda x: 2 * (x - 3.0)
    ref = reference_adam(5.0, grad, 10, 0.05)
    x, m, v = np.array(5.0), np.zeros(()), np.zeros(())
    for t in range(1, 11):
        x, m, v = adam_step(x, grad(x), m, v, t, 0.05)
        assert abs(float(x) - ref[t - 1]) <= 1e-12


def test_adapt_contract(rng):
    _, _, _, ops, _ = random_instance(rng)
    ad = init_adapter(7, 9, 3, 0.02, 0)
    same = adapt(ad, ops, NuwaConfig(max_iter=0))
    assert np.array_equal(same.adapter.A, ad.A) and np.array_equal(same.adapter.B, ad.B)
    res = adapt(ad, ops, NuwaConfig(max_iter=50, lr=1e-2))
    assert len(res.loss_trace) == 51
    assert res.best_loss == min(res.loss_trace) <= res.initial_loss
    assert objective(res.adapter, ops) == pytest.approx(res.best_loss, rel=1e-12)
    assert not np.array_equal(ad.A, res.adapter.A)  # input not mutated, output moved
    assert not ad.A.any()


def test_adapt_at_optimum_stays(rng):
    cum = rng.standard_normal((5, 6))
    ops = assemble_operands(cum, np.zeros((5, 6)), build_filter(cum, 8), 2)
    ad = init_adapter(5, 6, 2, 0.02, 0)
    res = adapt(ad, ops, NuwaConfig(max_iter=20))
    assert max(res.loss_trace) == 0.0
    assert np.array_equal(res.adapter.A, ad.A)


def test_fuse_oracle(rng):
    W = rng.standard_normal((4, 6))
    tau = rng.standard_normal((4, 6))
    filt = build_filter(rng.standard_normal((4, 6)), 2)
    ad = LoraAdapter(rng.standard_normal((2, 6)), rng.standard_normal((6, 2)))
    out = fuse(W, tau, filt, ad)
    oracle = np.zeros_like(W)
    P = filt.projector
    BA = ad.B @ ad.A
    for i in range(4):
        for j in range(6):
            oracle[i, j] = W[i, j] + sum(tau[i, k] * (P[k, j] + BA[k, j]) for k in range(6))
    assert np.allclose(out, oracle, atol=1e-12)
    assert np.array_equal(fuse(W, tau, None, None), W + tau)


def _two_layer_models(rng, T=3):
    base = Checkpoint(OrderedDict([("l1.weight", rng.standard_normal((5, 8))),
                                   ("l2.weight", rng.standard_normal((6, 5))),
                                   ("head.weight", rng.standard_normal((2, 6)))]))
    tasks = []
    for t in range(T):
        d = OrderedDict((k, v + 0.3 * rng.standard_normal(v.shape)) for k, v in base.tensors.items())
        tasks.append(Checkpoint(d, {"model_id": f"t{t}"}))
    return base, tasks


def test_single_task_is_bit_exact(rng):
    base, tasks = _two_layer_models(rng, 1)
    out, hist = merge_sequence(base, tasks)
    for k in base.names():
        assert np.array_equal(out[k], tasks[0][k])
    assert len(hist) == 1


def test_orthogonal_tasks_are_transparent(rng):
    Q = np.linalg.qr(rng.standard_normal((12, 12)))[0]
    V1, V2 = Q[:, :3], Q[:, 3:6]
    base = Checkpoint({"fc.weight": rng.standard_normal((8, 12))})
    t1 = Checkpoint({"fc.weight": base["fc.weight"] + rng.standard_normal((8, 3)) @ V1.T})
    t2 = Checkpoint({"fc.weight": base["fc.weight"] + rng.standard_normal((8, 3)) @ V2.T})
    out, _ = merge_sequence(base, [t1, t2], config=NuwaConfig(ablation_mode="null_space_only"))
    X = rng.standard_normal((10, 3)) @ V1.T
    assert np.abs(out["fc.weight"] @ X.T - t1["fc.weight"] @ X.T).max() <= 1e-8


def test_transparency_invariant_per_step(rng):
    base, tasks = _two_layer_models(rng, 4)
    cfg = NuwaConfig(r_p=3, ablation_mode="null_space_only")
    seen = []

    def check(state, rec):
        seen.append(state.cumulative)

    merge_sequence(base, tasks, config=cfg, on_step=check)
    for t in range(1, 4):
        for name in seen[t].names():
            prev = seen[t - 1][name]
            V = top_right_singular_vectors(prev, 3).columns
            step = seen[t][name] - prev
            tau = tasks[t][name].astype(np.float64) - base[name]
            for v in V.T:
                assert np.linalg.norm(step @ v) <= 1e-8 * np.linalg.norm(tau)


def test_merge_is_deterministic_and_thread_independent(rng):
    base, tasks = _two_layer_models(rng, 3)
    a, _ = merge_sequence(base, tasks, config=NuwaConfig(seed=5, threads=1))
    b, _ = merge_sequence(base, tasks, config=NuwaConfig(seed=5, threads=4))
    c, _ = merge_sequence(base, tasks, config=NuwaConfig(seed=6))
    for k in base.names():
        assert np.array_equal(a[k], b[k])
    assert not np.array_equal(a["l1.weight"], c["l1.weight"])
    assert a.shapes() == base.shapes()


def test_ablation_modes_differ(rng):
    base, tasks = _two_layer_models(rng, 2)
    outs = {m: merge_sequence(base, tasks, config=NuwaConfig(ablation_mode=m))[0]["l1.weight"]
            for m in ("full", "null_space_only", "lora_only", "naive")}
    naive = base["l1.weight"] + sum(t["l1.weight"] - base["l1.weight"] for t in tasks)
    assert np.allclose(outs["naive"], naive)
    assert not np.allclose(outs["full"], outs["null_space_only"])
    assert not np.allclose(outs["lora_only"], outs["naive"])


def test_layer_errors_name_task_and_layer(rng):
    base, tasks = _two_layer_models(rng, 2)
    bad = tasks[1].copy()
    bad.tensors["l2.weight"] = np.full((6, 5), 1e200)
    with pytest.raises(MergeForgeError, match=r"task 2, layer 'l2.weight'"):
        merge_sequence(base, [tasks[0], bad], sel=LayerSelector(include_patterns=("l2*",)))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        NuwaConfig(lr=0)
    with pytest.raises(InvalidConfig):
        NuwaConfig(max_iter=-1)
    with pytest.raises(InvalidConfig):
        NuwaConfig(ablation_mode="both")
