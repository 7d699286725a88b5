import io
import warnings

import numpy as np
import pytest
import scipy.linalg

from mergeforge import analysis as an
from mergeforge.checkpoint import TaskVector
from mergeforge.errors import InvalidInput
from mergeforge.linalg import OrthonormalBasis, orthonormalize, top_right_singular_vectors


def test_data_subspace_examples(rng):
    H = np.tile([1.0, 0.0, 0.0], (4, 1))
    assert np.allclose(an.data_subspace(H, 1).columns[:, 0], [1, 0, 0])
    H2 = np.array([[2.0, 0, 0], [0, 2.0, 0]])
    B = an.data_subspace(H2, 2).columns
    assert np.allclose(B @ B.T, np.diag([1, 1, 0]))
    H3 = rng.standard_normal((20, 6))
    w, U = scipy.linalg.eigh(H3.T @ H3)
    top = U[:, ::-1][:, :3]
    got = an.data_subspace(H3, 3).columns
    assert np.allclose(np.abs(np.sum(top * got, axis=0)), 1.0, atol=1e-10)


def test_data_subspace_truncation_warns():
    with pytest.warns(RuntimeWarning, match="truncated"):
        assert an.data_subspace(np.tile([1.0, 2.0, 3.0], (5, 1)), 2).rank == 1
    with pytest.raises(InvalidInput):
        an.data_subspace(np.ones((3, 3)), 4)


def test_ecdf_and_percentile():
    assert an.ecdf([1, 2, 2, 3]) == [(1, 0.25), (2, 0.75), (3, 1.0)]
    assert an.nearest_rank_percentile([15, 20, 35, 40, 50], 30) == 20
    assert an.nearest_rank_percentile([15, 20, 35, 40, 50], 100) == 50
    assert an.nearest_rank_percentile([3, 1, 2], 0) == 1


def _orthogonal_tasks(rng, T=4, r=2, d_i=12, d_o=6):
    Q = np.linalg.qr(rng.standard_normal((d_i, d_i)))[0]
    Hs = [rng.standard_normal((10, r)) @ Q[:, t * r:(t + 1) * r].T for t in range(T)]
    taus = [TaskVector({"fc": rng.standard_normal((d_o, 10)) @ H}) for H in Hs]
    return Hs, taus


def test_affinity_orthogonal_construction(rng):
    Hs, taus = _orthogonal_tasks(rng)
    subs = [{"fc": an.data_subspace(H, 2)} for H in Hs]
    rep = an.affinity_map(subs, taus, 2)
    m = rep.matrices["fc"]
    assert np.allclose(np.diag(m), 1.0, atol=1e-8)
    assert np.allclose(m - np.diag(np.diag(m)), 0.0, atol=1e-8)
    assert rep.diagonal_dominance()
    assert np.all((rep.mean >= 0) & (rep.mean <= 1))


def test_affinity_permutation_equivariant(rng):
    Hs, taus = _orthogonal_tasks(rng)
    taus = [TaskVector({"fc": t["fc"] + 0.3 * rng.standard_normal(t["fc"].shape)}) for t in taus]
    subs = [{"fc": an.data_subspace(H, 2)} for H in Hs]
    perm = [2, 0, 3, 1]
    a = an.affinity_map(subs, taus, 2).matrices["fc"]
    b = an.affinity_map([subs[i] for i in perm], [taus[i] for i in perm], 2).matrices["fc"]
    assert np.allclose(b, a[np.ix_(perm, perm)], atol=1e-12)


def test_losses_match_row_loops(rng):
    D = rng.standard_normal((5, 7))
    X = rng.standard_normal((9, 7))
    brute = sum(np.sum((D @ x) ** 2) for x in X) / len(X)
    assert an.transparency_loss(D, X) == pytest.approx(brute, rel=1e-12)
    assert an.fidelity_loss(TaskVector({"a": D, "b": D}), X) == pytest.approx(2 * brute, rel=1e-12)
    assert an.transparency_loss(np.zeros((5, 7)), X) == 0.0
    V = orthonormalize(rng.standard_normal((7, 2))).columns
    Dp = D - D @ V @ V.T
    assert an.transparency_loss(Dp, rng.standard_normal((4, 2)) @ V.T) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(InvalidInput):
        an.transparency_loss(D, np.zeros((0, 7)))
    with pytest.raises(InvalidInput):
        an.transparency_loss(D, np.zeros((3, 6)))


def test_weyl_closed_form():
    A = np.diag([3.0, 0.0])
    E = np.diag([0.0, 0.5])
    rep = an.check_weyl(A, E)
    assert rep.ok and [r.lhs for r in rep.records] == [0.0, 0.5]
    assert an.check_weyl(A, np.zeros((2, 2))).worst_margin == 0.0


def test_wedin_skips_without_gap():
    M = np.eye(3)
    rep = an.check_wedin(M, np.zeros((3, 3)), 1)
    assert rep.skipped == 1 and rep.instances == 0


def test_theorem1_noise_free_is_exact():
    rep = an.check_theorem1(12, 10, 15, 3, 0.0, seed=1, instances=20)
    assert rep.ok and max(r.lhs for r in rep.records) <= 1e-12


def test_corollary_equality_case(rng):
    tau = rng.standard_normal((4, 5))
    rep = an.check_surrogate_bounds(tau, tau, tau, rng.standard_normal((3, 5)), rng.standard_normal((3, 5)),
                                    top_right_singular_vectors(tau, 2), top_right_singular_vectors(tau, 2))
    assert rep.records[0].lhs == 0.0 and rep.ok


@pytest.mark.parametrize("name", sorted(an.CHECKS))
def test_bound_checks_have_no_violations(name):
    rep = an.CHECKS[name](200, 11)
    assert rep.instances > 0
    assert rep.violations == 0, rep.summary()
    assert rep.violations == sum(r.lhs > r.rhs + an.fp_tolerance(r.rhs) for r in rep.records)


def test_csv_emitters(rng):
    Hs, taus = _orthogonal_tasks(rng, T=2)
    rep = an.affinity_map([{"fc": an.data_subspace(H, 2)} for H in Hs], taus, 2, task_ids=["a", "b"])
    buf = io.StringIO()
    an.write_affinity_csv(rep, buf)
    lines = buf.getvalue().split("\n")
    assert lines[0] == "layer,row_task,col_task,value" and lines[1].startswith("fc,a,a,")
    assert "\r" not in buf.getvalue()
    buf = io.StringIO()
    an.write_bound_csv(an.run_weyl(3, 0), buf)
    assert buf.getvalue().startswith("instance_seed,lhs,rhs,margin\n")
