"""Subspace affinity analysis and numerical checks of the alignment bounds.

Every ``check_*`` function returns a :class:`BoundCheckReport`; an instance is a
violation when ``lhs > rhs + 1e-9 * (1 + rhs)``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .linalg import (OrthonormalBasis, as_matrix, numerical_rank, principal_angle_sines, spectral_norm,
                     subspace_affinity, svd, top_right_singular_vectors)

FP_SLACK = 1e-9
MAX_RETRIES = 50


def fp_tolerance(rhs: float) -> float:
    return FP_SLACK * (1.0 + abs(rhs))


@dataclass
class BoundRecord:
    instance_seed: int
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def violated(self) -> bool:
        return self.lhs > self.rhs + fp_tolerance(self.rhs)


@dataclass
class BoundCheckReport:
    name: str
    records: list = field(default_factory=list)
    skipped: int = 0
    config: dict = field(default_factory=dict)

    def add(self, seed: int, lhs: float, rhs: float) -> None:
        self.records.append(BoundRecord(int(seed), float(lhs), float(rhs)))

    def extend(self, other: "BoundCheckReport") -> "BoundCheckReport":
        self.records.extend(other.records)
        self.skipped += other.skipped
        return self

    @property
    def instances(self) -> int:
        return len(self.records)

    @property
    def violations(self) -> int:
        return sum(r.violated for r in self.records)

    @property
    def worst_margin(self) -> float:
        return min((r.margin for r in self.records), default=math.inf)

    def slack_stats(self) -> dict:
        if not self.records:
            return {"min": None, "median": None, "max": None}
        m = np.array([r.margin for r in self.records])
        return {"min": float(m.min()), "median": float(np.median(m)), "max": float(m.max())}

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def summary(self) -> dict:
        return {
            "check": self.name,
            "instances": self.instances,
            "violations": self.violations,
            "skipped": self.skipped,
            "worst_margin": self.worst_margin if self.records else None,
            "slack": self.slack_stats(),
            "config": self.config,
        }

    def sorted(self) -> "BoundCheckReport":
        return BoundCheckReport(self.name, sorted(self.records, key=lambda r: r.instance_seed), self.skipped,
                                dict(self.config))


# ---------------------------------------------------------------- subspaces

def data_subspace(H, r_d: int) -> OrthonormalBasis:
    """Top-``r_d`` right singular vectors of the representation matrix ``H``."""
    H = as_matrix(H, "H")
    if not 1 <= r_d <= H.shape[1]:
        raise InvalidInput(f"r_d must be in [1, {H.shape[1]}], got {r_d}")
    basis = top_right_singular_vectors(H, r_d)
    if basis.rank < r_d:
        warnings.warn(f"data matrix has numerical rank {basis.rank} < requested {r_d}; basis truncated",
                      RuntimeWarning, stacklevel=2)
    return basis


def ecdf(values) -> list[tuple[float, float]]:
    """Step points ``(value, fraction <= value)`` at each distinct value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        return []
    uniq = np.unique(v)
    counts = np.searchsorted(v, uniq, side="right")
    return [(float(u), float(c) / n) for u, c in zip(uniq, counts)]


def nearest_rank_percentile(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise InvalidInput("percentile of an empty set")
    rank = max(1, int(math.ceil(q / 100.0 * v.size)))
    return float(v[rank - 1])


@dataclass
class AffinityReport:
    layers: list
    data_tasks: list
    vector_tasks: list
    matrices: dict  # layer -> (n_data x n_vector) array

    def stack(self) -> np.ndarray:
        return np.stack([self.matrices[l] for l in self.layers])

    @property
    def mean(self) -> np.ndarray:
        return self.stack().mean(axis=0)

    @property
    def p90(self) -> np.ndarray:
        s = self.stack()
        out = np.empty(s.shape[1:])
        for i in range(s.shape[1]):
            for j in range(s.shape[2]):
                out[i, j] = nearest_rank_percentile(s[:, i, j], 90)
        return out

    def matched_values(self) -> np.ndarray:
        s = self.stack()
        n = min(s.shape[1], s.shape[2])
        return np.concatenate([s[:, i, i] for i in range(n)])

    def mismatched_values(self) -> np.ndarray:
        s = self.stack()
        mask = ~np.eye(s.shape[1], s.shape[2], dtype=bool)
        return s[:, mask].ravel()

    def ecdf_series(self) -> dict:
        return {"matched": ecdf(self.matched_values()), "mismatched": ecdf(self.mismatched_values())}

    def diagonal_dominance(self) -> bool:
        """Every task's matched affinity exceeds all its mismatched ones (layer means)."""
        m = self.mean
        n = min(m.shape)
        for i in range(n):
            others = np.concatenate([np.delete(m[i, :], i), np.delete(m[:, i], i)])
            if others.size and not m[i, i] > others.max():
                return False
        return True

    def summary(self) -> dict:
        return {
            "layers": list(self.layers),
            "data_tasks": list(self.data_tasks),
            "vector_tasks": list(self.vector_tasks),
            "mean": self.mean.tolist(),
            "p90": self.p90.tolist(),
            "diagonal_dominance": self.diagonal_dominance(),
        }


def affinity_map(data_subspaces: list, task_vectors: list, r_v: int, layers=None, task_ids=None) -> AffinityReport:
    """Affinity of every (data task, vector task) pair per layer.

    ``data_subspaces[i]`` maps layer -> OrthonormalBasis; ``task_vectors[j]`` maps
    layer -> matrix (a :class:`TaskVector` or plain dict).
    """
    if len(data_subspaces) == 0 or len(task_vectors) == 0:
        raise InvalidInput("need at least one data subspace and one task vector")
    tv_layers = [getattr(tv, "layers", tv) for tv in task_vectors]
    layers = list(layers) if layers is not None else list(data_subspaces[0].keys())
    for l in layers:
        if any(l not in d for d in data_subspaces) or any(l not in t for t in tv_layers):
            raise InvalidInput(f"layer {l!r} missing from some inputs")
    ids = list(task_ids) if task_ids is not None else list(range(max(len(data_subspaces), len(task_vectors))))
    matrices = {}
    for l in layers:
        vhats = [top_right_singular_vectors(t[l], r_v) for t in tv_layers]
        m = np.zeros((len(data_subspaces), len(vhats)))
        for i, d in enumerate(data_subspaces):
            for j, vh in enumerate(vhats):
                m[i, j] = subspace_affinity(d[l], vh)
        matrices[l] = m
    return AffinityReport(layers, ids[:len(data_subspaces)], ids[:len(task_vectors)], matrices)


# ---------------------------------------------------------------- data losses

def _feature_loss(delta, X) -> float:
    delta = as_matrix(delta, "delta")
    X = as_matrix(X, "X")
    if X.shape[0] == 0:
        raise InvalidInput("feature matrix has no rows")
    if delta.shape[1] != X.shape[1]:
        raise InvalidInput(f"dimension mismatch: delta {delta.shape} vs X {X.shape}")
    out = delta @ X.T
    return float(np.sum(out * out)) / X.shape[0]


def _delta_layers(delta):
    return list(getattr(delta, "layers", {"_": delta}).values())


def transparency_loss(merged_delta_step, X_old) -> float:
    """Mean over old-task rows of ``||(cum_t - cum_{t-1}) x^T||^2``, summed over layers."""
    return sum(_feature_loss(d, X_old) for d in _delta_layers(merged_delta_step))


def fidelity_loss(merged_minus_tau, X_new) -> float:
    """Mean over new-task rows of ``||(cum_t - tau_t) x^T||^2``, summed over layers."""
    return sum(_feature_loss(d, X_new) for d in _delta_layers(merged_minus_tau))


# ---------------------------------------------------------------- bound checks

def misalignment(V_d: OrthonormalBasis, V_hat: OrthonormalBasis) -> float:
    return 1.0 - subspace_affinity(V_d, V_hat)


def corollary_rhs(diff: np.ndarray, X: np.ndarray, V_hat: OrthonormalBasis, r_d: int, zeta_sq: float) -> float:
    s1 = spectral_norm(X)
    proj = diff @ V_hat.columns
    return 2.0 * s1 ** 2 * (float(np.sum(proj * proj)) + r_d * zeta_sq * spectral_norm(diff) ** 2)


def _fro2(a: np.ndarray) -> float:
    return float(np.sum(a * a))


def check_surrogate_bounds(tilde_tau_le_t, tilde_tau_prev, tau_t, X_old, X_new, V_hat_old: OrthonormalBasis,
                           V_hat_new: OrthonormalBasis, zeta_old_sq: float | None = None,
                           zeta_new_sq: float | None = None, seed: int = 0) -> BoundCheckReport:
    """Both data-free upper bounds for one merge step.

    When a misalignment bound is not supplied it is taken as the measured
    misalignment of the feature subspace, the tightest value the bound admits.
    """
    rep = BoundCheckReport("surrogate")
    for diff, X, V_hat, zsq in ((tilde_tau_le_t - tilde_tau_prev, X_old, V_hat_old, zeta_old_sq),
                                (tilde_tau_le_t - tau_t, X_new, V_hat_new, zeta_new_sq)):
        X = as_matrix(X)
        res = svd(X)
        r_d = numerical_rank(res.singular_values)
        if r_d == 0:
            rep.add(seed, 0.0, 0.0)
            continue
        if zsq is None:
            zsq = misalignment(OrthonormalBasis(res.V[:, :r_d]), V_hat)
        rep.add(seed, _fro2(diff @ X.T), corollary_rhs(diff, X, V_hat, r_d, zsq))
    return rep


@dataclass
class AlignedInstance:
    """``tau = B H + E`` with ``rank(B H) = r_d`` and row norms ``||E_k|| <= psi_k``."""

    H: np.ndarray
    B: np.ndarray
    E: np.ndarray
    psi: np.ndarray
    V_d: OrthonormalBasis

    @property
    def T0(self) -> np.ndarray:
        return self.B @ self.H

    @property
    def tau(self) -> np.ndarray:
        return self.T0 + self.E

    @property
    def sigma_rd(self) -> float:
        r_d = self.V_d.rank
        return float(np.linalg.svd(self.T0, compute_uv=False)[r_d - 1])

    def perturbation_bound(self) -> float:
        return math.sqrt(self.E.shape[0]) * float(np.max(self.psi)) if self.psi.size else 0.0

    def stable(self) -> bool:
        return self.sigma_rd > self.perturbation_bound()

    def zeta_sq(self) -> float:
        p = self.perturbation_bound()
        return (p / (self.sigma_rd - p)) ** 2


def random_aligned_instance(rng: np.random.Generator, d_o: int, d_i: int, N: int, r_d: int,
                            noise_scale: float) -> AlignedInstance:
    """``H`` of rank ``r_d``; each error row has norm ``psi_k = noise_scale * u_k * sigma_rd / sqrt(d_o)``."""
    Z = rng.standard_normal((N, r_d))
    W = rng.standard_normal((r_d, d_i))
    H = Z @ W
    B = rng.standard_normal((d_o, N)) / math.sqrt(N)
    T0 = B @ H
    s = np.linalg.svd(T0, compute_uv=False)
    sig = s[r_d - 1]
    psi = noise_scale * rng.uniform(0.5, 1.0, size=d_o) * sig / math.sqrt(d_o)
    dirs = rng.standard_normal((d_o, d_i))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    E = dirs * (psi * rng.uniform(0.0, 1.0, size=d_o))[:, None]
    return AlignedInstance(H, B, E, psi, top_right_singular_vectors(H, r_d))


def check_theorem1(d_o: int, d_i: int, N: int, r_d: int, noise_scale: float, seed: int,
                   instances: int = 1, r_v: int | None = None) -> BoundCheckReport:
    """Misalignment of the top-``r_v`` task subspace against ``zeta^2``."""
    r_v = r_d if r_v is None else r_v
    if r_v < r_d or r_d < 1 or r_d > min(d_o, d_i, N):
        raise InvalidInput(f"need 1 <= r_d <= min(d_o, d_i, N) and r_v >= r_d (got r_d={r_d}, r_v={r_v})")
    rep = BoundCheckReport("theorem1", config=dict(d_o=d_o, d_i=d_i, N=N, r_d=r_d, r_v=r_v,
                                                    noise_scale=noise_scale, seed=seed))
    for k in range(instances):
        inst_seed = seed + k
        rng = np.random.default_rng(inst_seed)
        for _ in range(MAX_RETRIES):
            inst = random_aligned_instance(rng, d_o, d_i, N, r_d, noise_scale)
            if inst.V_d.rank == r_d and inst.stable():
                break
        else:
            rep.skipped += 1
            continue
        V_hat = top_right_singular_vectors(inst.tau, r_v)
        rep.add(inst_seed, misalignment(inst.V_d, V_hat), inst.zeta_sq())
    return rep


def check_corollary1(d_o: int, d_i: int, N: int, r_d: int, r_v: int, seed: int,
                     instances: int = 1, noise_scale: float = 0.5) -> BoundCheckReport:
    """``||(rho - tau) X^T||_F^2 <= 2 s1(X)^2 (||(rho - tau) V_hat||_F^2 + r_d zeta^2 ||rho - tau||_2^2)``."""
    rep = BoundCheckReport("corollary1", config=dict(d_o=d_o, d_i=d_i, N=N, r_d=r_d, r_v=r_v,
                                                      noise_scale=noise_scale, seed=seed))
    for k in range(instances):
        inst_seed = seed + k
        rng = np.random.default_rng(inst_seed)
        for _ in range(MAX_RETRIES):
            inst = random_aligned_instance(rng, d_o, d_i, N, r_d, noise_scale)
            if inst.V_d.rank == r_d and inst.stable():
                break
        else:
            rep.skipped += 1
            continue
        tau = inst.tau
        V_hat = top_right_singular_vectors(tau, r_v)
        rho = tau + rng.standard_normal(tau.shape) * rng.uniform(0.1, 2.0)
        diff = rho - tau
        rep.add(inst_seed, _fro2(diff @ inst.H.T), corollary_rhs(diff, inst.H, V_hat, r_d, inst.zeta_sq()))
    return rep


def check_weyl(A, E, seed: int = 0) -> BoundCheckReport:
    """``|s_j(A + E) - s_j(A)| <= ||E||_2`` for every j (one record per j)."""
    A, E = as_matrix(A, "A"), as_matrix(E, "E")
    s_a = np.linalg.svd(A, compute_uv=False)
    s_ae = np.linalg.svd(A + E, compute_uv=False)
    e2 = spectral_norm(E)
    rep = BoundCheckReport("weyl")
    for j in range(s_a.size):
        rep.add(seed, abs(s_ae[j] - s_a[j]), e2)
    return rep


def check_wedin(M, H, r: int, seed: int = 0) -> BoundCheckReport:
    """Largest principal-angle sine of the top-``r`` singular subspaces vs ``||H||_2 / gap``.

    The gap is ``sigma_r(M) - sigma_{r+1}(M + H)``; instances without a positive
    gap are counted as skipped.
    """
    M, H = as_matrix(M, "M"), as_matrix(H, "H")
    rep = BoundCheckReport("wedin")
    sm, sh = svd(M), svd(M + H)
    if r < 1 or r > sm.singular_values.size:
        raise InvalidInput(f"r must be in [1, {sm.singular_values.size}]")
    nxt = sh.singular_values[r] if r < sh.singular_values.size else 0.0
    gap = sm.singular_values[r - 1] - nxt
    if gap <= 0:
        rep.skipped += 1
        return rep
    sin_v = principal_angle_sines(OrthonormalBasis(sm.V[:, :r]), OrthonormalBasis(sh.V[:, :r])).max()
    sin_u = principal_angle_sines(OrthonormalBasis(sm.U[:, :r]), OrthonormalBasis(sh.U[:, :r])).max()
    rep.add(seed, max(sin_u, sin_v), spectral_norm(H) / gap)
    return rep


def run_weyl(instances: int, seed: int) -> BoundCheckReport:
    rep = BoundCheckReport("weyl", config=dict(instances=instances, seed=seed))
    for k in range(instances):
        rng = np.random.default_rng(seed + k)
        m, n = rng.integers(1, 12, size=2)
        A = rng.standard_normal((m, n))
        E = rng.standard_normal((m, n)) * rng.choice([0.0, 1e-3, 0.1, 1.0, 10.0])
        rep.extend(check_weyl(A, E, seed + k))
    return rep


def run_wedin(instances: int, seed: int) -> BoundCheckReport:
    rep = BoundCheckReport("wedin", config=dict(instances=instances, seed=seed))
    for k in range(instances):
        rng = np.random.default_rng(seed + k)
        m, n = rng.integers(3, 14, size=2)
        r = int(rng.integers(1, min(m, n)))
        # planted gap: top r singular values well above the rest
        U, _ = np.linalg.qr(rng.standard_normal((m, m)))
        V, _ = np.linalg.qr(rng.standard_normal((n, n)))
        k_all = min(m, n)
        s = np.concatenate([rng.uniform(2.0, 5.0, r), rng.uniform(0.0, 1.0, k_all - r)])
        s = np.sort(s)[::-1]
        M = (U[:, :k_all] * s) @ V[:, :k_all].T
        H = rng.standard_normal((m, n)) * rng.uniform(0.0, 0.8) / math.sqrt(max(m, n))
        rep.extend(check_wedin(M, H, r, seed + k))
    return rep


def run_theorem1(instances: int, seed: int) -> BoundCheckReport:
    """Sweep of shapes and noise levels, including near the stability boundary."""
    rep = BoundCheckReport("theorem1", config=dict(instances=instances, seed=seed))
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        d_o, d_i = (int(v) for v in rng.integers(6, 24, size=2))
        r_d = int(rng.integers(1, min(d_o, d_i) // 2 + 1))
        N = int(rng.integers(r_d, 30))
        r_v = int(rng.integers(r_d, min(d_o, d_i) + 1))
        noise = float(rng.choice([0.0, rng.uniform(0, 0.5), rng.uniform(0.5, 0.99)]))
        rep.extend(check_theorem1(d_o, d_i, N, r_d, noise, seed * 100003 + k, 1, r_v))
    return rep


def run_corollary1(instances: int, seed: int) -> BoundCheckReport:
    rep = BoundCheckReport("corollary1", config=dict(instances=instances, seed=seed))
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        d_o, d_i = (int(v) for v in rng.integers(6, 24, size=2))
        r_d = int(rng.integers(1, min(d_o, d_i) // 2 + 1))
        N = int(rng.integers(r_d, 30))
        r_v = int(rng.integers(r_d, min(d_o, d_i) + 1))
        rep.extend(check_corollary1(d_o, d_i, N, r_d, r_v, seed * 100003 + k, 1, float(rng.uniform(0, 0.95))))
    return rep


def run_surrogate(instances: int, seed: int) -> BoundCheckReport:
    """Random merge steps ``cum_t = cum_{t-1} + tau (P + B A)`` with aligned feature matrices."""
    from .nuwa import build_filter

    rep = BoundCheckReport("surrogate", config=dict(instances=instances, seed=seed))
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        d_o, d_i = (int(v) for v in rng.integers(6, 20, size=2))
        r = int(rng.integers(1, min(d_o, d_i) // 2 + 1))
        N = int(rng.integers(r, 25))
        old = random_aligned_instance(rng, d_o, d_i, N, r, float(rng.uniform(0, 0.9)))
        new = random_aligned_instance(rng, d_o, d_i, N, r, float(rng.uniform(0, 0.9)))
        cum_prev, tau_t = old.tau, new.tau
        filt = build_filter(cum_prev, int(rng.integers(0, d_i + 1)))
        BA = rng.standard_normal((d_i, d_i)) * rng.choice([0.0, 0.01, 0.3])
        cum_t = cum_prev + filt.apply_right(tau_t) + tau_t @ BA
        V_old = top_right_singular_vectors(cum_prev, int(rng.integers(r, d_i + 1)))
        V_new = top_right_singular_vectors(tau_t, int(rng.integers(r, d_i + 1)))
        zo = old.zeta_sq() if old.stable() else None
        zn = new.zeta_sq() if new.stable() else None
        rep.extend(check_surrogate_bounds(cum_t, cum_prev, tau_t, old.H, new.H, V_old, V_new, zo, zn, seed=k))
    return rep


CHECKS = {
    "theorem1": run_theorem1,
    "corollary1": run_corollary1,
    "weyl": run_weyl,
    "wedin": run_wedin,
    "surrogate": run_surrogate,
}


# ---------------------------------------------------------------- CSV emitters

def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_affinity_csv(report: AffinityReport, fh) -> None:
    w = _writer(fh)
    w.writerow(["layer", "row_task", "col_task", "value"])
    for l in report.layers:
        m = report.matrices[l]
        for i, a in enumerate(report.data_tasks):
            for j, b in enumerate(report.vector_tasks):
                w.writerow([l, a, b, repr(float(m[i, j]))])


def write_ecdf_csv(series, fh) -> None:
    w = _writer(fh)
    w.writerow(["value", "cumulative_fraction"])
    for v, f in series:
        w.writerow([repr(float(v)), repr(float(f))])


def write_bound_csv(report: BoundCheckReport, fh) -> None:
    w = _writer(fh)
    w.writerow(["instance_seed", "lhs", "rhs", "margin"])
    for r in report.sorted().records:
        w.writerow([r.instance_seed, repr(r.lhs), repr(r.rhs), repr(r.margin)])
