"""Synthetic continual-merging benchmark.

Each task owns an ``r_d``-dimensional input subspace ``S_t``.  Its task vector on
the merged layer is

    tau_t = L_t diag(s) R_t V_t^T   (signal, row space S_t, equal to B_t H_t)
          + L'_t diag(s') W_t^T     (cross-task term, rows inside other tasks' subspaces)
          + E_t                     (row-bounded noise)

Every task owns a private block of feature directions ``L_t`` (mutually
orthogonal across tasks).  The cross-task term maps a direction of another task
``j``'s input block into ``L_j``, dragging one of ``j``'s classes towards another,
with every ``s'`` below ``min(s)``.  Hence the top ``r_d`` right singular vectors
of the noise-free ``tau_t`` span ``S_t`` exactly, and any sum of (filtered)
updates stays block diagonal, so row spaces add up.  The cross-task term is what
makes naive merging forget.
"""
from __future__ import annotations

import csv
import json
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import InvalidConfig, UndefinedMetric
from .linalg import OrthonormalBasis
from .methods import METHODS, MethodParams, iter_merge

LAYER = "backbone.fc.weight"
BIAS = "backbone.fc.bias"
CHAIN_LAYERS = ("backbone.blocks.0.weight", "backbone.blocks.1.weight", "backbone.blocks.2.weight")


@dataclass
class SuiteConfig:
    T: int = 8
    d_i: int = 128
    d_o: int = 96
    N: int = 64
    r_d: int = 8
    overlap: float = 0.0
    noise_scale: float = 0.0
    crosstalk: float = 0.8
    crosstalk_rank: int = 2
    classes: int = 4
    class_sep: float = 2.0
    signal_scale: float = 3.0
    ridge: float = 1e-3
    n_layers: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.T < 1 or self.r_d < 1 or self.N < self.classes or self.classes < 2:
            raise InvalidConfig("need T >= 1, r_d >= 1, classes >= 2 and N >= classes")
        if not 0.0 <= self.overlap < 1.0:
            raise InvalidConfig(f"overlap must be in [0, 1), got {self.overlap}")
        if not 0.0 <= self.crosstalk < 1.0:
            raise InvalidConfig(f"crosstalk must be in [0, 1), got {self.crosstalk}")
        blocks = self.T + (1 if self.overlap > 0 else 0)
        if blocks * self.r_d > self.d_i:
            raise InvalidConfig(f"{blocks} blocks of rank {self.r_d} do not fit in d_i={self.d_i}")
        if self.T * self.r_d > self.d_o:
            raise InvalidConfig(f"T * r_d = {self.T * self.r_d} feature directions do not fit in d_o={self.d_o}")
        if self.n_layers not in (1, 3):
            raise InvalidConfig("n_layers must be 1 or 3")

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_SUITE = SuiteConfig(overlap=0.1, noise_scale=0.05)
ORTHOGONAL_SUITE = SuiteConfig(overlap=0.0, noise_scale=0.0)


@dataclass
class SyntheticTask:
    id: int
    H: np.ndarray
    labels: np.ndarray
    theta: Checkpoint
    heads: dict
    V_d: OrthonormalBasis
    construction: dict = field(default_factory=dict)

    @property
    def tau(self) -> np.ndarray:
        return self.construction["tau"]


@dataclass
class Suite:
    config: SuiteConfig
    theta_0: Checkpoint
    tasks: list
    layers: list

    def __len__(self):
        return len(self.tasks)


def _orthonormal(rng, n, k):
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    return Q * np.sign(np.diag(R))


def _row_bounded_noise(rng, d_o, d_i, psi):
    dirs = rng.standard_normal((d_o, d_i))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (psi * rng.uniform(0.0, 1.0, size=d_o))[:, None]


def _signal(rng, cfg: SuiteConfig, V: np.ndarray, L: np.ndarray):
    """Rank-r_d task signal ``L diag(s) R V^T`` and its singular values."""
    s = cfg.signal_scale * rng.uniform(1.0, 2.0, size=cfg.r_d)
    R = _orthonormal(rng, cfg.r_d, cfg.r_d)
    return (L * s) @ R @ V.T, s


def _crosstalk(rng, cfg: SuiteConfig, t: int, own, V, means, signals, s_min: float, rows: int):
    """Cross-task term of task ``t``: it drags one class of other tasks towards another.

    Input directions live in other tasks' private input blocks and output
    directions in their private feature blocks, so every update stays block
    diagonal: ``V_t`` remains the top right subspace of ``tau_t`` and row spaces
    of summed updates add up exactly.
    """
    k = min(cfg.crosstalk_rank, cfg.T - 1) if cfg.crosstalk > 0 else 0
    if k == 0:
        return np.zeros((rows, cfg.d_i)), np.zeros((cfg.d_i, 0))
    others = [j for j in range(cfg.T) if j != t]
    picks = rng.choice(others, size=k, replace=False)
    W, O = [], []
    for j in picks:
        c, c2 = rng.choice(cfg.classes, size=2, replace=False)
        mu = means[j]
        w = own[j] @ (mu[c] - mu.mean(axis=0))
        W.append(w / np.linalg.norm(w))
        O.append(signals[j] @ (V[j] @ (mu[c2] - mu[c])))
    W = np.column_stack(W)
    O = np.column_stack(O)
    O /= np.linalg.norm(O, axis=0)
    s_x = cfg.crosstalk * s_min * rng.uniform(0.8, 1.0, size=k)
    return (O * s_x) @ W.T, W


def _fit_head(F: np.ndarray, labels: np.ndarray, classes: int, ridge: float) -> np.ndarray:
    """Ridge readout ``argmin ||head F - Y||^2 + ridge ||head||^2`` (F is features x samples)."""
    Y = np.eye(classes)[:, labels]
    G = F @ F.T + ridge * np.eye(F.shape[0])
    return np.linalg.solve(G, F @ Y.T).T


def forward(weights: dict, layers, H: np.ndarray) -> np.ndarray:
    """Features (d_o x N) of the linear backbone on inputs ``H`` (N x d_i)."""
    X = H.T
    for name in layers:
        X = np.asarray(weights[name], dtype=np.float64) @ X
    return X


def generate_suite(cfg: SuiteConfig) -> Suite:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    Q = _orthonormal(rng, cfg.d_i, cfg.d_i)
    off = cfg.r_d if cfg.overlap > 0 else 0
    common = Q[:, :cfg.r_d]
    own = [Q[:, off + t * cfg.r_d: off + (t + 1) * cfg.r_d] for t in range(cfg.T)]
    a, b = cfg.overlap ** 0.25, math.sqrt(1.0 - math.sqrt(cfg.overlap))
    # pairwise affinity between V_i and V_j is a^4 = overlap
    V = [a * common + b * U if cfg.overlap > 0 else U.copy() for U in own]

    layers = list(CHAIN_LAYERS) if cfg.n_layers == 3 else [LAYER]
    shapes = [(cfg.d_i, cfg.d_i)] * (cfg.n_layers - 1) + [(cfg.d_o, cfg.d_i)]
    base = OrderedDict()
    for name, shp in zip(layers, shapes):
        base[name] = rng.standard_normal(shp) / math.sqrt(shp[1])
    base[BIAS] = np.zeros(cfg.d_o)
    theta_0 = Checkpoint(base, {"model_id": f"synth-base-{cfg.seed}", "producer": "mergeforge.bench",
                                "format_version": "1"})

    means = rng.standard_normal((cfg.T, cfg.classes, cfg.r_d)) * cfg.class_sep
    # disjoint feature blocks per task in the readout layer
    out_blocks = _orthonormal(rng, cfg.d_o, cfg.T * cfg.r_d)
    parts = []
    for t in range(cfg.T):
        per_layer = []
        for li, shp in enumerate(shapes):
            L = out_blocks[:, t * cfg.r_d:(t + 1) * cfg.r_d] if li == len(shapes) - 1 else _orthonormal(rng, shp[0], cfg.r_d)
            signal, sv = _signal(rng, cfg, V[t], L)
            psi = np.full(shp[0], cfg.noise_scale * sv.min() / math.sqrt(shp[0]))
            E = _row_bounded_noise(rng, shp[0], cfg.d_i, psi) if cfg.noise_scale > 0 else np.zeros(shp)
            per_layer.append((signal, sv, E, psi))
        parts.append(per_layer)
    last_signals = [p[-1][0] for p in parts]
    tasks = []
    for t in range(cfg.T):
        labels = np.arange(cfg.N) % cfg.classes
        Z = means[t, labels] + rng.standard_normal((cfg.N, cfg.r_d))
        H = Z @ V[t].T
        tensors = OrderedDict((k, v.copy()) for k, v in base.items())
        for name, (signal, sv, E, psi) in zip(layers, parts[t]):
            cross, W = np.zeros_like(signal), np.zeros((cfg.d_i, 0))
            if name == layers[-1]:
                # only the readout layer carries cross-task interference
                cross, W = _crosstalk(rng, cfg, t, own, V, means, last_signals, sv.min(), signal.shape[0])
            tensors[name] = base[name] + signal + cross + E
        record = {"signal": signal, "cross": cross, "E": E, "psi": psi, "W": W, "V": V[t], "overlap": cfg.overlap}
        theta = Checkpoint(tensors, {"model_id": f"synth-task-{cfg.seed}-{t}", "producer": "mergeforge.bench",
                                     "format_version": "1"})
        record["tau"] = (np.asarray(theta[layers[-1]], dtype=np.float64)
                         - np.asarray(theta_0[layers[-1]], dtype=np.float64))
        head = _fit_head(forward(theta.tensors, layers, H), labels, cfg.classes, cfg.ridge)
        tasks.append(SyntheticTask(t, H, labels, theta, {"head": head}, OrthonormalBasis(V[t]), record))
    return Suite(cfg, theta_0, tasks, layers)


def task_accuracy(weights: dict, layers, task: SyntheticTask) -> float:
    logits = task.heads["head"] @ forward(weights, layers, task.H)
    return float(np.mean(np.argmax(logits, axis=0) == task.labels))


def evaluate_acc(merged: Checkpoint, tasks, layers=(LAYER,)):
    """Per-task accuracy of ``merged`` with each task's own head, and their mean."""
    accs = [task_accuracy(merged.tensors, layers, t) for t in tasks]
    return accs, float(np.mean(accs))


def evaluate_bwt(history) -> float:
    """Mean over earlier tasks of final accuracy minus accuracy right after merging them.

    ``history[s][i]`` is the accuracy on task ``i`` after merge step ``s``.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise UndefinedMetric("history must be a T x T matrix")
    T = h.shape[0]
    if T < 2:
        raise UndefinedMetric("BWT is undefined for a single task")
    return float(np.mean([h[T - 1, i] - h[i, i] for i in range(T - 1)]))


_MASK64 = (1 << 64) - 1


def splitmix64(state: int):
    """Yield successive splitmix64 outputs from ``state``."""
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def _below(gen, n: int) -> int:
    # rejection sampling for an unbiased integer in [0, n)
    limit = (1 << 64) - ((1 << 64) % n)
    while True:
        x = next(gen)
        if x < limit:
            return x % n


def task_order(T: int, seed: int) -> list[int]:
    """Fisher-Yates permutation of ``range(T)`` driven by splitmix64(seed)."""
    if T < 1:
        raise InvalidConfig("T must be >= 1")
    perm = list(range(T))
    gen = splitmix64(int(seed) & _MASK64)
    for i in range(T - 1, 0, -1):
        j = _below(gen, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass
class BenchResult:
    method: str
    order_seed: int
    order: list
    accuracy: np.ndarray  # step x position, NaN above the diagonal
    acc: float
    bwt: float | None
    config: dict
    wall_time: float

    def rows(self):
        """``(method, order_seed, task_id, step, accuracy)`` rows for the CSV."""
        T = len(self.order)
        for s in range(T):
            for i in range(s + 1):
                yield self.method, self.order_seed, self.order[i], s + 1, float(self.accuracy[s, i])


def run_order(method: str, suite: Suite, order, params: MethodParams | None = None, order_seed: int = -1) -> BenchResult:
    tasks = [suite.tasks[i] for i in order]
    T = len(tasks)
    acc = np.full((T, T), np.nan)
    start = time.perf_counter()
    for s, (state, _) in enumerate(iter_merge(method, suite.theta_0, [t.theta for t in tasks], suite.layers, params)):
        for i in range(s + 1):
            acc[s, i] = task_accuracy(state.merged.tensors, suite.layers, tasks[i])
    wall = time.perf_counter() - start
    bwt = evaluate_bwt(acc) if T >= 2 else None
    params = params or MethodParams()
    return BenchResult(method, order_seed, list(order), acc, float(np.mean(acc[T - 1])), bwt,
                       {"suite": suite.config.to_dict(), "params": params.to_dict()}, wall)


def run_protocol(method: str, suite: Suite, orders, params: MethodParams | None = None) -> list[BenchResult]:
    """One result per order seed; ``orders`` is an iterable of seeds."""
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}; expected one of {METHODS}")
    out = []
    for seed in orders:
        try:
            out.append(run_order(method, suite, task_order(len(suite.tasks), seed), params, seed))
        except Exception as e:
            raise type(e)(f"order seed {seed}: {e}") from e
    return out


def aggregate(results) -> dict:
    """Mean and (population) standard deviation of ACC/BWT per method."""
    by = OrderedDict()
    for r in results:
        by.setdefault(r.method, []).append(r)
    out = OrderedDict()
    for m, rs in by.items():
        accs = np.array([r.acc for r in rs])
        bwts = np.array([r.bwt for r in rs if r.bwt is not None])
        out[m] = {
            "orders": [r.order_seed for r in rs],
            "acc_mean": float(accs.mean()),
            "acc_std": float(accs.std()),
            "bwt_mean": float(bwts.mean()) if bwts.size else None,
            "bwt_std": float(bwts.std()) if bwts.size else None,
        }
    return out


def write_results_csv(results, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["method", "order_seed", "task_id", "step", "accuracy"])
    for r in results:
        for row in r.rows():
            w.writerow([row[0], row[1], row[2], row[3], repr(row[4])])


def summary_json(results) -> str:
    return json.dumps(aggregate(results), indent=2, sort_keys=True) + "\n"
