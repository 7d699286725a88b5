"""Null-space filtered continual merging with projection-aware low-rank adaptation.

For every selected layer and every new task ``t >= 2``:

1. filter: ``P = I - V V^T`` with ``V`` the top right singular vectors of the
   cumulative update ``merged_{t-1} - theta_0``;
2. adapt: a rank-``r_l`` pair ``(B, A)`` is fitted by Adam to the data-free
   objective ``||T - (M + tau B A) V_hat||_F^2``;
3. fuse: ``merged_t = merged_{t-1} + tau (P + B A)``.

``B`` has shape ``d_i x r_l`` so that ``P + B A`` is a ``d_i x d_i`` map acting
on the input side of the layer.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .baselines import MergeState, initial_state
from .checkpoint import DEFAULT_SELECTOR, Checkpoint, LayerSelector, check_compatible, compute_task_vector
from .errors import InvalidConfig, MergeForgeError, NumericalError
from .linalg import OrthonormalBasis, top_right_singular_vectors

log = logging.getLogger(__name__)

ABLATION_MODES = ("full", "null_space_only", "lora_only", "naive")


@dataclass
class NuwaConfig:
    r_p: int = 128
    r_l: int = 64
    r_v: int = 8
    lr: float = 1e-3
    max_iter: int = 50
    sigma_init: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ablation_mode: str = "full"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if min(self.r_p, self.r_l, self.r_v) < 0:
            raise InvalidConfig("ranks must be non-negative")
        if not self.lr > 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if self.max_iter < 0:
            raise InvalidConfig(f"max_iter must be >= 0, got {self.max_iter}")
        if self.ablation_mode not in ABLATION_MODES:
            raise InvalidConfig(f"unknown ablation mode {self.ablation_mode!r}; expected one of {ABLATION_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NullSpaceFilter:
    basis: OrthonormalBasis

    @cached_property
    def projector(self) -> np.ndarray:
        C = self.basis.columns
        P = np.eye(self.basis.dim) - C @ C.T
        return 0.5 * (P + P.T)

    def apply_right(self, X: np.ndarray) -> np.ndarray:
        """``X @ P`` without materialising ``P``."""
        C = self.basis.columns
        if C.shape[1] == 0:
            return np.array(X, dtype=np.float64, copy=True)
        return X - (X @ C) @ C.T


def build_filter(tau_cum: np.ndarray, r_p: int) -> NullSpaceFilter:
    tau_cum = np.asarray(tau_cum, dtype=np.float64)
    if not np.any(tau_cum):
        return NullSpaceFilter(OrthonormalBasis.empty(tau_cum.shape[1]))
    return NullSpaceFilter(top_right_singular_vectors(tau_cum, r_p))


@dataclass
class LoraAdapter:
    A: np.ndarray  # r_l x d_i
    B: np.ndarray  # d_i x r_l

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def product(self) -> np.ndarray:
        return self.B @ self.A

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.A.copy(), self.B.copy())


def layer_seed(master_seed: int, task_index: int, layer_name: str) -> np.random.SeedSequence:
    """Independent stream per (task, layer), so layer scheduling cannot change results."""
    h = int.from_bytes(hashlib.sha256(layer_name.encode("utf-8")).digest()[:8], "little")
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(task_index), h])


def init_adapter(d_o: int, d_i: int, r_l: int, sigma_init: float, seed) -> LoraAdapter:
    if r_l < 1:
        raise InvalidConfig(f"LoRA rank must be >= 1, got {r_l}")
    rng = np.random.default_rng(seed)
    return LoraAdapter(A=np.zeros((r_l, d_i)), B=rng.normal(0.0, sigma_init, size=(d_i, r_l)))


@dataclass
class ObjectiveOperands:
    T: np.ndarray
    V_hat: np.ndarray
    M: np.ndarray
    tau_t: np.ndarray
    r_a: int
    r_b: int

    @cached_property
    def MV(self) -> np.ndarray:
        return self.M @ self.V_hat


def assemble_operands(tau_cum: np.ndarray, tau_t: np.ndarray, filt: NullSpaceFilter, r_v: int,
                      use_filter: bool = True) -> ObjectiveOperands:
    """Column-wise stacking ``T = [cum V_old | tau V_t]``, ``V_hat = [V_old | V_t]``.

    ``use_filter=False`` keeps the transparency block but sets ``P = I`` inside
    ``M`` (the LoRA-only ablation).
    """
    tau_cum = np.asarray(tau_cum, dtype=np.float64)
    tau_t = np.asarray(tau_t, dtype=np.float64)
    if tau_cum.shape != tau_t.shape:
        raise InvalidConfig(f"shape mismatch {tau_cum.shape} vs {tau_t.shape}")
    V_old = filt.basis.columns
    if np.any(tau_t):
        V_new = top_right_singular_vectors(tau_t, r_v).columns
    else:
        V_new = np.zeros((tau_t.shape[1], 0))
    T = np.hstack([tau_cum @ V_old, tau_t @ V_new])
    V_hat = np.hstack([V_old, V_new])
    M = tau_cum + (filt.apply_right(tau_t) if use_filter else tau_t)
    return ObjectiveOperands(T=T, V_hat=V_hat, M=M, tau_t=tau_t, r_a=V_old.shape[1], r_b=V_new.shape[1])


def _residual(adapter: LoraAdapter, ops: ObjectiveOperands):
    tB = ops.tau_t @ adapter.B
    AV = adapter.A @ ops.V_hat
    R = ops.T - ops.MV - tB @ AV
    return R, tB, AV


def objective(adapter: LoraAdapter, ops: ObjectiveOperands) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        R, _, _ = _residual(adapter, ops)
        val = float(np.sum(R * R))
    if not math.isfinite(val):
        raise NumericalError("objective is not finite")
    return val


def objective_gradient(adapter: LoraAdapter, ops: ObjectiveOperands):
    """Analytic gradients; with ``R`` the residual, ``dA = -2 (tau B)^T R V^T`` and
    ``dB = -2 tau^T R (A V)^T``."""
    R, tB, AV = _residual(adapter, ops)
    RVt = R @ ops.V_hat.T
    grad_A = -2.0 * tB.T @ RVt
    grad_B = -2.0 * ops.tau_t.T @ (R @ AV.T)
    return grad_A, grad_B


def adam_step(param, grad, moment1, moment2, step_count, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``step_count`` starts at 1."""
    m = beta1 * moment1 + (1.0 - beta1) * grad
    v = beta2 * moment2 + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step_count)
    v_hat = v / (1.0 - beta2 ** step_count)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class AdaptResult:
    adapter: LoraAdapter
    loss_trace: list = field(default_factory=list)
    best_iter: int = 0

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def best_loss(self) -> float:
        return self.loss_trace[self.best_iter]


def adapt(adapter: LoraAdapter, ops: ObjectiveOperands, config: NuwaConfig) -> AdaptResult:
    """Run ``max_iter`` Adam steps and return the lowest-loss iterate seen."""
    A, B = adapter.A.copy(), adapter.B.copy()
    mA, vA = np.zeros_like(A), np.zeros_like(A)
    mB, vB = np.zeros_like(B), np.zeros_like(B)
    cur = LoraAdapter(A, B)
    trace = [objective(cur, ops)]
    best, best_iter = cur.copy(), 0
    for it in range(1, config.max_iter + 1):
        gA, gB = objective_gradient(cur, ops)
        A, mA, vA = adam_step(A, gA, mA, vA, it, config.lr, config.beta1, config.beta2, config.eps)
        B, mB, vB = adam_step(B, gB, mB, vB, it, config.lr, config.beta1, config.beta2, config.eps)
        cur = LoraAdapter(A, B)
        try:
            loss = objective(cur, ops)
        except NumericalError as e:
            raise NumericalError(f"{e} at iteration {it}") from None
        trace.append(loss)
        if loss < trace[best_iter]:
            best, best_iter = cur.copy(), it
    return AdaptResult(best, trace, best_iter)


def fuse(merged_prev: np.ndarray, tau_t: np.ndarray, filt: NullSpaceFilter | None,
         adapter: LoraAdapter | None) -> np.ndarray:
    """``merged_prev + tau (P + B A)``; ``filt=None`` means ``P = I``, ``adapter=None`` means ``B A = 0``."""
    tau_t = np.asarray(tau_t, dtype=np.float64)
    upd = tau_t.copy() if filt is None else filt.apply_right(tau_t)
    if adapter is not None:
        upd = upd + (tau_t @ adapter.B) @ adapter.A
    return np.asarray(merged_prev, dtype=np.float64) + upd


class LayerMergeError(MergeForgeError):
    def __init__(self, task_index: int, layer: str, cause: Exception):
        super().__init__(f"task {task_index}, layer {layer!r}: {cause}")
        self.task_index, self.layer, self.cause = task_index, layer, cause


def merge_layer(merged_prev: np.ndarray, tau_cum: np.ndarray, tau_t: np.ndarray, config: NuwaConfig,
                task_index: int, layer_name: str):
    """One fusion step for a single layer; returns the new weight and a log record."""
    mode = config.ablation_mode
    rec = {"layer": layer_name, "filter_rank": 0, "task_rank": 0, "initial_loss": None, "final_loss": None}
    if mode == "naive":
        return fuse(merged_prev, tau_t, None, None), rec
    filt = build_filter(tau_cum, config.r_p)
    rec["filter_rank"] = filt.basis.rank
    if mode == "null_space_only":
        return fuse(merged_prev, tau_t, filt, None), rec
    d_o, d_i = tau_t.shape
    adapter = init_adapter(d_o, d_i, config.r_l, config.sigma_init, layer_seed(config.seed, task_index, layer_name))
    ops = assemble_operands(tau_cum, tau_t, filt, config.r_v, use_filter=(mode == "full"))
    rec["task_rank"] = ops.r_b
    res = adapt(adapter, ops, config)
    rec.update(initial_loss=res.initial_loss, final_loss=res.best_loss, best_iter=res.best_iter)
    return fuse(merged_prev, tau_t, filt if mode == "full" else None, res.adapter), rec


def nuwa_step(state: MergeState, theta_t: Checkpoint, config: NuwaConfig) -> tuple[MergeState, dict]:
    """Fold one task model into the merged state (``state.step_index`` tasks already merged)."""
    t = state.step_index + 1
    check_compatible(state.base, theta_t, state.layers)
    if t == 1:
        return MergeState(state.base, theta_t.as_float64(), state.layers, 1, {}), {"task": 1, "layers": []}
    tau_t = compute_task_vector(theta_t, state.base, layers=state.layers)
    cum = state.cumulative

    def work(name):
        try:
            return merge_layer(state.merged[name], cum[name], tau_t[name], config, t, name)
        except MergeForgeError as e:
            raise LayerMergeError(t, name, e) from e

    if config.threads > 1 and len(state.layers) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as ex:
            results = list(ex.map(work, state.layers))
    else:
        results = [work(n) for n in state.layers]
    tensors = dict(state.merged.tensors)
    records = []
    for name, (w, rec) in zip(state.layers, results):
        tensors[name] = w
        records.append(rec)
    merged = Checkpoint(tensors, dict(state.merged.meta))
    return MergeState(state.base, merged, state.layers, t, {}), {"task": t, "layers": records}


def merge_sequence(theta_0: Checkpoint, thetas: list, sel: LayerSelector = DEFAULT_SELECTOR,
                   config: NuwaConfig | None = None, on_step=None):
    """Merge ``thetas`` in order; returns ``(merged checkpoint, per-step log)``.

    ``on_step(state, record)`` is called after every task, including the first.
    """
    config = config or NuwaConfig()
    if not thetas:
        raise InvalidConfig("need at least one task checkpoint")
    layers = sel.select(theta_0)
    state = initial_state(theta_0, layers)
    history = []
    for theta in thetas:
        state, rec = nuwa_step(state, theta, config)
        history.append(rec)
        if on_step is not None:
            on_step(state, rec)
    return state.merged, history
