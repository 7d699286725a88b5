"""Data-free baseline merge rules, each written as one sequential step.

Two families exist:

* rules whose first step yields the first task model itself (weight
  averaging); their state starts at ``theta_1``;
* task-vector rules (task arithmetic, TIES, MagMax, OPCM, WUDI) whose output is
  ``theta_0 + (scaled combination of task vectors)``; their state starts at
  ``theta_0`` with ``step_index == 0``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, TaskVector, apply_update, check_compatible
from .errors import DivergenceError, IncompatibleCheckpoints, InvalidInput
from .linalg import top_right_singular_vectors


@dataclass
class MergeState:
    base: Checkpoint
    merged: Checkpoint
    layers: list
    step_index: int = 0
    scratch: dict = field(default_factory=dict)

    @property
    def cumulative(self) -> TaskVector:
        """``merged - base`` on the merge layers, in float64."""
        return TaskVector(
            OrderedDict(
                (n, np.asarray(self.merged[n], dtype=np.float64) - np.asarray(self.base[n], dtype=np.float64))
                for n in self.layers
            ),
            self.base.meta.get("model_id", ""),
        )


def initial_state(base: Checkpoint, layers) -> MergeState:
    return MergeState(base=base, merged=base.as_float64(), layers=list(layers), step_index=0)


def _with_layers(state: MergeState, new_layers: dict, **kw) -> MergeState:
    tensors = OrderedDict(state.merged.tensors)
    tensors.update(new_layers)
    merged = Checkpoint(tensors, dict(state.merged.meta))
    return replace(state, merged=merged, step_index=state.step_index + 1, **kw)


def _set_from_base(state: MergeState, tv: TaskVector, scale: float = 1.0) -> dict:
    return {n: np.asarray(state.base[n], dtype=np.float64) + scale * tv[n] for n in state.layers}


def _check_tv(state: MergeState, tv: TaskVector) -> None:
    for n in state.layers:
        if n not in tv.layers:
            raise IncompatibleCheckpoints(f"task vector lacks layer {n!r}")
        if tv[n].shape != state.base[n].shape:
            raise IncompatibleCheckpoints(f"layer {n!r}: task vector shape {tv[n].shape} != {state.base[n].shape}")


def wa_step(state: MergeState, theta_t: Checkpoint) -> MergeState:
    """Running mean over all tensors: ``((t-1) merged + theta_t) / t``."""
    check_compatible(state.merged, theta_t)
    t = state.step_index + 1
    tensors = OrderedDict()
    for name, w in state.merged.tensors.items():
        new = np.asarray(theta_t[name], dtype=np.float64)
        tensors[name] = new.copy() if t == 1 else ((t - 1) * np.asarray(w, dtype=np.float64) + new) / t
    return replace(state, merged=Checkpoint(tensors, dict(state.merged.meta)), step_index=t)


def ta_step(state: MergeState, tau_t: TaskVector, lam: float) -> MergeState:
    if not math.isfinite(lam):
        raise InvalidInput(f"scaling coefficient must be finite, got {lam}")
    _check_tv(state, tau_t)
    return _with_layers(state, {n: np.asarray(state.merged[n], dtype=np.float64) + lam * tau_t[n]
                                for n in state.layers})


def trim_top_k(x: np.ndarray, top_k_percent: float) -> np.ndarray:
    """Keep the ``ceil(n * k / 100)`` largest-magnitude entries (stable on ties)."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    n = flat.size
    keep = min(n, int(math.ceil(n * top_k_percent / 100.0 - 1e-12)))
    out = np.zeros_like(flat)
    if keep > 0:
        idx = np.argsort(-np.abs(flat), kind="stable")[:keep]
        out[idx] = flat[idx]
    return out.reshape(np.shape(x))


def ties_merge_arrays(a: np.ndarray, b: np.ndarray, top_k_percent: float) -> np.ndarray:
    """Trim both operands, elect a sign per coordinate, average the agreeing entries."""
    if not 0 < top_k_percent <= 100:
        raise InvalidInput(f"top_k_percent must be in (0, 100], got {top_k_percent}")
    if np.shape(a) != np.shape(b):
        raise IncompatibleCheckpoints(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    stacked = np.stack([trim_top_k(a, top_k_percent), trim_top_k(b, top_k_percent)])
    elected = np.sign(stacked.sum(axis=0))
    agree = (np.sign(stacked) == elected) & (stacked != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stacked, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_combine(tau_acc: TaskVector, tau_t: TaskVector, top_k_percent: float) -> TaskVector:
    return TaskVector(
        OrderedDict((n, ties_merge_arrays(v, tau_t[n], top_k_percent)) for n, v in tau_acc.layers.items()),
        tau_acc.base_id,
    )


def magmax_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise larger magnitude; exact ties keep ``a``."""
    if np.shape(a) != np.shape(b):
        raise IncompatibleCheckpoints(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    return np.where(np.abs(b) > np.abs(a), b, a)


def magmax_combine(tau_acc: TaskVector, tau_t: TaskVector) -> TaskVector:
    return TaskVector(OrderedDict((n, magmax_arrays(v, tau_t[n])) for n, v in tau_acc.layers.items()),
                      tau_acc.base_id)


def _accumulator_step(state: MergeState, tau_t: TaskVector, combine, lam: float,
                      literal_recursive: bool) -> MergeState:
    _check_tv(state, tau_t)
    acc = state.scratch.get("acc")
    # first task seeds the accumulator: single-task merging then coincides with task arithmetic
    acc = TaskVector(OrderedDict((n, tau_t[n].copy()) for n in state.layers)) if acc is None else combine(acc, tau_t)
    if literal_recursive:
        new = {n: np.asarray(state.merged[n], dtype=np.float64) + lam * acc[n] for n in state.layers}
    else:
        new = _set_from_base(state, acc, lam)
    return _with_layers(state, new, scratch={**state.scratch, "acc": acc})


def ties_step(state: MergeState, tau_t: TaskVector, lam: float = 0.3, top_k_percent: float = 20.0,
              literal_recursive: bool = False) -> MergeState:
    return _accumulator_step(state, tau_t, lambda a, b: ties_combine(a, b, top_k_percent), lam, literal_recursive)


def magmax_step(state: MergeState, tau_t: TaskVector, lam: float = 0.5,
                literal_recursive: bool = False) -> MergeState:
    return _accumulator_step(state, tau_t, magmax_combine, lam, literal_recursive)


def opcm_lambda(t: int, alpha: float) -> float:
    return math.sqrt(t) / alpha if t > 0 else 0.0


def opcm_project(tau_cum: np.ndarray, tau_t: np.ndarray, r_proj: int) -> np.ndarray:
    """Remove from ``tau_t`` its component in the top-``r_proj`` right subspace of ``tau_cum``."""
    if r_proj < 0:
        raise InvalidInput(f"r_proj must be >= 0, got {r_proj}")
    if not np.any(tau_cum):
        return tau_t.copy()
    V = top_right_singular_vectors(tau_cum, r_proj).columns
    return tau_t - (tau_t @ V) @ V.T


def opcm_step(state: MergeState, tau_t: TaskVector, alpha: float = 0.5, r_proj: int = 128) -> MergeState:
    """``merged = theta_0 + (lam_{t-1} cum + projected) / lam_t`` with ``lam_t = sqrt(t) / alpha``."""
    if r_proj < 0:
        raise InvalidInput(f"r_proj must be >= 0, got {r_proj}")
    if alpha <= 0:
        raise InvalidInput(f"alpha must be positive, got {alpha}")
    _check_tv(state, tau_t)
    t = state.step_index + 1
    lam_prev, lam_t = opcm_lambda(t - 1, alpha), opcm_lambda(t, alpha)
    cum = state.cumulative
    new = {}
    for n in state.layers:
        proj = opcm_project(cum[n], tau_t[n], r_proj)
        new[n] = np.asarray(state.base[n], dtype=np.float64) + (lam_prev * cum[n] + proj) / lam_t
    return _with_layers(state, new)


def wudi_loss(tau_m: np.ndarray, operands: list) -> float:
    total = 0.0
    for tau in operands:
        nrm = float(np.sum(tau * tau))
        if nrm == 0.0:
            continue
        r = (tau_m - tau) @ tau.T
        total += float(np.sum(r * r)) / nrm
    return total


def wudi_gradient(tau_m: np.ndarray, operands: list) -> np.ndarray:
    g = np.zeros_like(tau_m)
    for tau in operands:
        nrm = float(np.sum(tau * tau))
        if nrm == 0.0:
            continue
        g += 2.0 * ((tau_m - tau) @ tau.T) @ tau / nrm
    return g


def wudi_layer(operands: list, lr: float, iters: int) -> tuple[np.ndarray, list]:
    """Plain gradient descent from the operand mean; returns the iterate and the loss trace."""
    tau_m = np.mean(np.stack(operands), axis=0)
    trace = [wudi_loss(tau_m, operands)]
    # overflow is detected explicitly below, so silence numpy's warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(iters):
            tau_m = tau_m - lr * wudi_gradient(tau_m, operands)
            loss = wudi_loss(tau_m, operands)
            if not math.isfinite(loss) or not np.all(np.isfinite(tau_m)):
                raise DivergenceError(f"WUDI loss became non-finite at iteration {i + 1}; use a smaller lr")
            trace.append(loss)
    return tau_m, trace


def wudi_merge(tau_list: list, lr: float = 1e-5, iters: int = 50) -> TaskVector:
    if not tau_list:
        raise InvalidInput("wudi_merge needs at least one task vector")
    first = tau_list[0]
    out = OrderedDict()
    for n in first.layers:
        out[n], _ = wudi_layer([tv[n] for tv in tau_list], lr, iters)
    return TaskVector(out, first.base_id)


def wudi_step(state: MergeState, tau_t: TaskVector, lr: float = 1e-5, iters: int = 50) -> MergeState:
    _check_tv(state, tau_t)
    if state.step_index == 0:
        return _with_layers(state, _set_from_base(state, tau_t))
    merged = wudi_merge([state.cumulative, tau_t], lr, iters)
    return _with_layers(state, _set_from_base(state, merged))
