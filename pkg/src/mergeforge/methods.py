"""Uniform sequential driver over every merge rule."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines as bl
from .checkpoint import Checkpoint, compute_task_vector
from .errors import InvalidConfig, MergeForgeError, NumericalError
from .nuwa import NuwaConfig, nuwa_step

METHODS = ("nuwa", "nuwa_null_only", "nuwa_lora_only", "naive", "wa", "ta", "ties", "magmax", "opcm", "wudi")

_ABLATION = {"nuwa": "full", "nuwa_null_only": "null_space_only", "nuwa_lora_only": "lora_only", "naive": "naive"}


@dataclass
class BaselineParams:
    ta_lambda: float = 0.3
    ties_lambda: float = 0.3
    ties_top_k: float = 20.0
    magmax_lambda: float = 0.5
    opcm_alpha: float = 0.5
    opcm_r_proj: int = 128
    wudi_lr: float = 1e-5
    wudi_iters: int = 50
    literal_recursive: bool = False


@dataclass
class MethodParams:
    nuwa: NuwaConfig = field(default_factory=NuwaConfig)
    baseline: BaselineParams = field(default_factory=BaselineParams)

    def to_dict(self) -> dict:
        return {"nuwa": asdict(self.nuwa), "baseline": asdict(self.baseline)}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodParams":
        return cls(NuwaConfig(**d.get("nuwa", {})), BaselineParams(**d.get("baseline", {})))


class StepError(MergeForgeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step, self.cause = step, cause


def iter_merge(method: str, base: Checkpoint, thetas, layers, params: MethodParams | None = None):
    """Yield ``(state, record)`` after each task is folded in."""
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}; expected one of {METHODS}")
    params = params or MethodParams()
    bp = params.baseline
    state = bl.initial_state(base, layers)
    if method in _ABLATION:
        cfg = replace(params.nuwa, ablation_mode=_ABLATION[method])
    for theta in thetas:
        step = state.step_index + 1
        try:
            if method in _ABLATION:
                state, rec = nuwa_step(state, theta, cfg)
            elif method == "wa":
                state, rec = bl.wa_step(state, theta), {"task": step}
            else:
                tau = compute_task_vector(theta, base, layers=layers)
                if method == "ta":
                    state = bl.ta_step(state, tau, bp.ta_lambda)
                elif method == "ties":
                    state = bl.ties_step(state, tau, bp.ties_lambda, bp.ties_top_k, bp.literal_recursive)
                elif method == "magmax":
                    state = bl.magmax_step(state, tau, bp.magmax_lambda, bp.literal_recursive)
                elif method == "opcm":
                    state = bl.opcm_step(state, tau, bp.opcm_alpha, bp.opcm_r_proj)
                else:
                    state = bl.wudi_step(state, tau, bp.wudi_lr, bp.wudi_iters)
                rec = {"task": step}
            # no method may hand back NaN/Inf weights
            for name in layers:
                if not np.all(np.isfinite(state.merged[name])):
                    raise NumericalError(f"task {step}, layer {name!r}: merged weights are not finite")
        except MergeForgeError as e:
            if isinstance(e, StepError):
                raise
            raise StepError(step, e) from e
        yield state, rec


def merge(method: str, base: Checkpoint, thetas, layers, params: MethodParams | None = None):
    """Run a full sequence; returns ``(merged checkpoint, per-step records)``."""
    records = []
    state = None
    for state, rec in iter_merge(method, base, thetas, layers, params):
        records.append(rec)
    if state is None:
        raise InvalidConfig("need at least one task checkpoint")
    return state.merged, records
