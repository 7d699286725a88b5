"""Command-line entry point: ``mergeforge {merge,analyze,bench,verify,inspect,synth}``.

Exit codes: 0 ok, 2 bad flags/config, 3 unreadable or incompatible inputs,
4 numerical failure, 5 bound violations.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import CHECKS, affinity_map, data_subspace, write_affinity_csv, write_bound_csv, write_ecdf_csv
from .bench import (SuiteConfig, aggregate, generate_suite, run_protocol, summary_json,
                    write_results_csv)
from .checkpoint import (Checkpoint, LayerSelector, atomic_write_bytes, compute_task_vector, load_checkpoint,
                         save_checkpoint, tensor_checksum)
from .errors import (FormatError, IncompatibleCheckpoints, InvalidConfig, InvalidInput, MergeForgeError,
                     NumericalError)
from .methods import METHODS, BaselineParams, MethodParams, StepError, iter_merge
from .nuwa import NuwaConfig

log = logging.getLogger("mergeforge")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_VIOLATION = 0, 2, 3, 4, 5

_ABLATION_FLAGS = {"full": "full", "null-only": "null_space_only", "lora-only": "lora_only"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_csv(path, emit, *args) -> None:
    buf = io.StringIO()
    emit(*args, buf)
    _write_text(path, buf.getvalue())


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidConfig(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise InvalidConfig(f"config {path} must hold a JSON object")
    return data


def _threads(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("MERGEFORGE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidConfig(f"MERGEFORGE_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise InvalidConfig("MERGEFORGE_THREADS must be >= 1")
        return n
    return 1


def _parse_orders(text: str) -> list[int]:
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidConfig(f"--orders expects 'A..B' or a comma list, got {text!r}") from None


def _selector(pattern) -> LayerSelector:
    if not pattern:
        return LayerSelector()
    pats = tuple(p for p in pattern.split(",") if p)
    # an explicit pattern is taken literally: no default exclusions
    return LayerSelector(include_patterns=pats, exclude_patterns=())


def _load_all(paths) -> list[Checkpoint]:
    return [load_checkpoint(p) for p in paths]


# ---------------------------------------------------------------- merge

# keys written into the config echo that are derived, not inputs
_ECHO_ONLY = ("resolved_method", "params", "selected_layers", "version")

def _merge_config(args) -> dict:
    cfg = {"method": "nuwa", "seed": 0, "layers": None, "threads": None,
           "nuwa": {}, "baseline": {}}
    if args.config:
        file_cfg = _read_json(args.config)
        for k in _ECHO_ONLY:
            file_cfg.pop(k, None)
        unknown = set(file_cfg) - set(cfg) - {"base", "tasks", "out", "ablation"}
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        for k in ("nuwa", "baseline"):
            cfg[k].update(file_cfg.pop(k, {}) or {})
        cfg.update(file_cfg)
    for flag, key in (("method", "method"), ("seed", "seed"), ("layers", "layers"), ("threads", "threads"),
                      ("base", "base"), ("out", "out")):
        v = getattr(args, flag)
        if v is not None:
            cfg[key] = v
    if args.task:
        cfg["tasks"] = list(args.task)
    if args.ablation is not None:
        cfg["ablation"] = args.ablation
    for flag, key in (("rp", "r_p"), ("rl", "r_l"), ("rv", "r_v"), ("iters", "max_iter"), ("lr", "lr")):
        v = getattr(args, flag)
        if v is not None:
            cfg["nuwa"][key] = v
    if args.literal_recursive:
        cfg["baseline"]["literal_recursive"] = True
    for key in ("base", "tasks", "out"):
        if not cfg.get(key):
            raise InvalidConfig(f"missing required setting: {key}")
    if cfg["method"] not in METHODS:
        raise InvalidConfig(f"unknown method {cfg['method']!r}; expected one of {METHODS}")
    ablation = cfg.get("ablation")
    if ablation is not None:
        if ablation not in _ABLATION_FLAGS:
            raise InvalidConfig(f"unknown ablation {ablation!r}; expected one of {sorted(_ABLATION_FLAGS)}")
        if cfg["method"] not in ("nuwa",):
            raise InvalidConfig("--ablation only applies to --method nuwa")
    cfg["threads"] = _threads(cfg["threads"])
    return cfg


def _method_params(cfg: dict) -> tuple[str, MethodParams]:
    known_n = {f.name for f in fields(NuwaConfig)}
    known_b = {f.name for f in fields(BaselineParams)}
    bad = (set(cfg["nuwa"]) - known_n) | (set(cfg["baseline"]) - known_b)
    if bad:
        raise InvalidConfig(f"unknown parameter(s): {sorted(bad)}")
    nuwa = NuwaConfig(**{**cfg["nuwa"], "seed": cfg["seed"], "threads": cfg["threads"]})
    method = cfg["method"]
    ablation = cfg.get("ablation")
    if method == "nuwa" and ablation and ablation != "full":
        method = {"null-only": "nuwa_null_only", "lora-only": "nuwa_lora_only"}[ablation]
    return method, MethodParams(nuwa, BaselineParams(**cfg["baseline"]))


def cmd_merge(args) -> int:
    cfg = _merge_config(args)
    method, params = _method_params(cfg)
    base = load_checkpoint(cfg["base"])
    thetas = _load_all(cfg["tasks"])
    layers = _selector(cfg["layers"]).select(base)
    if not layers:
        raise InvalidConfig("layer selection matched no 2-D tensor of the base checkpoint")
    out = Path(cfg["out"])
    log.info("merging %d task(s) with %s over %d layer(s)", len(thetas), method, len(layers))
    steps = []
    state = None
    for state, rec in iter_merge(method, base, thetas, layers, params):
        per_layer = rec.get("layers", [])
        entry = {
            "task": rec["task"],
            "layers": len(layers),
            "filter_ranks": {r["layer"]: r["filter_rank"] for r in per_layer},
            "final_losses": {r["layer"]: r["final_loss"] for r in per_layer},
            "time": time.time(),
        }
        steps.append(entry)
        log.info("step %d done", rec["task"])
    save_checkpoint(state.merged, out)
    echo = {**cfg, "resolved_method": method, "params": params.to_dict(), "selected_layers": layers,
            "version": __version__}
    _write_text(str(out) + ".config.json", _dump(echo))
    _write_text(str(out) + ".log.jsonl", "".join(json.dumps(s, sort_keys=True) + "\n" for s in steps))
    print(f"wrote {out} ({len(state.merged.tensors)} tensors, {len(thetas)} task(s))")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def _load_data(path, layers, base: Checkpoint) -> dict:
    """``.npy``: one matrix used for every layer whose input width matches; ``.npz``: one array per layer."""
    try:
        obj = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read data matrix {path}: {e}") from e
    out = {}
    if isinstance(obj, np.lib.npyio.NpzFile):
        with obj:
            for l in layers:
                if l not in obj.files:
                    raise IncompatibleCheckpoints(f"{path} has no array for layer {l!r}")
                out[l] = np.asarray(obj[l], dtype=np.float64)
    else:
        for l in layers:
            out[l] = np.asarray(obj, dtype=np.float64)
    for l, H in out.items():
        if H.ndim != 2 or H.shape[1] != base[l].shape[1]:
            raise IncompatibleCheckpoints(f"{path}: data for {l!r} has shape {H.shape}, "
                                          f"expected N x {base[l].shape[1]}")
    return out


def cmd_analyze(args) -> int:
    if not args.data:
        raise InvalidConfig("need at least one --data matrix")
    if len(args.task) != len(args.data):
        raise InvalidConfig(f"got {len(args.task)} --task but {len(args.data)} --data")
    base = load_checkpoint(args.base)
    layers = _selector(args.layers).select(base)
    if not layers:
        raise InvalidConfig("layer selection matched no 2-D tensor of the base checkpoint")
    thetas = _load_all(args.task)
    tvs = [compute_task_vector(t, base, layers=layers) for t in thetas]
    subspaces = []
    for p in args.data:
        data = _load_data(p, layers, base)
        subspaces.append({l: data_subspace(data[l], args.rd) for l in layers})
    ids = list(range(1, len(thetas) + 1))
    rep = affinity_map(subspaces, tvs, args.rv, layers, ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "affinity.csv", write_affinity_csv, rep)
    series = rep.ecdf_series()
    for name, s in series.items():
        _write_csv(out / f"ecdf_{name}.csv", write_ecdf_csv, s)
    _write_text(out / "summary.json", _dump(rep.summary()))
    _write_text(out / "config.json", _dump({"command": "analyze", "base": args.base, "tasks": args.task,
                                            "data": args.data, "rd": args.rd, "rv": args.rv,
                                            "layers": args.layers, "version": __version__}))
    print(f"diagonal_dominance={rep.diagonal_dominance()} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- bench / synth

def _suite_config(path) -> SuiteConfig:
    if not path:
        return SuiteConfig(overlap=0.1, noise_scale=0.05)
    data = _read_json(path)
    known = {f.name for f in fields(SuiteConfig)}
    bad = set(data) - known
    if bad:
        raise InvalidConfig(f"unknown suite parameter(s): {sorted(bad)}")
    cfg = SuiteConfig(**data)
    cfg.validate()
    return cfg


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise InvalidConfig(f"unknown method(s) {bad}; expected a comma list from {METHODS}")
    orders = _parse_orders(args.orders)
    suite_cfg = _suite_config(args.suite_config)
    params = MethodParams.from_dict(_read_json(args.params)) if args.params else MethodParams()
    params.nuwa.threads = _threads(args.threads)
    suite = generate_suite(suite_cfg)
    results = []
    for m in methods:
        log.info("bench %s over %d order(s)", m, len(orders))
        results.extend(run_protocol(m, suite, orders, params))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", write_results_csv, results)
    _write_text(out / "summary.json", summary_json(results))
    _write_text(out / "config.json", _dump({"command": "bench", "methods": methods, "orders": orders,
                                            "suite": suite_cfg.to_dict(), "params": params.to_dict(),
                                            "version": __version__}))
    for m, a in aggregate(results).items():
        bwt = "n/a" if a["bwt_mean"] is None else f"{a['bwt_mean']:+.4f}"
        print(f"{m:16s} ACC {a['acc_mean']:.4f} +- {a['acc_std']:.4f}  BWT {bwt}")
    return EXIT_OK


def cmd_synth(args) -> int:
    suite = generate_suite(_suite_config(args.suite_config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(suite.theta_0, out / "base.ntc")
    for t in suite.tasks:
        save_checkpoint(t.theta, out / f"task_{t.id:02d}.ntc")
        buf = io.BytesIO()
        np.save(buf, t.H)
        atomic_write_bytes(out / f"data_{t.id:02d}.npy", buf.getvalue())
    _write_text(out / "config.json", _dump({"command": "synth", "suite": suite.config.to_dict(),
                                            "version": __version__}))
    print(f"wrote base + {len(suite.tasks)} task checkpoints to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- verify / inspect

def cmd_verify(args) -> int:
    names = list(CHECKS) if args.check == "all" else [args.check]
    if args.instances < 1:
        raise InvalidConfig("--instances must be >= 1")
    reports = [CHECKS[n](args.instances, args.seed) for n in names]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            _write_csv(out / f"{r.name}.csv", write_bound_csv, r)
        _write_text(out / "summary.json", _dump([r.summary() for r in reports]))
    bad = 0
    for r in reports:
        s = r.summary()
        print(f"{r.name:11s} instances={s['instances']} violations={s['violations']} "
              f"skipped={s['skipped']} worst_margin={s['worst_margin']}")
        bad += r.violations
    if bad:
        worst = min(reports, key=lambda r: r.worst_margin)
        print(f"FAIL: {bad} violation(s); worst margin {worst.worst_margin!r} in {worst.name}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_inspect(args) -> int:
    c = load_checkpoint(args.ckpt)
    print(f"{'name':40s} {'shape':>16s} {'dtype':>8s}  checksum")
    for name, t in c.tensors.items():
        print(f"{name:40s} {str(tuple(t.shape)):>16s} {str(t.dtype):>8s}  {tensor_checksum(t)}")
    if c.meta:
        print("meta: " + json.dumps(c.meta, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mergeforge", description="Data-free continual model merging.")
    p.add_argument("--version", action="version", version=f"mergeforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("merge", help="merge task checkpoints sequentially")
    m.add_argument("--method", choices=[x for x in METHODS if not x.startswith("nuwa_")])
    m.add_argument("--base")
    m.add_argument("--task", action="append", default=[], help="task checkpoint (repeat, in merge order)")
    m.add_argument("--out")
    m.add_argument("--rp", type=int)
    m.add_argument("--rl", type=int)
    m.add_argument("--rv", type=int)
    m.add_argument("--iters", type=int)
    m.add_argument("--lr", type=float)
    m.add_argument("--ablation", choices=sorted(_ABLATION_FLAGS))
    m.add_argument("--seed", type=int)
    m.add_argument("--layers", help="comma-separated glob patterns of layers to merge")
    m.add_argument("--literal-recursive", action="store_true")
    m.add_argument("--config", help="JSON run config; flags override its values")
    m.add_argument("--threads", type=int)
    m.set_defaults(func=cmd_merge)

    a = sub.add_parser("analyze", help="data/task-vector subspace affinity")
    a.add_argument("--base", required=True)
    a.add_argument("--task", action="append", default=[])
    a.add_argument("--data", action="append", default=[], help=".npy (N x d_i) or .npz keyed by layer")
    a.add_argument("--rd", type=int, default=8)
    a.add_argument("--rv", type=int, default=8)
    a.add_argument("--layers")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="synthetic continual-merging benchmark")
    b.add_argument("--methods", default="nuwa,naive")
    b.add_argument("--orders", default="42..51")
    b.add_argument("--suite-config")
    b.add_argument("--params", help="JSON with 'nuwa' and 'baseline' parameter records")
    b.add_argument("--threads", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="write a synthetic suite as checkpoints and data matrices")
    s.add_argument("--suite-config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", help="numerical oracles for the perturbation bounds")
    v.add_argument("--check", choices=[*CHECKS, "all"], default="all")
    v.add_argument("--instances", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("inspect", help="print the tensor table of a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def _exit_code(e: BaseException) -> int:
    if isinstance(e, StepError):
        e = e.cause
    cause = getattr(e, "cause", None)
    if isinstance(cause, BaseException):
        e = cause
    if isinstance(e, NumericalError):
        return EXIT_NUMERIC
    if isinstance(e, (FormatError, IncompatibleCheckpoints, OSError)):
        return EXIT_INPUT
    if isinstance(e, (InvalidConfig, InvalidInput)):
        return EXIT_USAGE
    return EXIT_NUMERIC if isinstance(e, (FloatingPointError, np.linalg.LinAlgError)) else EXIT_INPUT


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (MergeForgeError, OSError, np.linalg.LinAlgError) as e:
        code = _exit_code(e)
        print(f"mergeforge {args.command}: error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
