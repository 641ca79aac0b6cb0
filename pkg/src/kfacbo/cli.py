"""Command line: strict JSON configs, experiment execution, CSV and manifest output.

Usage::

    kfacbo diagnostic --config cfg.json --out-dir runs/diag --threads 4
    kfacbo hyperclean --seed 3
    kfacbo toy
    kfacbo sweep --config sweep.json
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from . import __version__
from .bilevel import OuterLoopConfig
from .errors import ConfigError, KfacBoError
from .experiments import (
    HYPERCLEAN_SUMMARY_COLUMNS,
    TOY_SUMMARY_COLUMNS,
    HypercleanParams,
    ToyParams,
    build_dataset,
    run_hyperclean,
    run_toy,
)
from .io import save_tensors, write_csv
from .solvers import SolverSpec
from .tasks import MAX_DIAGNOSTIC_DIM, TABLE_METHODS, diagnostic_study

log = logging.getLogger("kfacbo")

FORMAT_VERSION = 1
KINDS = ("diagnostic", "hyperclean", "toy-quadratic", "batch-sweep")
VERBS = {"diagnostic": "diagnostic", "hyperclean": "hyperclean", "toy": "toy-quadratic", "sweep": "batch-sweep"}

DIAGNOSTIC_COLUMNS = ("method", "d", "seed", "rel_error", "alpha_star", "wall_ms")
HISTORY_COLUMNS = ("outer_iter", "outer_loss", "test_metric", "hypergrad_norm", "solver_residual",
                   "solver_iters", "elapsed_ms")

# -- schema ------------------------------------------------------------------
# Each field maps to (default, check); ``check`` returns None or the violated constraint.


def _int(lo=None, hi=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            return "must be an integer"
        if lo is not None and v < lo:
            return f"≥ {lo}"
        if hi is not None and v > hi:
            return f"≤ {hi}"
        return None
    return check


def _real(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return "must be a number"
        if lo is not None and (v <= lo if lo_open else v < lo):
            return f"{'>' if lo_open else '≥'} {lo}"
        if hi is not None and (v >= hi if hi_open else v > hi):
            return f"{'<' if hi_open else '≤'} {hi}"
        return None
    return check


def _optional(inner):
    return lambda v: None if v is None else inner(v)


def _choice(options):
    return lambda v: None if v in options else f"one of {list(options)}"


def _boolean(v):
    return None if isinstance(v, bool) else "must be true or false"


def _string(v):
    return None if isinstance(v, str) else "must be a string"


def _list(item, nonempty=True):
    def check(v):
        if not isinstance(v, list):
            return "must be a list"
        if nonempty and not v:
            return "must be non-empty"
        for x in v:
            err = item(x)
            if err:
                return f"every entry {err}"
        return None
    return check


def _solver_label(v):
    if not isinstance(v, str):
        return "must be a solver label"
    low = v.lower()
    if low in ("kfac-exact",):
        return None
    try:
        SolverSpec.from_label(v)
    except ValueError:
        return "a label like Exact, Identity, KFAC, EKFAC, KFAC-exact, CG-<T>, Neu-<K>"
    return None


SOLVER_FIELDS = {
    "kind": ("kfac", _choice(("exact", "cg", "neumann", "identity", "kfac", "ekfac"))),
    "T": (3, _int(1)),
    "K": (10, _int(0)),
    "eta": (None, _optional(_real(0, lo_open=True))),
    "lambda": (1e-5, _real(0, lo_open=True)),
    "tol": (1e-10, _real(0, lo_open=True)),
    "damping_convention": ("literal", _choice(("literal", "normalized"))),
}

OUTER_FIELDS = {
    "iters": (300, _int(0)),
    "inner_steps": (10, _int(0)),
    "inner_lr": (0.5, _real(0, lo_open=True)),
    "inner_momentum": (0.9, _real(0, 1, hi_open=True)),
    "outer_lr": (100.0, _real(0, lo_open=True)),
    "outer_momentum": (0.9, _real(0, 1, hi_open=True)),
    "tau": (1, _int(1)),
    "ema_beta": (0.0, _real(0, 1, hi_open=True)),
    "warm_start": (True, _boolean),
    "independent_curvature_batch": (False, _boolean),
}

_HYPERCLEAN_TASK = {
    "n_train": (300, _int(1)),
    "n_val": (300, _int(1)),
    "n_test": (1000, _int(1)),
    "classes": (3, _int(2)),
    "input_dim": (10, _int(1)),
    "separation": (4.0, _real(0)),
    "noise_ratio": (0.5, _real(0, 1)),
    "alpha_reg": (1e-3, _real(0)),
    "batch_size": (None, _optional(_int(1))),
    "hidden": ([], _list(_int(1), nonempty=False)),
    "mc_samples": (1, _int(1)),
    "lam0": (1.0, _real(0, 1)),
    "seeds": (1, _int(1)),
    "data_seed": (None, _optional(_int(0))),
    "baseline": (True, _boolean),
    "idx_images": (None, _optional(_string)),
    "idx_labels": (None, _optional(_string)),
}

TASK_FIELDS = {
    "diagnostic": {
        "ds": ([10, 100, 500], _list(_int(1, MAX_DIAGNOSTIC_DIM))),
        "N": (100, _int(1)),
        "seeds": (5, _int(1)),
        "methods": (list(TABLE_METHODS), _list(_solver_label)),
        "mc_samples": (1, _int(1)),
    },
    "hyperclean": _HYPERCLEAN_TASK,
    "batch-sweep": {
        **_HYPERCLEAN_TASK,
        "seeds": (3, _int(1)),
        "baseline": (False, _boolean),
        "batch_sizes": ([16, 64, None], _list(_optional(_int(1)))),
        "solvers": (["KFAC", "CG-3"], _list(_solver_label)),
    },
    "toy-quadratic": {
        "d": (1, _int(1)),
        "m": (1, _int(1)),
        "cond": (10.0, _real(1)),
        "outer_reg": (0.0, _real(0)),
        "lam0": (1.0, _real()),
        "seeds": (1, _int(1)),
    },
}

# the quadratic toy has unit-scale curvature, unlike the 1/N-scaled hypercleaning hypergradient
KIND_OUTER_DEFAULTS = {
    "toy-quadratic": {"iters": 100, "inner_lr": 0.1, "inner_momentum": 0.0, "outer_lr": 0.5, "outer_momentum": 0.0},
}

TOP_FIELDS = {"kind", "seed", "out_dir", "version", "task", "solver", "outer"}


def _violation(key: str, err: str) -> ConfigError:
    if err[0] in "≥≤<>=":
        return ConfigError(key, f"requires {key} {err}")
    return ConfigError(key, err)


def _fill(section: str, given: Dict[str, Any], schema: Dict[str, Tuple[Any, Callable]]) -> Dict[str, Any]:
    if not isinstance(given, dict):
        raise ConfigError(section, "must be an object")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}" if section else unknown[0], "unknown key")
    out = {}
    for key, (default, check) in schema.items():
        value = given.get(key, copy.deepcopy(default))
        err = check(value)
        if err:
            raise _violation(key, err)
        out[key] = value
    return out


def parse_config_dict(doc: Dict[str, Any]) -> Dict[str, Any]:
    """Validate a config document and return the effective config with every default filled in.

    Task keys may appear either under ``task`` or at the top level.
    """
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "must be a JSON object")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ConfigError("kind", f"one of {list(KINDS)}")
    task_schema = TASK_FIELDS[kind]
    flat_task = {k: v for k, v in doc.items() if k not in TOP_FIELDS}
    unknown = sorted(set(flat_task) - set(task_schema))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    nested = doc.get("task", {})
    if not isinstance(nested, dict):
        raise ConfigError("task", "must be an object")
    clash = sorted(set(flat_task) & set(nested))
    if clash:
        raise ConfigError(clash[0], "given both at top level and under task")
    cfg = {
        "kind": kind,
        "version": doc.get("version", FORMAT_VERSION),
        "seed": doc.get("seed", 0),
        "out_dir": doc.get("out_dir", f"runs/{kind}"),
    }
    if cfg["version"] != FORMAT_VERSION:
        raise ConfigError("version", f"= {FORMAT_VERSION}")
    err = _int(0)(cfg["seed"])
    if err:
        raise _violation("seed", err)
    if _string(cfg["out_dir"]):
        raise ConfigError("out_dir", "must be a string")
    cfg["task"] = _fill("task", {**nested, **flat_task}, task_schema)
    solver_doc = doc.get("solver", {})
    if kind == "toy-quadratic" and isinstance(solver_doc, dict) and "kind" not in solver_doc:
        solver_doc = {**solver_doc, "kind": "cg"}  # quadratic tasks carry no Kronecker factors
    cfg["solver"] = _fill("solver", solver_doc, SOLVER_FIELDS)
    outer_schema = dict(OUTER_FIELDS)
    for key, default in KIND_OUTER_DEFAULTS.get(kind, {}).items():
        outer_schema[key] = (default, OUTER_FIELDS[key][1])
    cfg["outer"] = _fill("outer", doc.get("outer", {}), outer_schema)
    task = cfg["task"]
    if kind == "toy-quadratic" and cfg["solver"]["kind"] in ("kfac", "ekfac"):
        raise ConfigError("solver.kind", "toy-quadratic has no Kronecker factors; use exact, cg, neumann or identity")
    if kind in ("hyperclean", "batch-sweep"):
        if (task["idx_images"] is None) != (task["idx_labels"] is None):
            raise ConfigError("idx_labels", "idx_images and idx_labels must be given together")
        if task["idx_images"] is None:
            for split in ("n_train", "n_val", "n_test"):
                if task[split] < task["classes"]:
                    raise _violation(split, f"≥ classes ({task['classes']})")
            if task["input_dim"] < task["classes"]:
                raise _violation("input_dim", f"≥ classes ({task['classes']})")
        sizes = task["batch_sizes"] if kind == "batch-sweep" else [task["batch_size"]]
        for bs in sizes:
            if bs is not None and bs > task["n_train"]:
                raise _violation("batch_size", f"≤ n_train ({task['n_train']})")
    return cfg


def parse_config(path) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"malformed JSON: {exc}") from exc
    return parse_config_dict(doc)


def config_hash(cfg: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def solver_spec(cfg: Dict[str, Any], label: Optional[str] = None) -> SolverSpec:
    s = cfg["solver"]
    common = dict(tol=s["tol"], eta=s["eta"], damping_convention=s["damping_convention"])
    if label is not None:
        return SolverSpec.from_label(label, damping=s["lambda"], **common)
    kind = "ikvp" if s["kind"] == "kfac" else s["kind"]
    return SolverSpec(kind, damping=s["lambda"], iterations=s["T"], terms=s["K"], **common)


def outer_config(cfg: Dict[str, Any], seed: int, solver: SolverSpec) -> OuterLoopConfig:
    o = cfg["outer"]
    return OuterLoopConfig(
        outer_iters=o["iters"],
        inner_steps=o["inner_steps"],
        inner_lr=o["inner_lr"],
        inner_momentum=o["inner_momentum"],
        outer_lr=o["outer_lr"],
        outer_momentum=o["outer_momentum"],
        solver=solver,
        refresh_interval=o["tau"],
        ema_beta=o["ema_beta"],
        seed=seed,
        warm_start=o["warm_start"],
        independent_curvature_batch=o["independent_curvature_batch"],
    )


def hyperclean_params(cfg: Dict[str, Any]) -> HypercleanParams:
    names = HypercleanParams.__dataclass_fields__
    return HypercleanParams(**{k: v for k, v in cfg["task"].items() if k in names})


# -- execution ---------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class _Run:
    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.threads = threads
        self.out = Path(cfg["out_dir"])
        self.files = []
        self.seeds = []
        self.errors = []

    def csv(self, name, columns, rows):
        write_csv(self.out / name, columns, rows)
        self.files.append(name)

    def history(self, name, result, label):
        self.csv(name, HISTORY_COLUMNS, result.history)
        if result.error:
            self.errors.append(f"{label}: {result.error}")
            log.error("%s: %s", label, result.error)


def _run_diagnostic(run: _Run):
    cfg, t = run.cfg, run.cfg["task"]
    seeds = [cfg["seed"] + i for i in range(t["seeds"])]
    run.seeds = seeds
    log.info("diagnostic: d=%s N=%d methods=%s seeds=%s", t["ds"], t["N"], t["methods"], seeds)
    records = diagnostic_study(t["ds"], t["N"], cfg["solver"]["lambda"], seeds, t["methods"],
                               t["mc_samples"], base_seed=cfg["seed"], threads=run.threads)
    run.csv("summary.csv", DIAGNOSTIC_COLUMNS, (r.__dict__ for r in records))


def _run_hyperclean(run: _Run):
    cfg, t = run.cfg, run.cfg["task"]
    params = hyperclean_params(cfg)
    spec = solver_spec(cfg)
    run.seeds = [cfg["seed"] + i for i in range(t["seeds"])]
    rows = []
    for seed in run.seeds:
        log.info("hyperclean: seed %d, solver %s", seed, spec.label)
        ds = build_dataset(params, seed if params.data_seed is None else params.data_seed)
        save_tensors(run.out / f"dataset_s{seed}.tnsr", {
            "x_train": ds.x_train, "y_train": ds.y_train, "corrupted": ds.corrupted.astype("int64"),
            "x_val": ds.x_val, "y_val": ds.y_val, "x_test": ds.x_test, "y_test": ds.y_test,
        })
        run.files.append(f"dataset_s{seed}.tnsr")
        outcome = run_hyperclean(params, spec, outer_config(cfg, seed, spec), baseline=t["baseline"])
        suffix = "" if len(run.seeds) == 1 else f"_s{seed}"
        run.history(f"history{suffix}.csv", outcome.result, f"seed {seed}")
        rows.append(outcome.summary_row())
    run.csv("summary.csv", HYPERCLEAN_SUMMARY_COLUMNS, rows)


def _run_sweep(run: _Run):
    cfg, t = run.cfg, run.cfg["task"]
    base = hyperclean_params(cfg)
    run.seeds = [cfg["seed"] + i for i in range(t["seeds"])]
    rows = []
    for label in t["solvers"]:
        spec = solver_spec(cfg, label)
        for bs in t["batch_sizes"]:
            params = HypercleanParams(**{**base.__dict__, "batch_size": bs})
            for seed in run.seeds:
                log.info("sweep: solver %s, batch %s, seed %d", spec.label, bs or "full", seed)
                outcome = run_hyperclean(params, spec, outer_config(cfg, seed, spec), baseline=t["baseline"])
                name = f"history_{spec.label}_b{bs or 'full'}_s{seed}.csv"
                run.history(name, outcome.result, name)
                rows.append(outcome.summary_row())
    run.csv("summary.csv", HYPERCLEAN_SUMMARY_COLUMNS, rows)


def _run_toy(run: _Run):
    cfg, t = run.cfg, run.cfg["task"]
    params = ToyParams(**{k: v for k, v in t.items() if k != "seeds"})
    spec = solver_spec(cfg)
    run.seeds = [cfg["seed"] + i for i in range(t["seeds"])]
    rows = []
    for seed in run.seeds:
        log.info("toy: seed %d, solver %s", seed, spec.label)
        result, summary = run_toy(params, spec, outer_config(cfg, seed, spec))
        suffix = "" if len(run.seeds) == 1 else f"_s{seed}"
        run.history(f"history{suffix}.csv", result, f"seed {seed}")
        rows.append(summary)
    run.csv("summary.csv", TOY_SUMMARY_COLUMNS, rows)


RUNNERS = {"diagnostic": _run_diagnostic, "hyperclean": _run_hyperclean,
           "batch-sweep": _run_sweep, "toy-quadratic": _run_toy}


def run(cfg: Dict[str, Any], threads: int = 1) -> int:
    """Execute a parsed config; returns the process exit status."""
    r = _Run(cfg, threads)
    r.out.mkdir(parents=True, exist_ok=True)
    started = _now()
    status = 0
    try:
        RUNNERS[cfg["kind"]](r)
    except KfacBoError as exc:
        log.error("%s failed: %s", cfg["kind"], exc)
        r.errors.append(str(exc))
    if r.errors:
        status = 1
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "version": __version__,
        "format_version": FORMAT_VERSION,
        "seeds": r.seeds,
        "threads": threads,
        "started": started,
        "finished": _now(),
        "files": sorted(r.files),
        "errors": r.errors,
    }
    with open(r.out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    log.info("wrote %d files to %s", len(r.files) + 1, r.out)
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kfacbo", description=__doc__.splitlines()[0])
    parser.add_argument("verb", choices=sorted(VERBS), help="experiment to run")
    parser.add_argument("--config", help="JSON config file (defaults are used if omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", help="override the config output directory")
    parser.add_argument("--threads", type=int, default=1, help="parallel diagnostic cells")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    kind = VERBS[args.verb]
    try:
        if args.config:
            with open(args.config) as fh:
                doc = json.load(fh)
        else:
            doc = {"kind": kind}
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "must be a JSON object")
        if doc.get("kind", kind) != kind:
            raise ConfigError("kind", f"config is {doc.get('kind')!r} but the verb runs {kind!r}")
        doc = {**doc, "kind": kind}
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.out_dir is not None:
            doc["out_dir"] = args.out_dir
        if args.threads < 1:
            raise _violation("--threads", "≥ 1")
        cfg = parse_config_dict(doc)
    except json.JSONDecodeError as exc:
        log.error("config: malformed JSON: %s", exc)
        return 2
    except (ConfigError, OSError) as exc:
        log.error("config: %s", exc)
        return 2
    try:
        return run(cfg, args.threads)
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
