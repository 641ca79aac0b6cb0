import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfacbo.cli import (
    DIAGNOSTIC_COLUMNS,
    HISTORY_COLUMNS,
    KINDS,
    OUTER_FIELDS,
    SOLVER_FIELDS,
    TASK_FIELDS,
    TOP_FIELDS,
    main,
    parse_config,
    parse_config_dict,
    run,
)
from kfacbo.errors import ConfigError
from kfacbo.io import load_tensors, read_csv

TIMING_COLUMNS = {"wall_ms", "elapsed_ms"}

SMALL_HYPERCLEAN = {"kind": "hyperclean", "n_train": 30, "n_val": 30, "n_test": 60, "seeds": 2,
                    "outer": {"iters": 4, "inner_steps": 3, "outer_lr": 10.0}}


# -- parsing ---------------------------------------------------------------------

def test_minimal_diagnostic_config_gets_defaults():
    cfg = parse_config_dict({"kind": "diagnostic", "ds": [10], "N": 100, "seed": 1})
    assert cfg["solver"]["lambda"] == 1e-5
    assert cfg["task"]["ds"] == [10] and cfg["seed"] == 1
    assert cfg["task"]["seeds"] == 5


def test_range_violation_names_key_and_constraint():
    with pytest.raises(ConfigError, match="N ≥ 1") as info:
        parse_config_dict({"kind": "diagnostic", "N": 0})
    assert info.value.key == "N"


def test_effective_config_roundtrip(tmp_path):
    for kind in KINDS:
        cfg = parse_config_dict({"kind": kind, "seed": 4})
        path = tmp_path / f"{kind}.json"
        path.write_text(json.dumps(cfg))
        assert parse_config(path) == cfg


@pytest.mark.parametrize("doc, key", [
    ({"kind": "nope"}, "kind"),
    ({"kind": "diagnostic", "extra": 1}, "extra"),
    ({"kind": "diagnostic", "solver": {"lamda": 1.0}}, "solver.lamda"),
    ({"kind": "diagnostic", "solver": {"lambda": 0.0}}, "lambda"),
    ({"kind": "diagnostic", "ds": [3000]}, "ds"),
    ({"kind": "diagnostic", "methods": ["CG-x"]}, "methods"),
    ({"kind": "diagnostic", "N": 5, "task": {"N": 6}}, "N"),
    ({"kind": "diagnostic", "version": 2}, "version"),
    ({"kind": "hyperclean", "outer": {"inner_momentum": 1.0}}, "inner_momentum"),
    ({"kind": "hyperclean", "n_val": 2}, "n_val"),
    ({"kind": "hyperclean", "batch_size": 301}, "batch_size"),
    ({"kind": "hyperclean", "idx_images": "a"}, "idx_labels"),
    ({"kind": "hyperclean", "noise_ratio": True}, "noise_ratio"),
    ({"kind": "toy-quadratic", "solver": {"kind": "kfac"}}, "solver.kind"),
    ({"kind": "diagnostic", "seed": -1}, "seed"),
])
def test_invalid_configs_name_the_key(doc, key):
    with pytest.raises(ConfigError) as info:
        parse_config_dict(doc)
    assert info.value.key == key


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{kind: diagnostic")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(path)


_KNOWN = set(TOP_FIELDS) | set(SOLVER_FIELDS) | set(OUTER_FIELDS) | {k for s in TASK_FIELDS.values() for k in s}


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KINDS), st.sampled_from(["top", "task", "solver", "outer"]),
       st.text("abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=12).filter(lambda k: k not in _KNOWN),
       st.one_of(st.integers(), st.floats(allow_nan=False), st.text(max_size=3), st.none()))
def test_unknown_keys_always_rejected(kind, section, key, value):
    doc = {"kind": kind}
    if section == "top":
        doc[key] = value
    else:
        doc[section] = {key: value}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_dict(doc)


# -- running ---------------------------------------------------------------------

def _numeric_columns(path):
    rows = read_csv(path)
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]


def test_diagnostic_exact_run(tmp_path):
    cfg = parse_config_dict({"kind": "diagnostic", "ds": [5, 20], "seeds": 2, "methods": ["Exact"],
                             "out_dir": str(tmp_path)})
    assert run(cfg) == 0
    rows = read_csv(tmp_path / "summary.csv")
    assert tuple(rows[0]) == DIAGNOSTIC_COLUMNS
    assert len(rows) == 4 and all(float(r["rel_error"]) <= 1e-10 for r in rows)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"] == ["summary.csv"] and manifest["errors"] == []
    assert manifest["config"] == cfg and manifest["seeds"] == [0, 1]


def test_zero_iteration_hyperclean_writes_header_only_history(tmp_path):
    cfg = parse_config_dict({**SMALL_HYPERCLEAN, "seeds": 1, "outer": {"iters": 0}, "out_dir": str(tmp_path)})
    assert run(cfg) == 0
    text = (tmp_path / "history.csv").read_text().strip()
    assert text == ",".join(HISTORY_COLUMNS)
    data = load_tensors(tmp_path / "dataset_s0.tnsr")
    assert data["x_train"].shape == (30, 10) and data["corrupted"].sum() == 15


@pytest.mark.parametrize("doc", [
    SMALL_HYPERCLEAN,
    {**SMALL_HYPERCLEAN, "seeds": 1, "batch_size": 8, "outer": {"iters": 3, "inner_steps": 2, "ema_beta": 0.5}},
    {"kind": "diagnostic", "ds": [10, 30], "seeds": 2, "methods": ["KFAC", "CG-3", "Neu-3", "Identity"]},
    {"kind": "toy-quadratic", "d": 3, "m": 2, "seeds": 2, "outer": {"iters": 5}},
    {"kind": "batch-sweep", "n_train": 30, "n_val": 30, "n_test": 60, "seeds": 1, "batch_sizes": [8, None],
     "outer": {"iters": 3, "inner_steps": 2, "outer_lr": 10.0}},
], ids=["hyperclean", "minibatch-ema", "diagnostic", "toy", "sweep"])
def test_runs_are_bitwise_reproducible(tmp_path, doc):
    outs = []
    for name in ("a", "b"):
        cfg = parse_config_dict({**doc, "out_dir": str(tmp_path / name)})
        assert run(cfg, threads=2) == 0
        manifest = json.loads((tmp_path / name / "manifest.json").read_text())
        outs.append({f: _numeric_columns(tmp_path / name / f) for f in manifest["files"] if f.endswith(".csv")})
        for f in manifest["files"]:
            if f.endswith(".tnsr"):
                outs[-1][f] = {k: v.tobytes() for k, v in load_tensors(tmp_path / name / f).items()}
    assert outs[0] == outs[1]
    assert outs[0]


def test_toy_run_converges(tmp_path):
    cfg = parse_config_dict({"kind": "toy-quadratic", "out_dir": str(tmp_path)})
    assert run(cfg) == 0
    hist = read_csv(tmp_path / "history.csv")
    assert len(hist) == 100
    assert float(hist[-1]["outer_loss"]) < 1e-6 * float(hist[0]["outer_loss"])


def test_component_failure_gives_nonzero_status(tmp_path):
    cfg = parse_config_dict({"kind": "toy-quadratic", "out_dir": str(tmp_path),
                             "outer": {"iters": 20, "outer_lr": 1e200, "inner_lr": 0.5}})
    assert run(cfg) == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["errors"]


# -- command line ----------------------------------------------------------------

def test_main_with_config_file(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"kind": "diagnostic", "ds": [4], "seeds": 1, "methods": ["Exact", "Identity"]}))
    out = tmp_path / "out"
    assert main(["diagnostic", "--config", str(path), "--out-dir", str(out), "--seed", "7", "--quiet"]) == 0
    rows = read_csv(out / "summary.csv")
    assert {r["seed"] for r in rows} == {"7"}


def test_main_config_errors_exit_2(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"kind": "diagnostic", "N": 0}))
    assert main(["diagnostic", "--config", str(path), "--quiet"]) == 2
    path.write_text(json.dumps({"kind": "hyperclean"}))
    assert main(["diagnostic", "--config", str(path), "--quiet"]) == 2
    assert main(["diagnostic", "--config", str(tmp_path / "missing.json"), "--quiet"]) == 2
    assert main(["diagnostic", "--threads", "0", "--quiet"]) == 2


def test_unknown_verb_is_rejected():
    with pytest.raises(SystemExit):
        main(["train"])
