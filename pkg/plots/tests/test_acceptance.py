"""Acceptance: all three renderers succeed on a real completed run directory.

The run directory is produced by the `lorashap` command-line tool as a
subprocess, so this suite exercises only the documented artifact formats.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess

import numpy as np
import pytest
from PIL import Image

from lorashap_plots.formats import load_importance
from lorashap_plots.render import (normalized_matrix, render_allocation,
                                   render_budget_curve, render_heatmap)

TINY_CFG = {
    "model": {"n_layers": 1, "d_model": 8, "d_ffn": 16, "n_heads": 2,
              "vocab_size": 16, "max_seq_len": 16},
    "r_init": 2,
    "mask_rates": [0.3, 0.5, 0.7],
    "mask_repeats": 1,
    "scoring_batch_size": 16,
    "scoring_batches": 2,
    "stage1": {"learning_rate": 5e-3, "batch_size": 16, "max_epochs": 2,
               "eval_every_steps": 8, "seed": 1},
    "stage2": {"learning_rate": 5e-3, "batch_size": 16, "max_epochs": 2,
               "eval_every_steps": 8, "seed": 2},
    "task": {"kind": "copy", "n_train": 96, "n_dev": 32, "n_test": 32, "seq_len": 8},
    "seed": 9,
}


def _snapshot(root: str) -> dict:
    out = {}
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        with open(path, "rb") as fh:
            out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out


@pytest.fixture(scope="session")
def completed_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg_path = base / "config.json"
    cfg_path.write_text(json.dumps(TINY_CFG))
    run_dir = str(base / "run")
    sweep_dir = str(base / "sweep")
    subprocess.run(["lorashap", "pipeline", "--config", str(cfg_path),
                    "--out", run_dir], check=True, capture_output=True)
    subprocess.run(["lorashap", "budget-sweep", "--config", str(cfg_path),
                    "--targets", "1,2", "--out", sweep_dir],
                   check=True, capture_output=True)
    return run_dir, sweep_dir


def test_three_renders_on_completed_run(completed_run, tmp_path, capsys) -> None:
    run_dir, sweep_dir = completed_run
    before = _snapshot(run_dir)
    ok, detail = True, []
    try:
        table = load_importance(os.path.join(run_dir, "importance.csv"))
        figures = {
            "heatmap.png": lambda out: render_heatmap(
                os.path.join(run_dir, "importance.csv"), table.layers, out),
            "allocation.png": lambda out: render_allocation(
                os.path.join(run_dir, "allocation.txt"), out),
            "budget_curve.png": lambda out: render_budget_curve(
                os.path.join(sweep_dir, "sweep_summary.csv"), out),
        }
        for name, render in figures.items():
            out = str(tmp_path / name)
            render(out)
            size = os.path.getsize(out)
            with Image.open(out) as img:
                w, h = img.size
            if size == 0 or w == 0 or h == 0:
                ok = False
            detail.append("%s %dB %dx%d" % (name, size, w, h))
        if _snapshot(run_dir) != before:
            ok = False
            detail.append("run dir modified")
    except Exception as exc:  # noqa: BLE001 - report, then fail the assert
        ok = False
        detail.append(repr(exc))
    with capsys.disabled():
        print("\n[ACCEPTANCE] plot smoke tests: %s (%s)"
              % ("PASS" if ok else "FAIL", "; ".join(detail)))
    assert ok, "; ".join(detail)


def test_heatmap_normalization_on_synthetic_scores(tmp_path, capsys) -> None:
    rng = np.random.default_rng(3)
    rows = ["layer,kind,rank_index,score"]
    for layer in range(2):
        for kind in ("Q", "K", "V", "O", "G", "U", "D"):
            for idx in range(4):
                rows.append("%d,%s,%d,%r" % (layer, kind, idx,
                                             float(rng.uniform(0.01, 9.0))))
    path = tmp_path / "importance.csv"
    path.write_text("\n".join(rows) + "\n")
    table = load_importance(str(path))
    maxima = []
    for layer in (0, 1):
        grid = normalized_matrix(table, layer)
        maxima.extend(float(np.nanmax(row)) for row in grid)
    ok = all(m == 1.0 for m in maxima)
    with capsys.disabled():
        print("\n[ACCEPTANCE] heatmap per-module normalization: %s "
              "(14 module rows, every max == 1.0)" % ("PASS" if ok else "FAIL"))
    assert ok
