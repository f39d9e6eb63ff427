"""Single runs, parameter sweeps and built-in experiment presets."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError, RunConfig, load_config, resolve
from .diagnostics import InvariantViolation, MetricsRecord, RunMonitor, metrics_to_csv, time_to_threshold
from .optim import Engine, NumericAbort

__all__ = ["PRESETS", "RunResult", "SweepResult", "execute", "preset_cells", "run", "sweep"]

log = logging.getLogger(__name__)

SUMMARY_FIELDS = (
    "method",
    "status",
    "aborted_at",
    "iterations_done",
    "final_f_bar",
    "final_grad_norm_sq",
    "final_suboptimality",
    "final_consensus",
    "total_bits",
    "comm_rounds",
    "gamma",
    "G_hat",
    "holdout_loss",
    "worst_mean_preserve",
    "worst_aux_z",
    "worst_momentum_norm",
    "worst_consensus_bound",
    "violations_total",
)


@dataclass
class RunResult:
    config: RunConfig
    records: list[MetricsRecord]
    summary: dict[str, Any]
    wall_time: float
    out_dir: Path | None = None

    @property
    def status(self) -> int:
        return self.summary["status"]

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def ts(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def metrics_csv(self) -> str:
        return metrics_to_csv(self.records)


def execute(cfg: RunConfig) -> RunResult:
    """Run the simulation described by ``cfg`` in memory."""
    start = time.perf_counter()
    problem = cfg.problem()
    engine = Engine(
        problem,
        cfg.mixing(),
        cfg.optimizer(),
        cfg.compressor(),
        batch_size=cfg["problem.batch_size"],
        seed=cfg["seed"],
        with_replacement=cfg["problem.with_replacement"],
    )
    monitor = RunMonitor(engine, stride=cfg["record_stride"], strict=cfg["optim.strict"])
    aborted_at = None
    reason = None
    try:
        # overflow on the way to a NaN is reported by NumericAbort instead
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(engine.config.T):
                monitor.observe(engine.step())
    except (NumericAbort, InvariantViolation) as exc:
        aborted_at = engine.t
        reason = f"{type(exc).__name__}: {exc}"
        log.warning("run aborted at t=%d: %s", aborted_at, reason)

    last = monitor.records[-1]
    xbar = engine.mean_x()
    violations = sum(monitor.violations.values())
    summary = {
        "method": engine.config.method,
        "status": 1 if aborted_at is not None else 0,
        "aborted_at": aborted_at,
        "abort_reason": reason,
        "iterations_done": engine.t,
        "final_f_bar": last.f_bar,
        "final_grad_norm_sq": last.grad_norm_sq,
        "final_suboptimality": last.suboptimality,
        "final_consensus": last.consensus,
        "total_bits": int(engine.comm_bits),
        "comm_rounds": engine.n_rounds,
        "gamma": engine.config.gamma,
        "G_hat": monitor.G_hat,
        "holdout_loss": problem.holdout_loss(xbar) if np.all(np.isfinite(xbar)) else None,
        "worst_mean_preserve": monitor.worst["mean_preserve"],
        "worst_aux_z": monitor.worst["aux_z"],
        "worst_momentum_norm": monitor.worst["momentum_norm"],
        "worst_consensus_bound": monitor.worst["consensus_bound"],
        "violations": dict(monitor.violations),
        "violations_total": violations,
    }
    return RunResult(cfg, monitor.records, summary, time.perf_counter() - start)


def _write_outputs(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.metrics_csv)
    (out / "resolved.toml").write_text(result.config.to_toml())
    doc = {"results": result.summary, "timing": {"wall_time_s": result.wall_time}}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run(config: RunConfig | str | Path, out_dir: str | Path | None = None) -> RunResult:
    """Execute one run and write ``metrics.csv``, ``resolved.toml`` and ``summary.json``."""
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    result = execute(cfg)
    _write_outputs(result, out)
    result.out_dir = out
    return result


# -- sweeps -----------------------------------------------------------------


def _slug(value: Any) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", str(value))


def cell_name(cell: dict[str, Any]) -> str:
    if not cell:
        return "base"
    return "__".join(f"{k}={_slug(v)}" for k, v in cell.items())


def expand_grid(grid: dict[str, list] | list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Cartesian product of a key -> values map, or an explicit list of cells."""
    if isinstance(grid, list):
        return [dict(c) for c in grid]
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid key {k!r} needs a non-empty list of values", k)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class SweepResult:
    out_dir: Path
    rows: list[dict[str, Any]]
    results: list[RunResult]

    @property
    def status(self) -> int:
        return max((r.status for r in self.results), default=0)


def _run_job(job):
    cfg, out = job
    return run(cfg, out)


def sweep(
    base: RunConfig | str | Path,
    grid: dict[str, list] | list[dict[str, Any]],
    repeats: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    write: bool = True,
) -> SweepResult:
    """Run every grid cell ``repeats`` times with seeds ``seed + repeat``.

    All cells are validated before any run starts. With ``write`` each run
    goes to ``<out>/<cell>/`` (``<out>/<cell>/rep<r>/`` when repeats > 1) and
    an ``aggregate.csv`` with one row per (cell, repeat) is written at the root.
    """
    base = base if isinstance(base, RunConfig) else load_config(base)
    repeats = repeats if repeats is not None else base["repeats"]
    if repeats < 1:
        raise ConfigError("repeats must be >= 1", "repeats")
    root = Path(out_dir if out_dir is not None else base["output_dir"])
    cells = expand_grid(grid)

    jobs_list = []
    for cell in cells:
        for r in range(repeats):
            seeded = base.with_overrides({**cell, "seed": base["seed"] + r})
            sub = root / cell_name(cell)
            if repeats > 1:
                sub = sub / f"rep{r}"
            jobs_list.append((cell, r, seeded, sub))

    if write:
        work = [(cfg, sub) for _, _, cfg, sub in jobs_list]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_job, work))
        else:
            results = [_run_job(w) for w in work]
    else:
        results = [execute(cfg) for _, _, cfg, _ in jobs_list]

    rows = []
    for (cell, r, cfg, sub), res in zip(jobs_list, results):
        row = {"cell": cell_name(cell), "repeat": r, "seed": cfg["seed"]}
        row.update({k: v for k, v in cell.items()})
        row.update({k: res.summary[k] for k in SUMMARY_FIELDS})
        for metric in ("grad_norm_sq", "suboptimality"):
            thr = cfg[f"thresholds.{metric}"]
            if thr is not None:
                series = res.series(metric)
                row[f"ttt_{metric}"] = None if np.isnan(series).any() else time_to_threshold(series, thr, ts=res.ts)
        rows.append(row)
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "aggregate.csv").write_text(rows_to_csv(rows))
    return SweepResult(root, rows, results)


def rows_to_csv(rows: list[dict[str, Any]]) -> str:
    cols: list[str] = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else row.get(c) for c in cols])
    return buf.getvalue()


# -- presets ----------------------------------------------------------------

_QUADRATIC_BASE = {
    "topology.kind": "ring",
    "topology.workers": 8,
    "problem.kind": "quadratic",
    "problem.dim": 50,
    "problem.samples_per_worker": 400,
    "problem.heterogeneity": 0.0,
    "problem.batch_size": 4,
    "optim.eta": 0.002,
    "optim.mu": 0.9,
    "optim.iterations": 5000,
    "record_stride": 50,
    "repeats": 5,
}

_LOGISTIC_SPEEDUP_BASE = {
    "topology.kind": "ring",
    "problem.kind": "logistic",
    "problem.dim": 10,
    "problem.samples_per_worker": 200,
    "problem.heterogeneity": 0.0,
    "problem.batch_size": 1,
    "optim.method": "pd_sgdm",
    "optim.mu": 0.9,
    "optim.period": 4,
    "optim.iterations": 3000,
    "record_stride": 1,
    "repeats": 5,
    "thresholds.grad_norm_sq": 2e-5,
}

SPEEDUP_ETA = 0.01

PRESETS: dict[str, dict[str, Any]] = {
    "convergence": {
        "description": "C-SGDM vs PD-SGDM with p in {4, 8, 16}: loss against iterations",
        "base": _QUADRATIC_BASE,
        "cells": [{"optim.method": "c_sgdm", "optim.period": 1}]
        + [{"optim.method": "pd_sgdm", "optim.period": p} for p in (4, 8, 16)],
    },
    "communication": {
        "description": "PD-SGDM with p in {4, 8, 16}: loss against communicated bits",
        "base": _QUADRATIC_BASE,
        "cells": [{"optim.method": "pd_sgdm", "optim.period": p} for p in (4, 8, 16)],
    },
    "compressed": {
        "description": "full-precision PD-SGDM vs sign-compressed CPD-SGDM",
        "base": _QUADRATIC_BASE,
        "cells": [{"optim.method": "pd_sgdm", "optim.period": p} for p in (4, 8, 16)]
        + [
            {"optim.method": "cpd_sgdm", "optim.period": p, "compression.kind": "scaled_sign"}
            for p in (4, 8, 16)
        ],
    },
    "speedup": {
        "description": "iid logistic regression, K in {1, 2, 4, 8} with eta proportional to sqrt(K)",
        "base": _LOGISTIC_SPEEDUP_BASE,
        "cells": [
            {"topology.workers": K, "optim.eta": SPEEDUP_ETA * K**0.5} for K in (1, 2, 4, 8)
        ],
    },
}


def preset_cells(name: str) -> tuple[RunConfig, list[dict[str, Any]]]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    spec = PRESETS[name]
    return resolve(dict(spec["base"])), spec["cells"]
