"""Run configuration: schema, parsing, validation and default resolution."""

from __future__ import annotations

import difflib
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .compression import COMPRESSOR_KINDS, CompressorSpec
from .optim import METHODS, OptimizerConfig, default_gamma
from .problems import PROBLEM_KINDS, Problem, make_problem
from .topology import TOPOLOGY_KINDS, MixingMatrix, TopologyError, build_topology, load_mixing_matrix

__all__ = [
    "ConfigError",
    "OUTPUT_ROOT_ENV",
    "RunConfig",
    "SCHEMA",
    "flatten",
    "load_config",
    "parse_assignment",
    "parse_toml_text",
    "resolve",
]

OUTPUT_ROOT_ENV = "PDSGDM_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class Key:
    type: type | tuple
    default: Any = None
    choices: tuple | None = None
    help: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, help="run seed; minibatch and compression streams derive from it"),
    "output_dir": Key(str, None, help="output directory (default from $PDSGDM_OUTPUT_ROOT or ./runs)"),
    "record_stride": Key(int, 1, help="record metrics every n iterations"),
    "repeats": Key(int, 1, help="independent seeds per sweep cell"),
    "topology.kind": Key(str, "ring", TOPOLOGY_KINDS),
    "topology.workers": Key(int, 8),
    "topology.custom_path": Key(str, None, help="whitespace-delimited K x K mixing matrix"),
    "problem.kind": Key(str, "quadratic", PROBLEM_KINDS),
    "problem.dim": Key(int, 20),
    "problem.samples_per_worker": Key(int, 100),
    "problem.heterogeneity": Key(float, 0.0),
    "problem.batch_size": Key(int, 4),
    "problem.seed": Key(int, None, help="data-generation seed (default: run seed)"),
    "problem.regularizer": Key(float, 1e-2),
    "problem.hidden": Key(int, 8),
    "problem.noise_std": Key(float, 0.5),
    "problem.shared_data": Key(bool, False),
    "problem.with_replacement": Key(bool, True),
    "problem.holdout_fraction": Key(float, 0.0),
    "optim.method": Key(str, "pd_sgdm", METHODS),
    "optim.eta": Key(float, 0.01),
    "optim.mu": Key(float, 0.9),
    "optim.period": Key(int, 4),
    "optim.gamma": Key(float, None, help="consensus step (cpd_sgdm); computed when absent"),
    "optim.iterations": Key(int, 1000),
    "optim.strict": Key(bool, False),
    "optim.lr_decay.factor": Key(float, 1.0),
    "optim.lr_decay.milestones": Key(list, []),
    "compression.kind": Key(str, None, COMPRESSOR_KINDS),
    "compression.k": Key(int, None),
    "thresholds.grad_norm_sq": Key(float, None),
    "thresholds.suboptimality": Key(float, None),
}

SHORTHAND = {
    "method": "optim.method",
    "topology": "topology.kind",
    "workers": "topology.workers",
    "problem": "problem.kind",
    "compression": "compression.kind",
}

ALIASES = {
    "learning_rate": "eta",
    "lr": "eta",
    "step_size": "eta",
    "momentum": "mu",
    "p": "period",
    "T": "iterations",
    "steps": "iterations",
    "K": "workers",
    "n_workers": "workers",
    "d": "dim",
}

IGNORED_SECTIONS = ("provenance",)


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in SCHEMA:
            flat.update(flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _suggest(key: str) -> str:
    head, _, last = key.rpartition(".")
    if last in ALIASES:
        cand = f"{head}.{ALIASES[last]}" if head else ALIASES[last]
        for full in SCHEMA:
            if full == cand or full.endswith("." + ALIASES[last]):
                return f"; did you mean {full!r}?"
    close = difflib.get_close_matches(key, SCHEMA, n=1, cutoff=0.6)
    return f"; did you mean {close[0]!r}?" if close else ""


def _coerce(key: str, value: Any) -> Any:
    spec = SCHEMA[key]
    if value is None:
        return None
    if spec.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if spec.type is list and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}", key)
    if spec.type is not list and (
        not isinstance(value, spec.type) or (spec.type is not bool and isinstance(value, bool))
    ):
        raise ConfigError(f"{key}: expected {spec.type.__name__}, got {value!r}", key)
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} is not one of {spec.choices}", key)
    return value


def parse_assignment(text: str) -> tuple[str, Any]:
    """Parse ``key=value`` with a TOML value, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


@dataclass
class RunConfig:
    """Fully resolved and validated configuration."""

    values: dict[str, Any]
    provenance: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        raw = {k: v for k, v in self.values.items() if self.provenance.get(k) == "user"}
        raw.update(overrides)
        return resolve(raw)

    # -- builders ----------------------------------------------------------
    def mixing(self) -> MixingMatrix:
        if self["topology.custom_path"]:
            return load_mixing_matrix(self["topology.custom_path"])
        return build_topology(self["topology.kind"], self["topology.workers"])

    def problem(self) -> Problem:
        return make_problem(
            self["problem.kind"],
            self["problem.dim"],
            self["problem.samples_per_worker"],
            self["topology.workers"],
            self["problem.heterogeneity"],
            self["problem.seed"],
            reg=self["problem.regularizer"],
            hidden=self["problem.hidden"],
            noise_std=self["problem.noise_std"],
            shared_data=self["problem.shared_data"],
            holdout_fraction=self["problem.holdout_fraction"],
        )

    def compressor(self) -> CompressorSpec | None:
        if self["compression.kind"] is None:
            return None
        return CompressorSpec(self["compression.kind"], self["compression.k"])

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            method=self["optim.method"],
            eta=self["optim.eta"],
            mu=self["optim.mu"],
            p=self["optim.period"],
            gamma=self["optim.gamma"],
            T=self["optim.iterations"],
            lr_decay_factor=self["optim.lr_decay.factor"],
            lr_milestones=tuple(self["optim.lr_decay.milestones"]),
        )

    def model_dim(self) -> int:
        d = self["problem.dim"]
        if self["problem.kind"] == "mlp":
            h = self["problem.hidden"]
            return (d + 2) * h + 1
        return d

    # -- serialization -----------------------------------------------------
    def to_toml(self) -> str:
        tree: dict[str, Any] = {}
        for key in SCHEMA:
            value = self.values.get(key)
            if value is None:
                continue
            node = tree
            *parents, last = key.split(".")
            for part in parents:
                node = node.setdefault(part, {})
            node[last] = value
        tree["provenance"] = {k: self.provenance[k] for k in SCHEMA if k in self.provenance}
        return tomli_w.dumps(tree)


def _validate(v: dict[str, Any]) -> None:
    def need(cond: bool, key: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{key}: {msg}", key)

    need(v["record_stride"] >= 1, "record_stride", "must be >= 1")
    need(v["repeats"] >= 1, "repeats", "must be >= 1")
    need(v["topology.workers"] >= 1, "topology.workers", "must be >= 1")
    if v["topology.kind"] == "grid2d" and not v["topology.custom_path"]:
        K = v["topology.workers"]
        need(math.isqrt(K) ** 2 == K, "topology.workers", f"grid2d requires a perfect square, got {K}")
    need(v["problem.dim"] >= 1, "problem.dim", "must be >= 1")
    need(v["problem.samples_per_worker"] >= 1, "problem.samples_per_worker", "must be >= 1")
    need(0.0 <= v["problem.heterogeneity"] <= 1.0, "problem.heterogeneity", "must lie in [0, 1]")
    need(v["problem.batch_size"] >= 1, "problem.batch_size", "must be >= 1")
    if not v["problem.with_replacement"]:
        need(
            v["problem.batch_size"] <= v["problem.samples_per_worker"],
            "problem.batch_size",
            "must not exceed samples_per_worker when sampling without replacement",
        )
    need(v["problem.hidden"] >= 1, "problem.hidden", "must be >= 1")
    need(v["problem.regularizer"] >= 0.0, "problem.regularizer", "must be >= 0")
    need(0.0 <= v["problem.holdout_fraction"] < 1.0, "problem.holdout_fraction", "must lie in [0, 1)")
    need(v["optim.eta"] > 0.0, "optim.eta", "must be > 0")
    need(v["optim.mu"] >= 0.0, "optim.mu", "must be >= 0")
    need(v["optim.mu"] < 1.0, "optim.mu", "mu must be < 1")
    need(v["optim.period"] >= 1, "optim.period", "must be >= 1")
    need(v["optim.iterations"] >= 0, "optim.iterations", "must be >= 0")
    need(v["optim.gamma"] is None or v["optim.gamma"] > 0, "optim.gamma", "must be > 0")
    need(v["optim.lr_decay.factor"] > 0, "optim.lr_decay.factor", "must be > 0")
    ms = v["optim.lr_decay.milestones"]
    need(all(isinstance(m, int) and m >= 0 for m in ms), "optim.lr_decay.milestones", "must be nonnegative integers")
    if v["optim.method"] == "cpd_sgdm":
        need(v["compression.kind"] is not None, "compression.kind", "cpd_sgdm requires a compression section")
    if v["compression.kind"] in ("top_k", "random_k"):
        need(v["compression.k"] is not None and v["compression.k"] >= 1, "compression.k", "must be a positive integer")


def resolve(raw: dict[str, Any]) -> RunConfig:
    """Validate user keys, fill defaults and compute derived values."""
    values, prov = {}, {}
    for key, value in raw.items():
        key = SHORTHAND.get(key, key)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}{_suggest(key)}", key)
        values[key] = _coerce(key, value)
        prov[key] = "user"
    for key, spec in SCHEMA.items():
        if key not in values:
            values[key] = list(spec.default) if isinstance(spec.default, list) else spec.default
            prov[key] = "default"
    if values["output_dir"] is None:
        values["output_dir"] = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        prov["output_dir"] = "environment" if OUTPUT_ROOT_ENV in os.environ else "default"
    if values["problem.seed"] is None:
        values["problem.seed"] = values["seed"]
        prov["problem.seed"] = "computed"
    _validate(values)

    cfg = RunConfig(values, prov)
    try:
        mixing = cfg.mixing()
    except (TopologyError, OSError) as exc:
        key = "topology.custom_path" if values["topology.custom_path"] else "topology.kind"
        raise ConfigError(f"{key}: {exc}", key) from exc
    if values["topology.custom_path"]:
        values["topology.kind"] = "custom"
        if mixing.K != values["topology.workers"]:
            if prov["topology.workers"] == "user":
                raise ConfigError(
                    f"topology.workers: {values['topology.workers']} does not match the "
                    f"{mixing.K}x{mixing.K} custom matrix",
                    "topology.workers",
                )
            values["topology.workers"] = mixing.K
            prov["topology.workers"] = "computed"
    comp = cfg.compressor()
    if comp is not None:
        try:
            comp.delta_bound(cfg.model_dim())
        except ValueError as exc:
            raise ConfigError(f"compression.k: {exc}", "compression.k") from exc
    if values["optim.method"] == "cpd_sgdm" and values["optim.gamma"] is None:
        gamma, _ = default_gamma(mixing.rho, comp.delta_bound(cfg.model_dim()), mixing.beta)
        values["optim.gamma"] = gamma
        prov["optim.gamma"] = "computed"
    return cfg


def parse_toml_text(text: str, source: str) -> dict[str, Any]:
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError(f"{source}: parse error at line {line}: {exc}", line=line) from exc
    for section in IGNORED_SECTIONS:
        tree.pop(section, None)
    return flatten(tree)


def load_config(source: str | Path, overrides: list[str] | dict[str, Any] | None = None) -> RunConfig:
    """Load a TOML config from a path or inline text and resolve it.

    Dotted keys (``optim.eta = 0.1``) and tables (``[optim]``) are both
    accepted, as are the bare shorthands ``method``, ``topology``,
    ``workers``, ``problem`` and ``compression``. Unknown keys are errors.
    """
    path = Path(source) if not isinstance(source, str) or "\n" not in source and "=" not in source else None
    if path is not None:
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = parse_toml_text(text, str(path))
    else:
        raw = parse_toml_text(str(source), "<inline>")
    if isinstance(overrides, dict):
        raw.update(overrides)
    elif overrides:
        for item in overrides:
            k, v = parse_assignment(item)
            raw[k] = v
    return resolve(raw)
