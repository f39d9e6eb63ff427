"""Convergence metrics and runtime checks of the analysis identities and bounds."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .optim import Engine, StepInfo, shared_knowledge_violations

__all__ = [
    "CSV_COLUMNS",
    "InvariantViolation",
    "MetricsRecord",
    "RunMonitor",
    "check_aux_z",
    "consensus_bound",
    "consensus_distance",
    "metrics_to_csv",
    "time_to_threshold",
]

CSV_COLUMNS = (
    "t",
    "f_bar",
    "grad_norm_sq",
    "consensus",
    "comm_bits_cum",
    "suboptimality",
    "res_mean_preserve",
    "res_aux_z",
    "consensus_bound_rhs",
)

TOL_MEAN_PRESERVE = 1e-10
TOL_AUX_Z = 1e-8
G_SLACK = 1.05


class InvariantViolation(AssertionError):
    pass


@dataclass
class MetricsRecord:
    t: int
    f_bar: float
    grad_norm_sq: float
    consensus: float
    comm_bits_cum: int
    suboptimality: float | None = None
    invariant_residuals: dict[str, float] = field(default_factory=dict)
    consensus_bound_rhs: float | None = None

    def row(self) -> list:
        res = self.invariant_residuals
        return [
            self.t,
            self.f_bar,
            self.grad_norm_sq,
            self.consensus,
            self.comm_bits_cum,
            self.suboptimality,
            res.get("mean_preserve"),
            res.get("aux_z"),
            self.consensus_bound_rhs,
        ]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(v) for v in r.row()])
    return buf.getvalue()


def consensus_distance(states) -> float:
    """Total squared distance of the worker models to their mean."""
    X = states if isinstance(states, np.ndarray) else np.stack([s.x for s in states])
    X = np.atleast_2d(X)
    dev = X - X.mean(axis=0)
    return float(np.sum(dev * dev))


def consensus_bound(
    method: str,
    eta: float,
    p: int,
    G_hat: float,
    K: int,
    mu: float,
    rho: float,
    delta: float | None = None,
) -> float:
    """Worst-case consensus distance for exact or compressed periodic gossip.

    Exact gossip: ``2 eta^2 p^2 G^2 K / (1-mu)^2 * (1 + 4/rho^2)``.
    Compressed gossip: ``4 eta^2 p^2 G^2 K / (1-mu)^2 * (1 + 4/alpha^2)``
    with ``alpha = rho^2 delta / 82``.
    """
    scale = eta**2 * p**2 * G_hat**2 * K / (1.0 - mu) ** 2
    if method == "c_sgdm":
        return 0.0
    if method == "cpd_sgdm":
        if delta is None:
            raise ValueError("compressed bound needs delta")
        alpha = rho**2 * delta / 82.0
        return 4.0 * scale * (1.0 + 4.0 / alpha**2)
    return 2.0 * scale * (1.0 + 4.0 / rho**2)


def _z_sequence(xbar: np.ndarray, mu: float) -> np.ndarray:
    z = np.empty_like(xbar)
    z[0] = xbar[0]
    z[1:] = (xbar[1:] - mu * xbar[:-1]) / (1.0 - mu)
    return z


def check_aux_z(
    xbar_history,
    grad_history,
    eta: float,
    mu: float,
    momentum_history=None,
) -> float:
    """Largest violation of the momentum-absorbing sequence identities.

    With ``z_0 = xbar_0`` and ``z_t = (xbar_t - mu xbar_{t-1}) / (1 - mu)``,
    checks ``z_{t+1} - z_t = -eta/(1-mu) * gbar_t`` and, when momenta are
    given, ``z_{t+1} - xbar_{t+1} = -eta mu/(1-mu) * mbar_t`` where ``mbar_t``
    is the averaged momentum after the update at step ``t``.
    """
    xbar = np.asarray(xbar_history, dtype=float)
    g = np.asarray(grad_history, dtype=float)
    if xbar.ndim == 1:
        xbar, g = xbar[:, None], g.reshape(-1, 1)
    if len(xbar) < 2:
        raise ValueError("need at least two iterates")
    if not mu < 1:
        raise ValueError("mu must be < 1")
    n = len(xbar) - 1
    z = _z_sequence(xbar, mu)
    res = np.abs(z[1:] - z[:-1] + eta / (1.0 - mu) * g[:n])
    worst = float(res.max())
    if momentum_history is not None:
        m = np.asarray(momentum_history, dtype=float).reshape(len(g), -1)
        res2 = np.abs(z[1:] - xbar[1:] + eta * mu / (1.0 - mu) * m[:n])
        worst = max(worst, float(res2.max()))
    return worst


def time_to_threshold(series, threshold: float, window: int = 20, ts=None) -> int | None:
    """First index whose trailing ``window``-mean is ``<= threshold``.

    Early points average over the values seen so far. ``ts`` maps positions
    to iteration numbers when the series was recorded with a stride.
    """
    values = np.asarray(series, dtype=float)
    if values.size == 0:
        raise ValueError("empty series")
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(len(values))
    lo = np.maximum(0, idx + 1 - window)
    smooth = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)
    hits = np.nonzero(smooth <= threshold)[0]
    if hits.size == 0:
        return None
    pos = int(hits[0])
    return int(ts[pos]) if ts is not None else pos


class RunMonitor:
    """Observes an engine step by step, checking identities and building records.

    Residuals are tracked at every step; records are emitted every
    ``stride`` steps (and for the final step) and carry the worst residual
    since the previous record.
    """

    def __init__(self, engine: Engine, stride: int = 1, strict: bool = False, check_bound: bool | None = None):
        self.engine = engine
        self.stride = stride
        self.strict = strict
        p = engine.problem
        self.check_bound = p.kind in ("logistic", "mlp") if check_bound is None else check_bound
        self.delta = engine.compressor.delta_bound(p.d) if engine.compressor is not None else None
        self.records: list[MetricsRecord] = []
        self.G_hat = 0.0
        self.worst = {
            "mean_preserve": 0.0,
            "aux_z": 0.0,
            "momentum_norm": 0.0,
            "consensus_bound": 0.0,
            "shared_knowledge": 0,
        }
        self.violations = {k: 0 for k in self.worst}
        self._pending: dict[str, float] = {}
        self._xbar = engine.mean_x()
        self._z = self._xbar.copy()
        self._eta_prev: float | None = None
        self._eta_max = engine.config.eta_at(0)
        self.records.append(self._record(residuals={}))

    def _flag(self, name: str, value: float, tol: float) -> None:
        self.worst[name] = max(self.worst[name], value)
        if name in ("mean_preserve", "aux_z"):
            self._pending[name] = max(self._pending.get(name, 0.0), value)
        if value > tol:
            self.violations[name] += 1
            if self.strict:
                raise InvariantViolation(f"{name} residual {value:.3e} exceeds {tol:.1e} at t={self.engine.t}")

    def _bound_rhs(self) -> float | None:
        e = self.engine
        cfg = e.config
        if cfg.method == "c_sgdm" or self.G_hat == 0.0:
            return None if cfg.method == "c_sgdm" else 0.0
        return consensus_bound(
            cfg.method, self._eta_max, cfg.p, G_SLACK * self.G_hat, e.K, cfg.mu, e.mixing.rho, self.delta
        )

    def _record(self, residuals: dict[str, float]) -> MetricsRecord:
        e = self.engine
        p = e.problem
        xbar = e.mean_x()
        f = p.loss(xbar)
        g = p.gradient(xbar)
        return MetricsRecord(
            t=e.t,
            f_bar=f,
            grad_norm_sq=float(g @ g),
            consensus=consensus_distance(e.states),
            comm_bits_cum=int(e.comm_bits),
            suboptimality=None if p.f_star is None else f - p.f_star,
            invariant_residuals=dict(residuals),
            consensus_bound_rhs=self._bound_rhs(),
        )

    def observe(self, info: StepInfo) -> MetricsRecord | None:
        e = self.engine
        mu = e.config.mu
        eta = info.eta
        xbar_new = e.mean_x()

        # mean recursion: xbar_{t+1} = xbar_t - eta * mbar_t
        res_mean = float(np.max(np.abs(xbar_new - (self._xbar - eta * info.mean_momentum))))
        self._flag("mean_preserve", res_mean, TOL_MEAN_PRESERVE)

        # the z-identities hold for a constant step size only
        z_new = (xbar_new - mu * self._xbar) / (1.0 - mu)
        if self._eta_prev is None or self._eta_prev == eta:
            r1 = np.max(np.abs(z_new - self._z + eta / (1.0 - mu) * info.mean_grad))
            r2 = np.max(np.abs(z_new - xbar_new + eta * mu / (1.0 - mu) * info.mean_momentum))
            self._flag("aux_z", float(max(r1, r2)), TOL_AUX_Z)
        self._z, self._xbar, self._eta_prev = z_new, xbar_new, eta
        self._eta_max = max(self._eta_max, eta)

        for g in info.grads:
            self.G_hat = max(self.G_hat, float(np.linalg.norm(g)))
        m_norm = max(float(np.linalg.norm(s.m)) for s in e.states)
        self._flag("momentum_norm", max(0.0, m_norm - G_SLACK * self.G_hat / (1.0 - mu)), 0.0)

        if e.config.method == "cpd_sgdm" and info.communicated:
            bad = shared_knowledge_violations(e.states)
            self._flag("shared_knowledge", bad, 0)

        rec = None
        if e.t % self.stride == 0 or e.t == e.config.T:
            rec = self._record(self._pending)
            self._pending = {}
            self.records.append(rec)
        if self.check_bound:
            rhs = rec.consensus_bound_rhs if rec is not None else self._bound_rhs()
            cons = rec.consensus if rec is not None else consensus_distance(e.states)
            if rhs is not None:
                self._flag("consensus_bound", max(0.0, cons - rhs), 0.0)
        return rec
