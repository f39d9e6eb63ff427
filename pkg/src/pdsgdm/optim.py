"""Decentralized momentum SGD engine with exact and compressed gossip.

Methods
-------
``pd_sgdm``  local momentum steps, exact neighbor averaging every ``p`` steps
``cpd_sgdm`` as above but neighbors exchange compressed deltas against shared
             auxiliary copies ``x_hat`` and mix with consensus step ``gamma``
``c_sgdm``   centralized momentum SGD on the worker-averaged gradient
``d_sgd``    ``pd_sgdm`` with ``mu = 0`` and ``p = 1``
``pd_sgd``   ``pd_sgdm`` with ``mu = 0``
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .compression import CompressorSpec, compress
from .problems import Problem, stochastic_gradient
from .topology import MixingMatrix

__all__ = [
    "METHODS",
    "Engine",
    "NumericAbort",
    "OptimizerConfig",
    "StepInfo",
    "WorkerState",
    "default_gamma",
    "gossip_compressed",
    "gossip_exact",
    "local_step",
    "shared_knowledge_violations",
]

METHODS = ("pd_sgdm", "cpd_sgdm", "c_sgdm", "d_sgd", "pd_sgd")
FLOAT_BITS = 64


class NumericAbort(FloatingPointError):
    """A worker buffer became NaN or infinite."""


@dataclass
class OptimizerConfig:
    method: str = "pd_sgdm"
    eta: float = 0.01
    mu: float = 0.9
    p: int = 4
    gamma: float | None = None
    T: int = 1000
    lr_decay_factor: float = 1.0
    lr_milestones: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must be in [0, 1) and mu must be < 1, got {self.mu}")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"period p must be a positive integer, got {self.p}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if int(self.T) != self.T or self.T < 0:
            raise ValueError(f"T must be a nonnegative integer, got {self.T}")
        self.lr_milestones = tuple(sorted(int(m) for m in self.lr_milestones))

    def normalized(self) -> OptimizerConfig:
        """Apply the baseline reductions (``d_sgd`` and ``pd_sgd`` drop momentum)."""
        if self.method == "d_sgd":
            return replace(self, mu=0.0, p=1)
        if self.method == "pd_sgd":
            return replace(self, mu=0.0)
        return self

    def eta_at(self, t: int) -> float:
        n_decays = sum(1 for m in self.lr_milestones if t >= m)
        return self.eta * self.lr_decay_factor**n_decays


def default_gamma(rho: float, delta: float, beta: float) -> tuple[float, float]:
    """Consensus step size from the compressed-gossip analysis, with its rate alpha.

    ``gamma = rho*delta / (16 rho + rho^2 + 4 beta^2 + 2 rho beta^2 - 8 rho delta)``
    and ``alpha = rho^2 delta / 82``.
    """
    if not (0.0 < rho <= 1.0 and 0.0 < delta <= 1.0 and 0.0 <= beta <= 2.0):
        raise ValueError(f"need rho, delta in (0, 1] and beta in [0, 2]; got {rho}, {delta}, {beta}")
    denom = 16 * rho + rho**2 + 4 * beta**2 + 2 * rho * beta**2 - 8 * rho * delta
    if denom <= 0:
        raise ValueError(f"non-positive denominator {denom} in the consensus step size")
    return rho * delta / denom, rho**2 * delta / 82.0


@dataclass
class WorkerState:
    x: np.ndarray
    m: np.ndarray
    x_hat_self: np.ndarray | None = None
    x_hat_neighbors: dict[int, np.ndarray] | None = None


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericAbort("non-finite value in worker state")


def local_step(s: WorkerState, g, eta: float, mu: float) -> np.ndarray:
    """Momentum update ``m <- mu m + g``; returns the intermediate ``x - eta m``."""
    grad = g.grad if hasattr(g, "grad") else np.asarray(g, dtype=float)
    s.m = mu * s.m + grad
    x_half = s.x - eta * s.m
    _check_finite(s.m, x_half)
    return x_half


def gossip_exact(states: list[WorkerState], W: MixingMatrix) -> int:
    """Replace every ``x`` by the weighted neighbor average; returns bits sent.

    The states must already hold the intermediate iterates. All reads come
    from a snapshot taken before any write.
    """
    X = np.stack([s.x for s in states])
    new = W.weights @ X
    for k, s in enumerate(states):
        s.x = new[k]
    return W.n_directed_edges * FLOAT_BITS * X.shape[1]


def init_auxiliary(states: list[WorkerState], W: MixingMatrix) -> None:
    """Start every auxiliary copy at the common initial model."""
    for k, s in enumerate(states):
        s.x_hat_self = s.x.copy()
        s.x_hat_neighbors = {j: states[j].x.copy() for j in W.neighbors(k)}


def gossip_compressed(
    states: list[WorkerState],
    W: MixingMatrix,
    gamma: float,
    compressor: CompressorSpec,
    rngs: list[np.random.Generator] | None = None,
) -> int:
    """One compressed communication round; returns bits sent.

    1. ``x_k <- x_k + gamma * sum_j w_kj (x_hat_j - x_hat_k)`` using worker
       ``k``'s stored copies.
    2. ``q_k = Q(x_k - x_hat_k)``.
    3. Every holder of a copy of ``x_hat_j`` adds ``q_j``.
    """
    weights = W.weights
    corrections = []
    for k, s in enumerate(states):
        corr = np.zeros_like(s.x)
        for j, xh in s.x_hat_neighbors.items():
            corr += weights[k, j] * (xh - s.x_hat_self)
        corrections.append(corr)
    for s, corr in zip(states, corrections):
        s.x = s.x + gamma * corr

    qs, bits = [], 0
    for k, s in enumerate(states):
        q, b = compress(compressor, s.x - s.x_hat_self, None if rngs is None else rngs[k])
        qs.append(q)
        bits += b * W.degree(k)

    for k, s in enumerate(states):
        s.x_hat_self = s.x_hat_self + qs[k]
        for j in s.x_hat_neighbors:
            s.x_hat_neighbors[j] = s.x_hat_neighbors[j] + qs[j]
        _check_finite(s.x, s.x_hat_self)
    return bits


def shared_knowledge_violations(states: list[WorkerState]) -> int:
    """Count stored neighbor copies that differ bitwise from the owner's ``x_hat``."""
    bad = 0
    for s in states:
        for j, xh in (s.x_hat_neighbors or {}).items():
            if not np.array_equal(xh, states[j].x_hat_self):
                bad += 1
    return bad


@dataclass
class StepInfo:
    t: int
    eta: float
    grads: list[np.ndarray]
    communicated: bool
    bits: int
    mean_grad: np.ndarray = field(repr=False, default=None)
    mean_momentum: np.ndarray = field(repr=False, default=None)


class Engine:
    """Synchronous simulation of ``K`` workers.

    Each worker draws minibatches from its own generator seeded by
    ``(seed, 0, k)``; compression randomness uses ``(seed, 1, k)``.
    """

    def __init__(
        self,
        problem: Problem,
        mixing: MixingMatrix,
        config: OptimizerConfig,
        compressor: CompressorSpec | None = None,
        batch_size: int = 1,
        seed: int = 0,
        x0: np.ndarray | None = None,
        with_replacement: bool = True,
    ):
        if mixing.K != problem.K:
            raise ValueError(f"topology has {mixing.K} workers but problem has {problem.K}")
        self.problem = problem
        self.mixing = mixing
        self.config = config.normalized()
        self.batch_size = batch_size
        self.with_replacement = with_replacement
        self.compressor = compressor
        if self.config.method == "cpd_sgdm":
            if compressor is None:
                raise ValueError("cpd_sgdm requires a compressor")
            if self.config.gamma is None:
                delta = compressor.delta_bound(problem.d)
                gamma, _ = default_gamma(mixing.rho, delta, mixing.beta)
                self.config = replace(self.config, gamma=gamma)
        K = problem.K
        x0 = problem.initial_point() if x0 is None else np.asarray(x0, dtype=float)
        self.states = [WorkerState(x0.copy(), np.zeros_like(x0)) for _ in range(K)]
        if self.config.method == "cpd_sgdm":
            init_auxiliary(self.states, mixing)
        self.data_rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, k))) for k in range(K)]
        self.comp_rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, k))) for k in range(K)]
        self.t = 0
        self.comm_bits = 0
        self.n_rounds = 0

    @property
    def K(self) -> int:
        return self.problem.K

    def stacked(self) -> np.ndarray:
        return np.stack([s.x for s in self.states])

    def mean_x(self) -> np.ndarray:
        return self.stacked().mean(axis=0)

    def mean_m(self) -> np.ndarray:
        return np.stack([s.m for s in self.states]).mean(axis=0)

    def step(self) -> StepInfo:
        cfg = self.config
        t = self.t
        eta = cfg.eta_at(t)
        grads = [
            stochastic_gradient(self.problem, k, s.x, self.batch_size, self.data_rngs[k], self.with_replacement).grad
            for k, s in enumerate(self.states)
        ]
        communicated = False
        bits = 0
        if cfg.method == "c_sgdm":
            s0 = self.states[0]
            g_bar = np.stack(grads).mean(axis=0)
            x_new = local_step(s0, g_bar, eta, cfg.mu)
            for s in self.states:
                s.x = x_new.copy()
                s.m = s0.m.copy()
            bits = self.K * self.problem.d * FLOAT_BITS
            communicated = True
        else:
            for s, g in zip(self.states, grads):
                s.x = local_step(s, g, eta, cfg.mu)
            if (t + 1) % cfg.p == 0:
                communicated = True
                if cfg.method == "cpd_sgdm":
                    bits = gossip_compressed(self.states, self.mixing, cfg.gamma, self.compressor, self.comp_rngs)
                else:
                    bits = gossip_exact(self.states, self.mixing)
        if communicated:
            self.n_rounds += 1
        self.comm_bits += bits
        self.t += 1
        return StepInfo(
            t=t,
            eta=eta,
            grads=grads,
            communicated=communicated,
            bits=bits,
            mean_grad=np.stack(grads).mean(axis=0),
            mean_momentum=self.mean_m(),
        )
