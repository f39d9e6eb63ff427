"""Worker graphs and their doubly-stochastic mixing matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TOPOLOGY_KINDS",
    "MixingMatrix",
    "TopologyError",
    "ValidationReport",
    "build_topology",
    "load_mixing_matrix",
    "spectral_gap",
    "validate_doubly_stochastic",
]

TOPOLOGY_KINDS = ("ring", "complete", "grid2d", "path")


class TopologyError(ValueError):
    """Raised for invalid graph parameters or unusable mixing matrices."""


@dataclass(frozen=True)
class ValidationReport:
    max_row_dev: float
    max_col_dev: float
    max_asymmetry: float
    min_entry: float
    max_entry: float
    tol: float

    @property
    def passed(self) -> bool:
        return (
            self.max_row_dev <= self.tol
            and self.max_col_dev <= self.tol
            and self.max_asymmetry <= self.tol
            and self.min_entry >= -self.tol
            and self.max_entry <= 1.0 + self.tol
        )

    def __bool__(self) -> bool:
        return self.passed


def validate_doubly_stochastic(W, tol: float = 1e-12) -> ValidationReport:
    """Check symmetry, unit row/column sums and entry range of ``W``."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise TopologyError(f"mixing matrix must be square, got shape {W.shape}")
    return ValidationReport(
        max_row_dev=float(np.max(np.abs(W.sum(axis=1) - 1.0))),
        max_col_dev=float(np.max(np.abs(W.sum(axis=0) - 1.0))),
        max_asymmetry=float(np.max(np.abs(W - W.T))),
        min_entry=float(W.min()),
        max_entry=float(W.max()),
        tol=tol,
    )


def _spectrum(W: np.ndarray) -> tuple[float, float, np.ndarray]:
    K = W.shape[0]
    eig = np.linalg.eigvalsh(W)
    if K == 1:
        return 1.0, 0.0, eig
    mags = np.sort(np.abs(eig))[::-1]
    lam2 = mags[1]
    if lam2 >= 1.0 - 1e-12:
        raise TopologyError("zero spectral gap: graph is disconnected")
    beta = float(np.max(1.0 - eig))
    return float(1.0 - lam2), beta, eig


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly-stochastic gossip weights with cached spectral data.

    ``rho`` is the spectral gap ``1 - |lambda_2|`` and ``beta`` is
    ``max_i (1 - lambda_i)``.
    """

    weights: np.ndarray
    kind: str = "custom"
    tol: float = field(default=1e-12, repr=False, compare=False)
    rho: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self) -> None:
        W = np.array(self.weights, dtype=float)
        report = validate_doubly_stochastic(W, tol=self.tol)
        if not report:
            raise TopologyError(f"weights are not symmetric doubly stochastic: {report}")
        W.setflags(write=False)
        rho, beta, _ = _spectrum(W)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "beta", beta)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    def neighbors(self, k: int) -> list[int]:
        """Workers ``j != k`` with a nonzero weight ``w_kj``."""
        row = self.weights[k]
        return [j for j in range(self.K) if j != k and row[j] != 0.0]

    def degree(self, k: int) -> int:
        return len(self.neighbors(k))

    @property
    def n_directed_edges(self) -> int:
        return sum(self.degree(k) for k in range(self.K))


def spectral_gap(W: MixingMatrix | np.ndarray) -> tuple[float, float]:
    """Return ``(rho, beta)`` recomputed from the eigenvalues of ``W``."""
    weights = W.weights if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)
    report = validate_doubly_stochastic(weights, tol=1e-10)
    if not report:
        raise TopologyError(f"not doubly stochastic: {report}")
    rho, beta, _ = _spectrum(weights)
    return rho, beta


def _edges(kind: str, K: int) -> list[tuple[int, int]]:
    if kind == "ring":
        if K == 2:
            return [(0, 1)]
        return [(i, (i + 1) % K) for i in range(K)] if K >= 3 else []
    if kind == "path":
        return [(i, i + 1) for i in range(K - 1)]
    if kind == "grid2d":
        side = math.isqrt(K)
        if side * side != K:
            raise TopologyError(f"grid2d requires a perfect-square worker count, got K={K}")
        edges = []
        for r in range(side):
            for c in range(side):
                i = r * side + c
                if c + 1 < side:
                    edges.append((i, i + 1))
                if r + 1 < side:
                    edges.append((i, i + side))
        return edges
    raise TopologyError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")


def build_topology(kind: str, K: int) -> MixingMatrix:
    """Build the Metropolis-Hastings mixing matrix of a standard graph.

    Edge weights are ``1 / (1 + max(deg_i, deg_j))`` and the diagonal takes
    the remaining mass; ``complete`` uses the uniform ``1/K`` matrix.
    """
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise TopologyError(f"worker count must be a positive integer, got {K!r}")
    K = int(K)
    if kind == "complete":
        return MixingMatrix(np.full((K, K), 1.0 / K), kind=kind)
    edges = _edges(kind, K)
    deg = np.zeros(K, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    W = np.zeros((K, K))
    for i, j in edges:
        w = 1.0 / (1 + max(deg[i], deg[j]))
        W[i, j] = W[j, i] = w
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return MixingMatrix(W, kind=kind)


def load_mixing_matrix(path: str | Path, tol: float = 1e-9) -> MixingMatrix:
    """Read a whitespace-delimited K x K matrix and validate it at ``tol``."""
    try:
        W = np.loadtxt(path, dtype=float, ndmin=2)
    except ValueError as exc:
        raise TopologyError(f"cannot parse mixing matrix {path}: {exc}") from exc
    return MixingMatrix(W, kind="custom", tol=tol)
