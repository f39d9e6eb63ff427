"""Contractive compression operators and their wire-size accounting.

Every operator maps a d-vector to a dense d-vector ``q`` and reports the
number of bits needed to transmit it. Deterministic operators satisfy
``||x - Q(x)||^2 <= (1 - delta) ||x||^2`` for every input; ``random_k``
satisfies it only in expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "COMPRESSOR_KINDS",
    "CompressionError",
    "CompressorSpec",
    "ContractionReport",
    "compress",
    "verify_contraction",
]

COMPRESSOR_KINDS = ("identity", "scaled_sign", "top_k", "random_k")
FLOAT_BITS = 64


class CompressionError(ValueError):
    pass


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "identity"
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in COMPRESSOR_KINDS:
            raise CompressionError(
                f"unknown compressor {self.kind!r}; expected one of {COMPRESSOR_KINDS}"
            )
        if self.kind in ("top_k", "random_k"):
            if self.k is None or int(self.k) != self.k or self.k < 1:
                raise CompressionError(f"{self.kind} needs a positive integer k, got {self.k!r}")

    @property
    def expectation_only(self) -> bool:
        return self.kind == "random_k"

    def delta_bound(self, d: int) -> float:
        """Guaranteed contraction parameter for dimension ``d``.

        The l1-scaled sign operator attains ``||x||_1^2 / (d ||x||_2^2)``,
        whose worst case over all x is ``1/d`` (one-hot inputs).
        """
        self._check_dim(d)
        if self.kind == "identity":
            return 1.0
        if self.kind == "scaled_sign":
            return 1.0 / d
        return self.k / d

    def bits(self, d: int) -> int:
        """Encoded size in bits of one compressed d-vector."""
        self._check_dim(d)
        if self.kind == "identity":
            return FLOAT_BITS * d
        if self.kind == "scaled_sign":
            return d + FLOAT_BITS
        if self.kind == "top_k":
            return self.k * (FLOAT_BITS + math.ceil(math.log2(d)))
        return self.k * FLOAT_BITS + FLOAT_BITS

    def _check_dim(self, d: int) -> None:
        if d < 1:
            raise CompressionError(f"dimension must be >= 1, got {d}")
        if self.k is not None and self.kind in ("top_k", "random_k") and self.k > d:
            raise CompressionError(f"{self.kind} requires k <= d, got k={self.k}, d={d}")


def compress(
    spec: CompressorSpec, x: np.ndarray, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, int]:
    """Apply ``spec`` to ``x``; return the dense reconstruction and its bit cost."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise CompressionError(f"expected a 1-d vector, got shape {x.shape}")
    d = x.shape[0]
    bits = spec.bits(d)
    if not np.all(np.isfinite(x)):
        raise CompressionError("non-finite coordinates in compressor input")

    if spec.kind == "identity":
        return x.copy(), bits
    if spec.kind == "scaled_sign":
        scale = np.abs(x).sum() / d
        # sign(0) := +1
        return scale * np.where(x >= 0.0, 1.0, -1.0), bits

    q = np.zeros_like(x)
    if spec.kind == "top_k":
        # stable sort keeps the lowest index first among ties
        idx = np.argsort(-np.abs(x), kind="stable")[: spec.k]
    else:
        if rng is None:
            raise CompressionError("random_k needs a random generator")
        idx = rng.choice(d, size=spec.k, replace=False)
    q[idx] = x[idx]
    return q, bits


@dataclass(frozen=True)
class ContractionReport:
    spec: CompressorSpec
    d: int
    n_samples: int
    max_ratio: float
    mean_ratio: float
    std_ratio: float
    bound: float
    n_violations: int
    worst_input: np.ndarray
    expectation_only: bool

    @property
    def passed(self) -> bool:
        if not self.expectation_only:
            return self.n_violations == 0
        stderr = self.std_ratio / math.sqrt(self.n_samples)
        return abs(self.mean_ratio - self.bound) <= 3.0 * stderr + 1e-12


def _adversarial_inputs(d: int) -> list[np.ndarray]:
    onehot = np.zeros(d)
    onehot[0] = 1.0
    last = np.zeros(d)
    last[-1] = -2.5
    alternating = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    ramp = np.arange(1, d + 1, dtype=float)
    return [onehot, last, np.ones(d), -3.0 * np.ones(d), alternating, ramp]


def verify_contraction(
    spec: CompressorSpec, d: int, trials: int, rng_seed: int = 0
) -> ContractionReport:
    """Empirically check the contraction inequality of ``spec`` in dimension ``d``.

    Ratios ``||x - Q(x)||^2 / ||x||^2`` are collected over ``trials`` standard
    normal vectors plus a few structured inputs. For ``random_k`` the bound
    is the expected ratio ``1 - k/d`` and only the mean is tested.
    """
    if trials < 1:
        raise CompressionError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    comp_rng = np.random.default_rng([rng_seed, 1])
    inputs = list(rng.standard_normal((trials, d))) + _adversarial_inputs(d)

    delta = spec.delta_bound(d)
    bound = 1.0 - delta
    ratios = np.empty(len(inputs))
    for i, x in enumerate(inputs):
        q, _ = compress(spec, x, comp_rng)
        ratios[i] = np.sum((x - q) ** 2) / np.sum(x**2)

    worst = int(np.argmax(ratios))
    n_violations = 0 if spec.expectation_only else int(np.sum(ratios > bound + 1e-12))
    return ContractionReport(
        spec=spec,
        d=d,
        n_samples=len(inputs),
        max_ratio=float(ratios.max()),
        mean_ratio=float(ratios.mean()),
        std_ratio=float(ratios.std(ddof=1)) if len(inputs) > 1 else 0.0,
        bound=bound,
        n_violations=n_violations,
        worst_input=inputs[worst],
        expectation_only=spec.expectation_only,
    )
