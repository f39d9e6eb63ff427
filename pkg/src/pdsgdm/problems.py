"""Partitioned finite-sum objectives with stochastic gradient oracles.

The global objective is the average of the per-worker objectives,
``f(x) = (1/K) sum_k f_k(x)``, where each ``f_k`` is an empirical mean over
the samples held by worker ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PROBLEM_KINDS",
    "GradientSample",
    "LogisticProblem",
    "MLPProblem",
    "Problem",
    "ProblemError",
    "QuadraticProblem",
    "estimate_constants",
    "full_gradient",
    "make_problem",
    "stochastic_gradient",
]

PROBLEM_KINDS = ("quadratic", "logistic", "mlp")


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class GradientSample:
    grad: np.ndarray
    worker: int
    batch_indices: np.ndarray


class Problem:
    """Base class: subclasses provide per-sample losses and gradients."""

    kind: str = "abstract"
    f_star: float | None = None
    x_star: np.ndarray | None = None

    def __init__(self, K: int, d: int):
        if K < 1:
            raise ProblemError(f"need at least one worker, got K={K}")
        self.K = K
        self.d = d

    # -- subclass hooks -------------------------------------------------
    def n_samples(self, worker: int) -> int:
        raise NotImplementedError

    def _batch_loss(self, worker: int, x: np.ndarray, idx: np.ndarray) -> float:
        raise NotImplementedError

    def _batch_grad(self, worker: int, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _per_sample_grads(self, worker: int, x: np.ndarray) -> np.ndarray:
        """Rows are the gradients of every local sample at ``x``."""
        raise NotImplementedError

    # -- public oracles -------------------------------------------------
    def _check_worker(self, worker: int) -> None:
        if not 0 <= worker < self.K:
            raise ProblemError(f"worker index {worker} out of range for K={self.K}")

    def loss(self, x: np.ndarray, worker: int | None = None) -> float:
        """Local objective ``f_k(x)``, or the global average when ``worker`` is None."""
        if worker is None:
            return float(np.mean([self.loss(x, k) for k in range(self.K)]))
        self._check_worker(worker)
        return self._batch_loss(worker, x, np.arange(self.n_samples(worker)))

    def gradient(self, x: np.ndarray, worker: int | None = None) -> np.ndarray:
        if worker is None:
            return np.mean([self.gradient(x, k) for k in range(self.K)], axis=0)
        self._check_worker(worker)
        return self._batch_grad(worker, x, np.arange(self.n_samples(worker)))

    def sample_gradient(self, worker: int, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self._batch_grad(worker, x, idx)

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.d)

    def holdout_loss(self, x: np.ndarray) -> float | None:
        return None

    def smoothness(self) -> float:
        raise NotImplementedError


def stochastic_gradient(
    p: Problem,
    worker: int,
    x: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    replace: bool = True,
) -> GradientSample:
    """Minibatch gradient of worker ``worker`` at ``x``.

    Indices are drawn uniformly with replacement by default, which keeps the
    estimate unbiased for the local full gradient. Without replacement the
    indices are sorted, so a full-size batch reproduces ``full_gradient``
    bit for bit.
    """
    p._check_worker(worker)
    if batch_size < 1:
        raise ProblemError(f"batch_size must be >= 1, got {batch_size}")
    n = p.n_samples(worker)
    if replace:
        idx = rng.integers(0, n, size=batch_size)
    else:
        if batch_size > n:
            raise ProblemError(f"batch_size {batch_size} exceeds local sample count {n}")
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
    return GradientSample(grad=p.sample_gradient(worker, x, idx), worker=worker, batch_indices=idx)


def full_gradient(p: Problem, worker: int | str, x: np.ndarray) -> np.ndarray:
    """Local full gradient, or the global one for ``worker="all"``."""
    return p.gradient(x, None if worker == "all" else int(worker))


class QuadraticProblem(Problem):
    """Least squares ``f_k(x) = (1/2n) sum_i ||A_i x - b_i||^2``.

    Each sample is a block ``A_i`` of shape ``(r, d)`` with target ``b_i`` of
    shape ``(r,)``; generated problems use ``r = 1``.
    """

    kind = "quadratic"

    def __init__(self, A: list[np.ndarray], b: list[np.ndarray]):
        A = [np.asarray(a, dtype=float) for a in A]
        A = [a[:, None, :] if a.ndim == 2 else a for a in A]
        b = [np.asarray(v, dtype=float).reshape(a.shape[0], a.shape[1]) for a, v in zip(A, b)]
        if len(A) != len(b) or not A:
            raise ProblemError("need matching, non-empty per-worker A and b lists")
        super().__init__(K=len(A), d=A[0].shape[2])
        for a in A:
            if a.shape[0] < 1:
                raise ProblemError("every worker needs at least one sample")
        self.A = A
        self.b = b
        self._flat = [(a.reshape(-1, self.d), v.reshape(-1)) for a, v in zip(A, b)]
        self.hessian = np.mean([Af.T @ Af / a.shape[0] for (Af, _), a in zip(self._flat, A)], axis=0)
        rhs = np.mean([Af.T @ bf / a.shape[0] for (Af, bf), a in zip(self._flat, A)], axis=0)
        self.x_star = np.linalg.lstsq(self.hessian, rhs, rcond=None)[0]
        self.f_star = self.loss(self.x_star)

    def n_samples(self, worker: int) -> int:
        return self.A[worker].shape[0]

    def _batch_loss(self, worker, x, idx):
        r = np.einsum("brd,d->br", self.A[worker][idx], x) - self.b[worker][idx]
        return 0.5 * float(np.sum(r * r)) / len(idx)

    def _batch_grad(self, worker, x, idx):
        Ab = self.A[worker][idx]
        r = np.einsum("brd,d->br", Ab, x) - self.b[worker][idx]
        return np.einsum("brd,br->d", Ab, r) / len(idx)

    def _per_sample_grads(self, worker, x):
        Ab = self.A[worker]
        r = np.einsum("brd,d->br", Ab, x) - self.b[worker]
        return np.einsum("brd,br->bd", Ab, r)

    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[-1])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LogisticProblem(Problem):
    """L2-regularized binary logistic regression with labels in {-1, +1}."""

    kind = "logistic"

    def __init__(
        self,
        features: list[np.ndarray],
        labels: list[np.ndarray],
        reg: float = 1e-2,
        holdout: tuple[np.ndarray, np.ndarray] | None = None,
        solve_reference: bool = True,
    ):
        if len(features) != len(labels) or not features:
            raise ProblemError("need matching, non-empty per-worker feature/label lists")
        super().__init__(K=len(features), d=np.asarray(features[0]).shape[1])
        self.features = [np.asarray(a, dtype=float) for a in features]
        self.labels = [np.asarray(y, dtype=float) for y in labels]
        for a, y in zip(self.features, self.labels):
            if a.shape[0] < 1 or a.shape[0] != y.shape[0]:
                raise ProblemError("every worker needs >= 1 sample with matching labels")
        self.reg = float(reg)
        self.holdout = holdout
        if solve_reference:
            self.x_star, self.f_star = self._newton_solve()

    def n_samples(self, worker: int) -> int:
        return self.features[worker].shape[0]

    def _margins(self, worker, x, idx):
        return self.labels[worker][idx] * (self.features[worker][idx] @ x)

    def _batch_loss(self, worker, x, idx):
        z = self._margins(worker, x, idx)
        return float(np.mean(np.logaddexp(0.0, -z))) + 0.5 * self.reg * float(x @ x)

    def _batch_grad(self, worker, x, idx):
        a, y = self.features[worker][idx], self.labels[worker][idx]
        coef = -y * _sigmoid(-(y * (a @ x)))
        return a.T @ coef / len(idx) + self.reg * x

    def _per_sample_grads(self, worker, x):
        a, y = self.features[worker], self.labels[worker]
        coef = -y * _sigmoid(-(y * (a @ x)))
        return coef[:, None] * a + self.reg * x

    def smoothness(self) -> float:
        max_sq = max(float(np.max(np.sum(a * a, axis=1))) for a in self.features)
        return 0.25 * max_sq + self.reg

    def holdout_loss(self, x):
        if self.holdout is None:
            return None
        a, y = self.holdout
        return float(np.mean(np.logaddexp(0.0, -y * (a @ x))))

    def _newton_solve(self, tol: float = 1e-10, max_iter: int = 100):
        x = np.zeros(self.d)
        for _ in range(max_iter):
            g = self.gradient(x)
            if np.linalg.norm(g) <= tol:
                break
            H = self.reg * np.eye(self.d)
            for a, y in zip(self.features, self.labels):
                s = _sigmoid(y * (a @ x))
                H += (a.T * (s * (1 - s))) @ a / (a.shape[0] * self.K)
            step = np.linalg.solve(H, g)
            # backtracking keeps Newton monotone far from the optimum
            t, f0 = 1.0, self.loss(x)
            while self.loss(x - t * step) > f0 - 0.25 * t * (g @ step) and t > 1e-8:
                t *= 0.5
            x = x - t * step
        else:
            raise ProblemError("reference Newton solve did not reach the gradient tolerance")
        return x, self.loss(x)


class MLPProblem(Problem):
    """One-hidden-layer tanh network with squared loss.

    Parameters are packed as ``[W1 (h*m), b1 (h), w2 (h), b2 (1)]``.
    """

    kind = "mlp"

    def __init__(
        self,
        features: list[np.ndarray],
        targets: list[np.ndarray],
        hidden: int = 8,
        init_seed: int = 0,
        holdout: tuple[np.ndarray, np.ndarray] | None = None,
    ):
        if len(features) != len(targets) or not features:
            raise ProblemError("need matching, non-empty per-worker feature/target lists")
        self.m = np.asarray(features[0]).shape[1]
        self.h = int(hidden)
        super().__init__(K=len(features), d=self.h * self.m + 2 * self.h + 1)
        self.features = [np.asarray(a, dtype=float) for a in features]
        self.targets = [np.asarray(y, dtype=float) for y in targets]
        for a, y in zip(self.features, self.targets):
            if a.shape[0] < 1 or a.shape[0] != y.shape[0]:
                raise ProblemError("every worker needs >= 1 sample with matching targets")
        self.init_seed = init_seed
        self.holdout = holdout

    def unpack(self, x):
        h, m = self.h, self.m
        W1 = x[: h * m].reshape(h, m)
        b1 = x[h * m : h * m + h]
        w2 = x[h * m + h : h * m + 2 * h]
        return W1, b1, w2, x[-1]

    def _forward(self, a, x):
        W1, b1, w2, b2 = self.unpack(x)
        hid = np.tanh(a @ W1.T + b1)
        return hid, hid @ w2 + b2

    def n_samples(self, worker):
        return self.features[worker].shape[0]

    def _batch_loss(self, worker, x, idx):
        _, out = self._forward(self.features[worker][idx], x)
        r = out - self.targets[worker][idx]
        return 0.5 * float(np.mean(r * r))

    def _per_sample(self, a, y, x):
        W1, b1, w2, b2 = self.unpack(x)
        hid, out = self._forward(a, x)
        r = out - y
        dpre = (r[:, None] * w2) * (1.0 - hid * hid)
        gW1 = dpre[:, :, None] * a[:, None, :]
        return np.concatenate(
            [gW1.reshape(len(a), -1), dpre, r[:, None] * hid, r[:, None]], axis=1
        )

    def _batch_grad(self, worker, x, idx):
        return self._per_sample(self.features[worker][idx], self.targets[worker][idx], x).mean(axis=0)

    def _per_sample_grads(self, worker, x):
        return self._per_sample(self.features[worker], self.targets[worker], x)

    def initial_point(self):
        rng = np.random.default_rng([self.init_seed, 7])
        return 0.5 * rng.standard_normal(self.d) / np.sqrt(self.m)

    def holdout_loss(self, x):
        if self.holdout is None:
            return None
        a, y = self.holdout
        _, out = self._forward(a, x)
        return 0.5 * float(np.mean((out - y) ** 2))

    def smoothness(self, n_points: int = 10, radius: float = 1.0, seed: int = 0) -> float:
        return _power_iteration_L(self, n_points, radius, seed)


def _power_iteration_L(p: Problem, n_points: int, radius: float, seed: int, iters: int = 30) -> float:
    """Largest Hessian eigenvalue magnitude via finite-difference power iteration."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_points):
        x = _ball_point(rng, p.d, radius)
        v = rng.standard_normal(p.d)
        v /= np.linalg.norm(v)
        eps = 1e-5 * (1.0 + np.linalg.norm(x))
        lam = 0.0
        for _ in range(iters):
            hv = (p.gradient(x + eps * v) - p.gradient(x - eps * v)) / (2 * eps)
            lam = float(np.linalg.norm(hv))
            if lam == 0.0:
                break
            v = hv / lam
        best = max(best, lam)
    return best


def _ball_point(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    return radius * rng.uniform() ** (1.0 / d) * u


# -- generation -------------------------------------------------------------


def _cluster_data(rng, n_total, dim, separation=1.0):
    y = np.where(np.arange(n_total) % 2 == 0, -1.0, 1.0)
    rng.shuffle(y)
    center = rng.standard_normal(dim)
    center *= separation / np.linalg.norm(center)
    a = y[:, None] * center + rng.standard_normal((n_total, dim)) / np.sqrt(dim)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return a, y


def _label_skew_order(rng, y, heterogeneity):
    """Sort key mixing label and noise: 0 gives a shuffle, 1 a full label sort."""
    noise = rng.uniform(-1.0, 1.0, size=y.shape[0])
    key = heterogeneity * y + (1.0 - heterogeneity) * noise
    return np.lexsort((noise, key))


def make_problem(
    kind: str,
    d: int,
    n_per_worker: int,
    K: int,
    heterogeneity: float = 0.0,
    seed: int = 0,
    *,
    reg: float = 1e-2,
    hidden: int = 8,
    noise_std: float = 0.5,
    shared_data: bool = False,
    holdout_fraction: float = 0.0,
) -> Problem:
    """Generate a synthetic partitioned problem.

    For ``quadratic`` the rows of worker ``k`` are drawn around a per-worker
    mean shift and targets come from a per-worker planted model, both scaled
    by ``heterogeneity``. For ``logistic`` and ``mlp`` the data are two
    Gaussian clusters and ``heterogeneity`` controls label skew across
    workers. ``shared_data`` gives every worker the same dataset. For
    ``mlp``, ``d`` is the input feature dimension.
    """
    if kind not in PROBLEM_KINDS:
        raise ProblemError(f"unknown problem kind {kind!r}; expected one of {PROBLEM_KINDS}")
    if d < 1 or n_per_worker < 1 or K < 1:
        raise ProblemError(f"need d, n_per_worker, K >= 1, got d={d}, n={n_per_worker}, K={K}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ProblemError(f"heterogeneity must lie in [0, 1], got {heterogeneity}")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ProblemError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(seed)
    n_workers_data = 1 if shared_data else K

    if kind == "quadratic":
        x_true = rng.standard_normal(d)
        A, b = [], []
        for _ in range(n_workers_data):
            shift = heterogeneity * rng.standard_normal(d)
            x_k = x_true + heterogeneity * rng.standard_normal(d)
            a = rng.standard_normal((n_per_worker, d)) + shift
            A.append(a)
            b.append(a @ x_k + noise_std * rng.standard_normal(n_per_worker))
        if shared_data:
            A, b = A * K, b * K
        return QuadraticProblem(A, b)

    n_holdout = int(round(holdout_fraction * n_per_worker * n_workers_data))
    n_total = n_per_worker * n_workers_data
    a, y = _cluster_data(rng, n_total + n_holdout, d)
    holdout = (a[n_total:], y[n_total:]) if n_holdout else None
    a, y = a[:n_total], y[:n_total]
    order = _label_skew_order(rng, y, heterogeneity)
    a, y = a[order], y[order]
    feats = [a[k * n_per_worker : (k + 1) * n_per_worker] for k in range(n_workers_data)]
    labs = [y[k * n_per_worker : (k + 1) * n_per_worker] for k in range(n_workers_data)]
    if shared_data:
        feats, labs = feats * K, labs * K
    if kind == "logistic":
        return LogisticProblem(feats, labs, reg=reg, holdout=holdout)
    return MLPProblem(feats, labs, hidden=hidden, init_seed=seed, holdout=holdout)


@dataclass(frozen=True)
class ProblemConstants:
    L: float
    sigma_sq_hat: float
    G_hat: float
    extra: dict = field(default_factory=dict)


def estimate_constants(
    p: Problem,
    region_radius: float,
    n_points: int = 20,
    batch_size: int = 1,
    replace: bool = True,
    seed: int = 0,
) -> ProblemConstants:
    """Smoothness plus empirical variance and gradient-norm maxima on a ball.

    ``sigma_sq_hat`` is the largest exact minibatch-gradient variance over
    sampled points and workers for the given sampling scheme (it is zero for
    a full batch drawn without replacement). ``G_hat`` is the largest
    single-sample gradient norm seen.
    """
    if region_radius <= 0:
        raise ProblemError("region_radius must be positive")
    rng = np.random.default_rng(seed)
    L = p.smoothness()
    sigma_sq = 0.0
    G = 0.0
    for _ in range(n_points):
        x = _ball_point(rng, p.d, region_radius)
        for k in range(p.K):
            per = p._per_sample_grads(k, x)
            n = per.shape[0]
            var1 = float(np.mean(np.sum((per - per.mean(axis=0)) ** 2, axis=1)))
            if replace:
                var = var1 / batch_size
            else:
                B = min(batch_size, n)
                var = 0.0 if B >= n else var1 / B * (n - B) / (n - 1)
            sigma_sq = max(sigma_sq, var)
            G = max(G, float(np.max(np.linalg.norm(per, axis=1))))
    extra = {}
    if isinstance(p, LogisticProblem):
        max_row = max(float(np.max(np.linalg.norm(a, axis=1))) for a in p.features)
        extra["G_analytic"] = max_row + p.reg * region_radius
    return ProblemConstants(L=L, sigma_sq_hat=sigma_sq, G_hat=G, extra=extra)
