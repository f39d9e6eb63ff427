"""scikit-learn compatible estimators trained by simulated decentralized SGD.

The training rows are split across ``n_workers`` simulated workers, each
worker runs local momentum SGD, and the models are mixed over the chosen
topology. After ``fit`` the averaged model ``coef_`` is used for prediction.

>>> from sklearn.datasets import make_classification
>>> X, y = make_classification(n_samples=400, n_features=5, random_state=0)
>>> clf = DecentralizedSGDClassifier(n_workers=4, max_iter=500).fit(X, y)
>>> clf.score(X, y) > 0.8
True
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .compression import CompressorSpec
from .diagnostics import RunMonitor
from .optim import Engine, OptimizerConfig
from .problems import LogisticProblem, QuadraticProblem
from .topology import build_topology

__all__ = ["DecentralizedSGDClassifier", "DecentralizedSGDRegressor"]


class _DecentralizedSGDBase(BaseEstimator):
    def __init__(
        self,
        method="pd_sgdm",
        n_workers=8,
        topology="ring",
        eta=0.05,
        mu=0.9,
        period=4,
        gamma=None,
        compression=None,
        compression_k=None,
        batch_size=8,
        max_iter=1000,
        fit_intercept=True,
        shuffle=True,
        record_stride=10,
        random_state=None,
    ):
        self.method = method
        self.n_workers = n_workers
        self.topology = topology
        self.eta = eta
        self.mu = mu
        self.period = period
        self.gamma = gamma
        self.compression = compression
        self.compression_k = compression_k
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.fit_intercept = fit_intercept
        self.shuffle = shuffle
        self.record_stride = record_stride
        self.random_state = random_state

    def _design(self, X):
        if self.fit_intercept:
            return np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def _partition(self, X, y, rng):
        if X.shape[0] < self.n_workers:
            raise ValueError(f"need at least n_workers={self.n_workers} samples, got {X.shape[0]}")
        order = rng.permutation(X.shape[0]) if self.shuffle else np.arange(X.shape[0])
        parts = np.array_split(order, self.n_workers)
        return [X[i] for i in parts], [y[i] for i in parts]

    def _train(self, problem, seed):
        compressor = None
        if self.compression is not None:
            compressor = CompressorSpec(self.compression, self.compression_k)
        elif self.method == "cpd_sgdm":
            compressor = CompressorSpec("scaled_sign")
        cfg = OptimizerConfig(
            method=self.method, eta=self.eta, mu=self.mu, p=self.period, gamma=self.gamma, T=self.max_iter
        )
        engine = Engine(
            problem,
            build_topology(self.topology, self.n_workers),
            cfg,
            compressor,
            batch_size=self.batch_size,
            seed=seed,
        )
        monitor = RunMonitor(engine, stride=self.record_stride, check_bound=False)
        for _ in range(cfg.T):
            monitor.observe(engine.step())
        self.history_ = monitor.records
        self.n_iter_ = engine.t
        self.comm_bits_ = engine.comm_bits
        w = engine.mean_x()
        if self.fit_intercept:
            self.coef_, self.intercept_ = w[:-1], float(w[-1])
        else:
            self.coef_, self.intercept_ = w, 0.0
        return self

    def _decision(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_


class DecentralizedSGDRegressor(RegressorMixin, _DecentralizedSGDBase):
    """Least-squares regression fitted by decentralized momentum SGD."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        rng = check_random_state(self.random_state)
        feats, targets = self._partition(self._design(X), y.astype(float), rng)
        problem = QuadraticProblem(feats, [t[:, None] for t in targets])
        return self._train(problem, int(rng.randint(2**31 - 1)))

    def predict(self, X):
        return self._decision(X)


class DecentralizedSGDClassifier(ClassifierMixin, _DecentralizedSGDBase):
    """Binary L2-regularized logistic regression fitted by decentralized momentum SGD."""

    def __init__(
        self,
        method="pd_sgdm",
        n_workers=8,
        topology="ring",
        eta=0.05,
        mu=0.9,
        period=4,
        gamma=None,
        compression=None,
        compression_k=None,
        batch_size=8,
        max_iter=1000,
        fit_intercept=True,
        shuffle=True,
        record_stride=10,
        random_state=None,
        alpha=1e-3,
    ):
        super().__init__(
            method=method,
            n_workers=n_workers,
            topology=topology,
            eta=eta,
            mu=mu,
            period=period,
            gamma=gamma,
            compression=compression,
            compression_k=compression_k,
            batch_size=batch_size,
            max_iter=max_iter,
            fit_intercept=fit_intercept,
            shuffle=shuffle,
            record_stride=record_stride,
            random_state=random_state,
        )
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"only binary targets are supported, got {len(self.classes_)} classes")
        self.n_features_in_ = X.shape[1]
        rng = check_random_state(self.random_state)
        signs = np.where(y == self.classes_[1], 1.0, -1.0)
        feats, labels = self._partition(self._design(X), signs, rng)
        problem = LogisticProblem(feats, labels, reg=self.alpha, solve_reference=False)
        return self._train(problem, int(rng.randint(2**31 - 1)))

    def decision_function(self, X):
        return self._decision(X)

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
