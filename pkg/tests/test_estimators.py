import doctest

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_classification, make_regression
from sklearn.model_selection import GridSearchCV
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

import pdsgdm.estimators
from pdsgdm import DecentralizedSGDClassifier, DecentralizedSGDRegressor


def test_module_doctest():
    result = doctest.testmod(pdsgdm.estimators)
    assert result.attempted > 0 and result.failed == 0


def test_clone_roundtrip():
    est = DecentralizedSGDRegressor(n_workers=4, eta=0.02, compression="scaled_sign", method="cpd_sgdm")
    c = clone(est)
    assert c.get_params() == est.get_params()
    c.set_params(period=8)
    assert c.period == 8 and est.period == 4


def test_regressor_fits_linear_model():
    X, y, coef = make_regression(n_samples=400, n_features=5, noise=0.1, coef=True, random_state=0)
    est = DecentralizedSGDRegressor(n_workers=4, eta=0.02, max_iter=3000, random_state=0)
    est.fit(X / 10, y / 100)
    assert est.score(X / 10, y / 100) > 0.99
    assert est.n_iter_ == 3000 and est.comm_bits_ > 0
    assert est.coef_.shape == (5,)


def test_classifier_labels_and_proba():
    X, y = make_classification(n_samples=300, n_features=4, random_state=1)
    labels = np.where(y == 1, "yes", "no")
    clf = DecentralizedSGDClassifier(n_workers=2, max_iter=400, random_state=0).fit(X, labels)
    assert set(clf.classes_) == {"no", "yes"}
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(X)) <= {"no", "yes"}


def test_classifier_rejects_multiclass():
    X = np.random.default_rng(0).standard_normal((30, 2))
    with pytest.raises(ValueError):
        DecentralizedSGDClassifier().fit(X, np.arange(30) % 3)


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        DecentralizedSGDRegressor().predict(np.zeros((2, 3)))


def test_pipeline_and_grid_search():
    X, y = make_classification(n_samples=200, n_features=4, random_state=2)
    pipe = make_pipeline(StandardScaler(), DecentralizedSGDClassifier(n_workers=2, max_iter=200, random_state=0))
    search = GridSearchCV(pipe, {"decentralizedsgdclassifier__period": [1, 8]}, cv=2)
    search.fit(X, y)
    assert search.best_score_ > 0.7


def test_deterministic_with_random_state():
    X, y = make_classification(n_samples=120, n_features=4, random_state=3)
    a = DecentralizedSGDClassifier(max_iter=100, random_state=7, n_workers=2).fit(X, y)
    b = DecentralizedSGDClassifier(max_iter=100, random_state=7, n_workers=2).fit(X, y)
    np.testing.assert_array_equal(a.coef_, b.coef_)
