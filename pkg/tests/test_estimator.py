import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from econvnext.estimator import EConvNeXtClassifier
from econvnext.train import make_blobs


def test_get_params_and_clone():
    est = EConvNeXtClassifier(epochs=3, width=0.25)
    params = est.get_params()
    assert params["epochs"] == 3 and params["width"] == 0.25
    assert clone(est).get_params() == params


def test_fit_predict_with_string_labels():
    X, y = make_blobs(32, 2, 32, seed=1)
    labels = np.array(["cat", "dog"])[y]
    est = EConvNeXtClassifier(epochs=2, batch_size=16).fit(X, labels)
    assert set(est.classes_) == {"cat", "dog"}
    pred = est.predict(X[:5])
    assert pred.shape == (5,) and set(pred) <= {"cat", "dog"}
    proba = est.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1)
    assert len(est.history_) == 2
    assert 0 <= est.score(X, labels) <= 1


def test_unfitted_and_bad_input():
    with pytest.raises(NotFittedError):
        EConvNeXtClassifier().predict(np.zeros((1, 3, 32, 32)))
    with pytest.raises(ValueError):
        EConvNeXtClassifier(epochs=1).fit(np.zeros((4, 1, 32, 32)), [0, 1, 0, 1])
