import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import load_digits
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import train_test_split

from pcnet.estimators import PCNClassifier
from pcnet.exceptions import DimensionError
from pcnet.nn.layers import PcaDense


@pytest.fixture(scope="module")
def digits():
    x, y = load_digits(return_X_y=True)
    return train_test_split(x / 16.0, y, test_size=0.25, random_state=0)


def test_baseline_learns_digits(digits):
    x_tr, x_te, y_tr, y_te = digits
    clf = PCNClassifier(epochs=15, lr=1e-2, batch_size=32, arch_kwargs={"hidden": 32}).fit(x_tr, y_tr)
    assert clf.score(x_te, y_te) > 0.9
    assert clf.n_features_in_ == 64
    np.testing.assert_allclose(clf.predict_proba(x_te).sum(axis=1), 1, rtol=1e-5)


def test_transformed_classifier_is_smaller(digits):
    x_tr, x_te, y_tr, y_te = digits
    plan = {"transform_epoch": 5, "post_epochs": 10, "layers": {"fc1": [12, None], "output": [8, None]}}
    clf = PCNClassifier(epochs=None, plan=plan, lr=1e-2, batch_size=32, arch_kwargs={"hidden": 32})
    clf.fit(x_tr, y_tr)
    assert any(isinstance(layer, PcaDense) for layer in clf.network_.layers)
    assert clf.param_count().trainable == 12 * 32 + 32 + 8 * 10 + 10
    assert clf.score(x_te, y_te) > 0.85


def test_string_labels_roundtrip(digits):
    x_tr, _, y_tr, _ = digits
    names = np.array(["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"])
    clf = PCNClassifier(epochs=2, arch_kwargs={"hidden": 8}).fit(x_tr, names[y_tr])
    assert set(clf.predict(x_tr[:20])) <= set(names)


def test_sklearn_params_and_clone():
    clf = PCNClassifier(lr=0.05, arch_kwargs={"hidden": 4})
    params = clf.get_params()
    assert params["lr"] == 0.05 and params["arch"] == "mlp"
    copy = clone(clf).set_params(seed=3)
    assert copy.seed == 3 and clf.seed == 0


def test_unfitted_and_shape_errors(digits):
    x_tr, _, y_tr, _ = digits
    with pytest.raises(NotFittedError):
        PCNClassifier().predict(x_tr)
    clf = PCNClassifier(epochs=1, arch_kwargs={"hidden": 4}).fit(x_tr, y_tr)
    with pytest.raises(DimensionError):
        clf.predict(x_tr[:, :10])


def test_same_seed_same_predictions(digits):
    x_tr, x_te, y_tr, _ = digits
    a = PCNClassifier(epochs=2, arch_kwargs={"hidden": 8}).fit(x_tr, y_tr).predict_proba(x_te)
    b = PCNClassifier(epochs=2, arch_kwargs={"hidden": 8}).fit(x_tr, y_tr).predict_proba(x_te)
    assert a.tobytes() == b.tobytes()
