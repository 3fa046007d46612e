import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from unitok.data import gen_synthetic
from unitok.estimator import ItemTokenizer

SMALL = dict(hidden=(16,), latent_dim=4, n_levels=2, codebook_size=8, warmup_epochs=2, epochs=2, batch_size=32,
             min_per_domain=4)


@pytest.fixture(scope="module")
def data():
    ds = gen_synthetic(3, 30, 10, seed=6)
    labels = np.array([10, 20, 30])[ds.domains]
    return ds.X, labels


def test_get_params_round_trip():
    est = ItemTokenizer(**SMALL, random_state=3)
    params = est.get_params()
    assert params["random_state"] == 3 and params["epochs"] == 2
    assert clone(est).get_params() == params


def test_fit_transform_shapes(data):
    X, y = data
    est = ItemTokenizer(**SMALL).fit(X, y)
    tokens = est.transform(X)
    assert tokens.shape == (90, 3)
    assert tokens.dtype.kind == "i"
    np.testing.assert_array_equal(est.domains_, [10, 20, 30])
    np.testing.assert_array_equal(est.fit_transform(X, y), tokens)


def test_gates_rows_bounded(data):
    X, y = data
    est = ItemTokenizer(**SMALL).fit(X, y)
    g = est.gates(X)
    assert g.shape == (90, 3)
    assert np.all(g.sum(axis=1) <= 1.0 + 1e-12)


def test_single_codebook_variant(data):
    X, y = data
    est = ItemTokenizer(**SMALL, single_codebook=True).fit(X, y)
    assert est.transform(X).shape == (90, 2)
    assert est.gates(X) is None


def test_evaluate_uses_original_labels(data):
    X, y = data
    rep = ItemTokenizer(**SMALL).fit(X, y).evaluate(X, y)
    assert set(rep.per_domain) == {"10", "20", "30"}


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ItemTokenizer().transform(np.zeros((2, 3)))


def test_validation(data):
    X, y = data
    est = ItemTokenizer(**SMALL)
    with pytest.raises(ValueError):
        est.fit(X, y[:-1])
    with pytest.raises(ValueError):
        est.fit(X, y.astype(float) + 0.5)
    X_bad = X.copy()
    X_bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(X_bad, y)
    est.fit(X, y)
    with pytest.raises(ValueError):
        est.transform(X[:, :5])


def test_same_seed_same_tokens(data):
    X, y = data
    a = ItemTokenizer(**SMALL, random_state=5).fit(X, y).transform(X)
    b = ItemTokenizer(**SMALL, random_state=5).fit(X, y).transform(X)
    np.testing.assert_array_equal(a, b)
