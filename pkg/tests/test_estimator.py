from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from metapac.data import SyntheticEnvSpec, gen_synthetic
from metapac.estimator import PacBayesMetaLearner


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(SyntheticEnvSpec(dim=3, n=3, m=20, n_test_tasks=3, m_test=20, seed=1))[0]


class TestEstimator:
    def test_params_round_trip(self):
        est = PacBayesMetaLearner(epochs=7, bound="mlap")
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert twin.get_params()["epochs"] == 7

    def test_fit_dataset(self, data):
        est = PacBayesMetaLearner(epochs=5).fit(data)
        assert est.n_features_in_ == 3 and len(est.history_) == 5
        assert est.prior_weights_.shape == (4, 1)
        assert est.predict(data.tasks[0].x_test).shape == (20,)

    def test_fit_pairs_matches_dataset(self, data):
        pairs = [(t.x_train, t.y_train[:, 0]) for t in data.tasks]
        a = PacBayesMetaLearner(epochs=3).fit(pairs)
        b = PacBayesMetaLearner(epochs=3).fit(data)
        np.testing.assert_array_equal(a.prior_weights_, b.prior_weights_)

    def test_score(self, data):
        est = PacBayesMetaLearner(epochs=5).fit(data)
        s = est.score(data)
        assert -1 <= s <= 0
        assert s == est.score(data.test_tasks)

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            PacBayesMetaLearner().predict(data.tasks[0].x_test)
