import numpy as np
import pytest
from sklearn.base import clone

from cpga.errors import ConfigurationError
from cpga.estimator import CPGA, SourceClassifier


@pytest.fixture(scope="module")
def fitted_source(tiny_shift, tiny_domains):
    source, _ = tiny_domains
    est = SourceClassifier(feature_dim=16, hidden_dims=(16,), epochs=30,
                           seed=0)
    return est.fit(source.features, source.eval_labels())


@pytest.fixture(scope="module")
def fitted_cpga(fitted_source, tiny_domains):
    _, target = tiny_domains
    est = CPGA(source=fitted_source, stage1_epochs=60, stage2_epochs=4,
               noise_dim=12, generator_hidden=32, projector_hidden=(16,),
               contrast_dim=8, seed=0)
    return est.fit(target.features)


class TestSourceClassifier:
    def test_params_roundtrip_and_clone(self):
        est = SourceClassifier(feature_dim=8, epochs=5)
        params = est.get_params()
        assert params["feature_dim"] == 8
        twin = clone(est)
        assert twin.get_params() == params
        est.set_params(epochs=7)
        assert est.epochs == 7

    def test_predict_labels_in_classes(self, fitted_source, tiny_domains):
        source, _ = tiny_domains
        pred = fitted_source.predict(source.features)
        assert set(pred) <= set(fitted_source.classes_)
        acc = (pred == source.eval_labels()).mean()
        assert acc > 0.9

    def test_predict_proba_rows_sum_to_one(self, fitted_source,
                                           tiny_domains):
        source, _ = tiny_domains
        probs = fitted_source.predict_proba(source.features[:5])
        assert probs.shape == (5, 4)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_transform_shape(self, fitted_source, tiny_domains):
        source, _ = tiny_domains
        feats = fitted_source.transform(source.features[:3])
        assert feats.shape == (3, 16)

    def test_noncontiguous_labels_preserved(self, tiny_domains):
        source, _ = tiny_domains
        odd = np.array([10, 20, 30, 40])[source.eval_labels()]
        est = SourceClassifier(feature_dim=8, hidden_dims=(8,), epochs=5)
        est.fit(source.features, odd)
        assert np.array_equal(est.classes_, [10, 20, 30, 40])
        assert set(est.predict(source.features[:10])) <= {10, 20, 30, 40}

    def test_rejects_unfit_usage_and_bad_input(self, fitted_source,
                                               tiny_domains):
        source, _ = tiny_domains
        with pytest.raises(Exception):
            SourceClassifier().predict(source.features)
        with pytest.raises(ConfigurationError, match="features"):
            fitted_source.predict(source.features[:, :3])
        with pytest.raises(ValueError):
            fitted_source.predict(np.full((2, 8), np.nan))

    def test_rejects_single_class(self, tiny_domains):
        source, _ = tiny_domains
        est = SourceClassifier(epochs=1)
        with pytest.raises(ConfigurationError, match="2 classes"):
            est.fit(source.features, np.zeros(source.n, dtype=int))

    def test_rejects_misaligned_labels(self, tiny_domains):
        source, _ = tiny_domains
        est = SourceClassifier(epochs=1)
        with pytest.raises(ConfigurationError, match="align"):
            est.fit(source.features, np.zeros(source.n - 1, dtype=int))


class TestCPGA:
    def test_params_roundtrip_and_clone(self, fitted_source):
        est = CPGA(source=fitted_source, lam=7.0)
        assert est.get_params(deep=False)["lam"] == 7.0
        twin = clone(est)
        assert twin.lam == 7.0
        # nested estimators are cloned too, params intact, fit state dropped
        assert isinstance(twin.source, SourceClassifier)
        assert twin.source.get_params() == fitted_source.get_params()
        assert not hasattr(twin.source, "model_")

    def test_requires_fitted_source(self, tiny_domains):
        _, target = tiny_domains
        with pytest.raises(ConfigurationError, match="source"):
            CPGA().fit(target.features)
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            CPGA(source=SourceClassifier()).fit(target.features)

    def test_fit_exposes_adaptation_state(self, fitted_cpga, tiny_domains):
        _, target = tiny_domains
        assert fitted_cpga.pseudo_labels_.shape == (target.n,)
        assert fitted_cpga.confidence_weights_.shape == (target.n,)
        assert fitted_cpga.metrics_.stage_rows("stage1")
        assert fitted_cpga.metrics_.stage_rows("stage2")

    def test_predict_and_proba_agree(self, fitted_cpga, tiny_domains):
        _, target = tiny_domains
        pred = fitted_cpga.predict(target.features)
        probs = fitted_cpga.predict_proba(target.features)
        assert np.array_equal(fitted_cpga.classes_[probs.argmax(1)], pred)

    def test_adaptation_no_worse_than_source(self, fitted_source,
                                             fitted_cpga, tiny_domains):
        _, target = tiny_domains
        truth = target.eval_labels()
        src_acc = (fitted_source.predict(target.features) == truth).mean()
        ada_acc = (fitted_cpga.predict(target.features) == truth).mean()
        assert ada_acc >= src_acc - 0.05

    def test_transform_differs_from_source_features(self, fitted_source,
                                                    fitted_cpga,
                                                    tiny_domains):
        _, target = tiny_domains
        a = fitted_source.transform(target.features[:4])
        b = fitted_cpga.transform(target.features[:4])
        assert a.shape == b.shape == (4, 16)
        assert not np.allclose(a, b)

    def test_feature_count_must_match_source(self, fitted_source):
        est = CPGA(source=fitted_source, stage1_epochs=1, stage2_epochs=1)
        with pytest.raises(ConfigurationError, match="features"):
            est.fit(np.zeros((5, 3)))
