"""Estimator-style wrappers around the pipeline.

``SourceClassifier`` is a plain supervised fit/predict model (extractor +
weight-normalized classifier). ``CPGA`` takes a fitted SourceClassifier
and adapts it to an unlabeled target domain in fit(); predict() then runs
the adapted extractor under the original frozen classifier.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import Dataset
from .errors import ConfigurationError
from .models import ContrastiveProjector
from .numerics import torch_generator
from .training import (
    MetricsLog,
    TrainConfig,
    infer,
    predict_proba,
    pretrain_source,
    train_stage1,
    train_stage2,
)
from .validation import check_feature_matrix, check_labels


class SourceClassifier(BaseEstimator, ClassifierMixin):
    """Supervised source model: tanh MLP features, weight-normed head."""

    def __init__(self, feature_dim=64, hidden_dims=(128, 128), epochs=100,
                 learning_rate=0.01, momentum=0.9, batch_size=64,
                 smoothing=0.1, seed=0):
        self.feature_dim = feature_dim
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.smoothing = smoothing
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, pretrain_epochs=self.epochs,
            batch_size=self.batch_size, pretrain_lr=self.learning_rate,
            momentum=self.momentum, smoothing=self.smoothing,
            feature_dim=self.feature_dim,
            extractor_hidden=tuple(self.hidden_dims),
        )

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("y must contain at least 2 classes")
        dataset = Dataset(X, encoded, "source", len(self.classes_))
        self.metrics_ = MetricsLog()
        self.model_ = pretrain_source(dataset, self._config(), self.metrics_)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_ready(self, X):
        check_is_fitted(self, "model_")
        X = check_feature_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return X

    def transform(self, X):
        """Extracted feature matrix, (n, feature_dim)."""
        X = self._check_ready(X)
        with torch.no_grad():
            return self.model_.extractor(X).numpy()

    def predict_proba(self, X):
        X = self._check_ready(X)
        return predict_proba(self.model_.extractor, self.model_.classifier, X)

    def predict(self, X):
        X = self._check_ready(X)
        idx = infer(self.model_.extractor, self.model_.classifier, X)
        return self.classes_[idx]


class CPGA(BaseEstimator, ClassifierMixin):
    """Source-free adaptation of a fitted SourceClassifier.

    fit(X) sees only unlabeled target features; y is accepted and ignored
    so the estimator plugs into standard tooling.
    """

    def __init__(self, source=None, stage1_epochs=2000, stage2_epochs=300,
                 learning_rate=0.005, stage1_lr=0.5, momentum=0.9,
                 batch_size=64, tau=0.07, stage1_tau=0.5, beta=0.9, lam=5.0,
                 eta=0.05, noise_dim=100, generator_hidden=256,
                 projector_hidden=(64, 32), contrast_dim=16,
                 bank_init="zeros", seed=0):
        self.source = source
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.learning_rate = learning_rate
        self.stage1_lr = stage1_lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.tau = tau
        self.stage1_tau = stage1_tau
        self.beta = beta
        self.lam = lam
        self.eta = eta
        self.noise_dim = noise_dim
        self.generator_hidden = generator_hidden
        self.projector_hidden = projector_hidden
        self.contrast_dim = contrast_dim
        self.bank_init = bank_init
        self.seed = seed

    def _config(self, feature_dim, extractor_hidden) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, stage1_lr=self.stage1_lr,
            momentum=self.momentum, tau=self.tau, stage1_tau=self.stage1_tau,
            beta=self.beta,
            lam=self.lam, eta=self.eta, feature_dim=feature_dim,
            extractor_hidden=extractor_hidden, noise_dim=self.noise_dim,
            generator_hidden=self.generator_hidden,
            projector_hidden=tuple(self.projector_hidden),
            contrast_dim=self.contrast_dim, bank_init=self.bank_init,
        )

    def fit(self, X, y=None):
        if self.source is None:
            raise ConfigurationError("source must be a fitted SourceClassifier")
        check_is_fitted(self.source, "model_")
        X = check_feature_matrix(X)
        if X.shape[1] != self.source.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, source model expects "
                f"{self.source.n_features_in_}"
            )
        model = self.source.model_
        k = model.classifier.num_classes
        target = Dataset(X, np.zeros(X.shape[0], dtype=np.int64),
                         "target", k)
        cfg = self._config(model.classifier.feature_dim,
                           tuple(self.source.hidden_dims))
        self.metrics_ = MetricsLog()
        self.generator_ = train_stage1(model.classifier, cfg, self.metrics_)
        projector = ContrastiveProjector(
            cfg.feature_dim, cfg.projector_hidden, cfg.contrast_dim,
            torch_generator(cfg.seed, 7),
        )
        self.extractor_, self.projector_, diagnostics = train_stage2(
            model.extractor, projector, self.generator_, model.classifier,
            target, cfg, self.metrics_,
        )
        self.pseudo_labels_ = diagnostics.pseudo_labels
        self.confidence_weights_ = diagnostics.weights
        self.classes_ = self.source.classes_
        self.n_features_in_ = X.shape[1]
        return self

    def _check_ready(self, X):
        check_is_fitted(self, "extractor_")
        X = check_feature_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return X

    def transform(self, X):
        """Adapted feature matrix, (n, feature_dim)."""
        X = self._check_ready(X)
        with torch.no_grad():
            return self.extractor_(X).numpy()

    def predict_proba(self, X):
        X = self._check_ready(X)
        return predict_proba(self.extractor_, self.source.model_.classifier, X)

    def predict(self, X):
        X = self._check_ready(X)
        idx = infer(self.extractor_, self.source.model_.classifier, X)
        return self.classes_[idx]
