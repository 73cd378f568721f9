"""Memory banks for the adaptation stage.

The prediction bank keeps a momentum mixture of past non-parametric
predictions per target sample (the early-learning target). The feature
bank keeps the latest normalized feature of every target sample (the
neighborhood-clustering reference set).
"""

import torch

from .errors import ConfigurationError, ContractViolation
from .numerics import as_tensor, cosine_matrix


def _check_indices(indices, size):
    indices = torch.as_tensor(indices, dtype=torch.long)
    if indices.ndim != 1:
        raise ContractViolation("indices must be a 1-d batch")
    if len(torch.unique(indices)) != len(indices):
        raise ContractViolation("duplicate indices in one bank update")
    if indices.numel() and (indices.min() < 0 or indices.max() >= size):
        raise ContractViolation("bank index out of range")
    return indices


def nonparametric_predict(u, v, tau):
    """Class distribution from contrast-space similarity to prototypes.

    o_i = softmax_k(u_i . v_k / tau); both inputs must have unit rows.
    """
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")
    u, v = as_tensor(u), as_tensor(v)
    for name, x in (("u", u), ("v", v)):
        if (x.detach().norm(dim=-1) - 1.0).abs().max() > 1e-6:
            raise ContractViolation(f"{name} rows must be unit-normalized")
    return torch.softmax(u @ v.T / tau, dim=1)


class PredictionBank:
    """Per-sample momentum average of prediction rows.

    h_i <- beta * h_i + (1 - beta) * o_i on update; rows start at zero
    (init="zeros") or at the uniform distribution (init="uniform").
    """

    def __init__(self, num_samples, num_classes, beta=0.9, init="zeros"):
        if not 0.0 <= beta < 1.0:
            raise ConfigurationError("beta must be in [0, 1)")
        if init not in ("zeros", "uniform"):
            raise ConfigurationError("init must be 'zeros' or 'uniform'")
        self.beta = float(beta)
        self.rows = torch.zeros(num_samples, num_classes, dtype=torch.float64)
        if init == "uniform":
            self.rows.fill_(1.0 / num_classes)

    def get(self, indices) -> torch.Tensor:
        indices = torch.as_tensor(indices, dtype=torch.long)
        return self.rows[indices].clone()

    def update(self, indices, predictions):
        indices = _check_indices(indices, self.rows.shape[0])
        predictions = as_tensor(predictions).detach()
        if predictions.shape != (len(indices), self.rows.shape[1]):
            raise ContractViolation("prediction block shape mismatch")
        sums = predictions.sum(dim=1)
        if (sums - 1.0).abs().max() > 1e-6 or predictions.min() < 0:
            raise ContractViolation("prediction rows must be distributions")
        self.rows[indices] = (
            self.beta * self.rows[indices] + (1.0 - self.beta) * predictions
        )


class FeatureBank:
    """Latest unit-normalized feature row per target sample (zeros until
    first written)."""

    def __init__(self, num_samples, feature_dim):
        self.rows = torch.zeros(num_samples, feature_dim, dtype=torch.float64)

    def update(self, indices, features):
        indices = _check_indices(indices, self.rows.shape[0])
        features = as_tensor(features).detach()
        if features.shape != (len(indices), self.rows.shape[1]):
            raise ContractViolation("feature block shape mismatch")
        norms = features.norm(dim=1)
        if (norms - 1.0).abs().max() > 1e-6:
            raise ContractViolation("feature bank rows must be unit-normalized")
        self.rows[indices] = features

    def neighbor_distribution(self, index, tau):
        """Softmax similarity of sample ``index`` to every other bank row."""
        if tau <= 0:
            raise ConfigurationError("tau must be > 0")
        sim = cosine_matrix(self.rows[index:index + 1], self.rows)[0] / tau
        sim[index] = -torch.inf
        return torch.softmax(sim, dim=0)
