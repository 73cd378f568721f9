"""Centroid-based pseudo-labels and confidence weights for target data.

Centroids start as probability-weighted feature means, then each epoch are
refreshed as plain means over the current assignment. Assignment and
confidence both use cosine similarity; ties go to the lowest class index.
No gradients flow through any of this.
"""

import torch

from .errors import ConfigurationError, ContractViolation
from .numerics import as_tensor, cosine_matrix

# a class whose total probability mass falls below this is degenerate
MASS_EPS = 1e-12


@torch.no_grad()
def init_centroids(features, probs, fallback=None):
    """Probability-weighted class centroids c_k = sum_i p_ik q_i / sum_i p_ik.

    A class with no probability mass takes its row from ``fallback`` (one
    row per class) or raises when no fallback is given.
    """
    features = as_tensor(features)
    probs = as_tensor(probs)
    if probs.shape[0] != features.shape[0]:
        raise ContractViolation("probs rows must align with features")
    mass = probs.sum(dim=0)                      # (K,)
    centroids = probs.T @ features               # (K, d)
    degenerate = mass < MASS_EPS
    if degenerate.any():
        if fallback is None:
            bad = torch.nonzero(degenerate).flatten().tolist()
            raise ContractViolation(
                f"no probability mass for classes {bad} and no fallback rows"
            )
        fallback = as_tensor(fallback)
        if fallback.shape != (probs.shape[1], features.shape[1]):
            raise ContractViolation("fallback must be one row per class")
        centroids[degenerate] = fallback[degenerate]
        mass = torch.where(degenerate, torch.ones_like(mass), mass)
    return centroids / mass[:, None]


@torch.no_grad()
def assign_labels(features, centroids):
    """Nearest centroid by cosine similarity; ties break to lowest index."""
    sim = cosine_matrix(as_tensor(features), as_tensor(centroids))
    return torch.argmax(sim, dim=1)


@torch.no_grad()
def refresh_centroids(features, labels, previous):
    """Plain per-class feature means; empty classes keep the previous row."""
    features = as_tensor(features)
    labels = torch.as_tensor(labels, dtype=torch.long)
    previous = as_tensor(previous)
    k = previous.shape[0]
    centroids = previous.clone()
    for c in range(k):
        mask = labels == c
        if mask.any():
            centroids[c] = features[mask].mean(dim=0)
    return centroids


@torch.no_grad()
def confidence(features, centroids, labels, tau):
    """w_i = softmax_k(cos(q_i, c_k) / tau) evaluated at the assigned class."""
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")
    labels = torch.as_tensor(labels, dtype=torch.long)
    sim = cosine_matrix(as_tensor(features), as_tensor(centroids)) / tau
    probs = torch.softmax(sim, dim=1)
    return probs[torch.arange(len(labels)), labels]
