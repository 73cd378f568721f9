"""Loss terms for both training stages.

Stage 1 (generator vs frozen classifier): cross entropy on generated
prototypes plus a prototype-level InfoNCE with one positive (another draw
of the same class) and exactly one negative per other class.

Stage 2 (feature alignment): confidence-weighted contrastive alignment of
projected features to projected prototypes, an early-learning regularizer
against a momentum prediction bank, and a neighborhood-clustering entropy
term over feature-bank similarities.

All losses reduce by batch mean and clamp every log at 1e-7.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolation
from .memory import nonparametric_predict
from .models import assert_frozen
from .numerics import (
    LOG_EPS,
    as_tensor,
    clamped_log,
    cosine_matrix,
    l2_normalize_rows,
)


def _check_tau(tau):
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")


def _check_unit_rows(x, name):
    norms = x.detach().norm(dim=-1)
    if (norms - 1.0).abs().max() > 1e-6:
        raise ContractViolation(f"{name} rows must be unit-normalized")


def ce_prototype(probs, labels):
    """Mean -log p_true over the batch."""
    probs = as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = probs[torch.arange(len(labels)), labels]
    return -clamped_log(picked).mean()


def label_smoothing_ce(probs, labels, smoothing=0.1):
    """Cross entropy against the smoothed target (1-a)*one_hot + a/K."""
    probs = as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError("smoothing must be in [0, 1)")
    k = probs.shape[1]
    target = torch.full_like(probs, smoothing / k)
    target[torch.arange(len(labels)), labels] += 1.0 - smoothing
    return -(target * clamped_log(probs)).sum(dim=1).mean()


def sample_contrast_pairs(labels, rng: np.random.Generator):
    """Positive / negative indices for the prototype contrast.

    For each anchor: the positive is a different prototype of the same
    class, and there is exactly one negative per other class. Requires at
    least two prototypes of every class present in the batch.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    for c, idx in by_class.items():
        if idx.size < 2:
            raise ConfigurationError(
                f"class {c} needs at least 2 prototypes in the batch"
            )
    pos = np.empty(labels.size, dtype=np.int64)
    neg = np.empty((labels.size, classes.size - 1), dtype=np.int64)
    for i, label in enumerate(labels):
        same = by_class[label]
        same = same[same != i]
        pos[i] = rng.choice(same)
        others = [c for c in classes if c != label]
        neg[i] = [rng.choice(by_class[c]) for c in others]
    return pos, neg


def prototype_infonce(prototypes, labels, tau, pairs=None, rng=None):
    """InfoNCE over cosine similarity with per-anchor positive/negatives.

    ``pairs`` bypasses sampling (used to share draws with oracles); else
    they are drawn from ``rng``.
    """
    _check_tau(tau)
    prototypes = as_tensor(prototypes)
    if pairs is None:
        if rng is None:
            raise ConfigurationError("rng is required when pairs not given")
        pairs = sample_contrast_pairs(labels, rng)
    pos, neg = pairs
    sim = cosine_matrix(prototypes, prototypes) / tau
    n = prototypes.shape[0]
    rows = torch.arange(n)
    pos_sim = sim[rows, torch.as_tensor(pos)]            # (n,)
    neg_sim = sim[rows[:, None], torch.as_tensor(neg)]   # (n, K-1)
    logits = torch.cat([pos_sim[:, None], neg_sim], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos_sim).mean()


def weighted_contrastive(u, v, pseudo_labels, weights, tau):
    """Confidence-weighted alignment of projections to class prototypes.

    u: (n, d_c) unit rows, v: (K, d_c) unit rows ordered by class.
    loss_i = -w_i * log softmax(u_i . v / tau)[label_i], batch mean.
    """
    _check_tau(tau)
    u, v = as_tensor(u), as_tensor(v)
    _check_unit_rows(u, "u")
    _check_unit_rows(v, "v")
    labels = torch.as_tensor(pseudo_labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= v.shape[0]:
        raise ConfigurationError("pseudo label out of range for v rows")
    weights = as_tensor(weights).detach()
    sim = u @ v.T / tau
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    picked = log_prob[torch.arange(len(labels)), labels]
    return -(weights * picked).mean()


def elr(pred, bank_rows):
    """Early-learning regularizer: mean log(1 - <o, h>).

    ``bank_rows`` is treated as a constant target (detached here), so the
    gradient flows through ``pred`` only.
    """
    pred = as_tensor(pred)
    bank_rows = as_tensor(bank_rows).detach()
    inner = (pred * bank_rows).sum(dim=1)
    inner = torch.clamp(inner, max=1.0 - LOG_EPS)
    return torch.log(1.0 - inner).mean()


def neighborhood_clustering(s):
    """Mean row entropy -sum_j s_ij log s_ij of neighborhood distributions."""
    s = as_tensor(s)
    sums = s.detach().sum(dim=1)
    if (sums - 1.0).abs().max() > 1e-6 or s.detach().min() < 0:
        raise ContractViolation("each s row must be a distribution")
    return -torch.special.xlogy(s, s).sum(dim=1).mean()


def stage1_objective(generator, classifier, labels, noise, tau,
                     pairs=None, rng=None, use_contrast=True):
    """Generator training loss: CE + prototype InfoNCE (unit weights).

    Returns (total, parts). The classifier must already be frozen.
    """
    assert_frozen(classifier, "classifier")
    prototypes = generator(labels, noise)
    probs = classifier(prototypes)
    parts = {"ce": ce_prototype(probs, labels)}
    if use_contrast:
        parts["contrast"] = prototype_infonce(
            prototypes, labels, tau, pairs=pairs, rng=rng
        )
    total = sum(parts.values())
    return total, parts


@dataclass
class Stage2Batch:
    """Everything the adaptation objective needs for one minibatch.

    prototypes, bank_rows, and feature_bank carry no gradient history;
    feature_bank rows are unit-normalized features of the whole target set.
    """

    x: torch.Tensor              # (n, d_in) raw target inputs
    indices: torch.Tensor        # (n,) positions in the target set
    pseudo_labels: torch.Tensor  # (n,)
    weights: torch.Tensor        # (n,) confidence weights
    prototypes: torch.Tensor     # (K, d) one generated prototype per class
    bank_rows: torch.Tensor      # (n, K) momentum predictions for the batch
    feature_bank: torch.Tensor   # (n_t, d) normalized feature bank
    tau: float


def stage2_objective(extractor, projector, batch: Stage2Batch, lam, eta,
                     use_alignment=True, use_weights=True, use_elr=True,
                     use_nc=True):
    """Adaptation loss: alignment + lam * elr + eta * nc.

    Returns (total, parts). Disabled terms are absent from parts. The
    neighborhood term touches only the extractor; alignment and the
    regularizer also train the projector.
    """
    features = extractor(batch.x)
    parts = {}
    if use_alignment or use_elr:
        u = projector(features)
        v = projector(batch.prototypes)
    if use_alignment:
        weights = batch.weights if use_weights else torch.ones_like(
            as_tensor(batch.weights))
        parts["align"] = weighted_contrastive(
            u, v, batch.pseudo_labels, weights, batch.tau
        )
    if use_elr:
        o = nonparametric_predict(u, v, batch.tau)
        parts["elr"] = elr(o, batch.bank_rows)
    if use_nc:
        q = l2_normalize_rows(features)
        sim = q @ batch.feature_bank.detach().T / batch.tau
        n, n_bank = sim.shape
        # drop each sample's own bank column so s_i runs over l != i
        self_idx = torch.as_tensor(batch.indices, dtype=torch.long)
        keep = torch.arange(n_bank).expand(n, n_bank) != self_idx[:, None]
        sim = sim[keep].reshape(n, n_bank - 1)
        s = torch.softmax(sim, dim=1)
        parts["nc"] = neighborhood_clustering(s)
    total = torch.zeros((), dtype=torch.float64)
    if "align" in parts:
        total = total + parts["align"]
    if "elr" in parts:
        total = total + lam * parts["elr"]
    if "nc" in parts:
        total = total + eta * parts["nc"]
    return total, parts
