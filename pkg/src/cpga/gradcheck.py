"""Finite-difference verification of autograd gradients.

Central differences along random unit directions, compared against the
analytic directional derivatives. The reported number is the relative
error between the two directional-derivative vectors, so individual
near-zero components cannot blow it up.
"""

import torch
from torch import nn

from .numerics import torch_generator


def leaves_of(*sources):
    """Trainable leaf tensors of modules (or raw tensors passed through)."""
    leaves = []
    for src in sources:
        if isinstance(src, nn.Module):
            leaves.extend(p for p in src.parameters() if p.requires_grad)
        else:
            leaves.append(src)
    return leaves


def analytic_gradient(loss_fn, leaves):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    return [
        torch.zeros_like(leaf) if g is None else g
        for leaf, g in zip(leaves, grads)
    ]


def _random_direction(leaves, generator):
    parts = [
        torch.randn(leaf.shape, dtype=torch.float64, generator=generator)
        for leaf in leaves
    ]
    norm = torch.sqrt(sum(p.pow(2).sum() for p in parts))
    return [p / norm for p in parts]


def gradient_check(loss_fn, leaves, n_directions=8, step=1e-4, seed=0):
    """Relative error between FD and analytic directional derivatives.

    loss_fn is a zero-argument closure that rebuilds the loss from the
    current leaf values; leaves are perturbed in place and restored.
    """
    gen = torch_generator(seed, 7001)
    grads = analytic_gradient(loss_fn, leaves)
    snapshots = [leaf.detach().clone() for leaf in leaves]

    def evaluate():
        with torch.no_grad():
            return float(loss_fn())

    fd, an = [], []
    for _ in range(n_directions):
        direction = _random_direction(leaves, gen)
        an.append(float(sum((g * d).sum() for g, d in zip(grads, direction))))
        with torch.no_grad():
            for leaf, d in zip(leaves, direction):
                leaf.add_(step * d)
        plus = evaluate()
        with torch.no_grad():
            for leaf, snap, d in zip(leaves, snapshots, direction):
                leaf.copy_(snap)
                leaf.sub_(step * d)
        minus = evaluate()
        with torch.no_grad():
            for leaf, snap in zip(leaves, snapshots):
                leaf.copy_(snap)
        fd.append((plus - minus) / (2.0 * step))

    fd = torch.tensor(fd, dtype=torch.float64)
    an = torch.tensor(an, dtype=torch.float64)
    denom = max(float(fd.norm()), float(an.norm()), 1e-12)
    return float((fd - an).norm()) / denom
