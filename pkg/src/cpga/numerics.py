"""Small numeric helpers used by several modules.

Everything here is float64 and deterministic. Cosine similarity is the
workhorse metric of the whole method, so it lives in one place with one
zero-row convention.
"""

import numpy as np
import torch

# epsilon added to row norms so zero rows normalize to a tiny vector
# instead of nan
NORM_EPS = 1e-12

# clamp floor for every log in the objective
LOG_EPS = 1e-7


def as_tensor(x) -> torch.Tensor:
    """Convert array-like to a float64 tensor (no copy when already one)."""
    if isinstance(x, torch.Tensor):
        return x.double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def l2_normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Rows scaled to unit norm; zero rows are perturbed, not nan."""
    norms = x.norm(dim=-1, keepdim=True)
    return x / (norms + NORM_EPS)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity, shape (len(a), len(b))."""
    return l2_normalize_rows(a) @ l2_normalize_rows(b).T


def clamped_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=LOG_EPS))


def prototype_distances(vectors: torch.Tensor, labels: torch.Tensor):
    """Mean pairwise cosine distance (1 - cos) within and across classes.

    Returns (inter, intra). intra is nan when no class has two vectors;
    inter is nan when only one class is present.
    """
    vectors = as_tensor(vectors)
    labels = torch.as_tensor(labels, dtype=torch.long)
    dist = 1.0 - cosine_matrix(vectors, vectors)
    same = labels[:, None] == labels[None, :]
    off_diag = ~torch.eye(len(labels), dtype=torch.bool)
    intra_mask = same & off_diag
    inter_mask = ~same
    intra = dist[intra_mask].mean().item() if intra_mask.any() else float("nan")
    inter = dist[inter_mask].mean().item() if inter_mask.any() else float("nan")
    return inter, intra


def substream_seed(seed: int, *tags: int) -> int:
    """Derive an independent child seed from (seed, tags)."""
    ss = np.random.SeedSequence([int(seed)] + [int(t) for t in tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int, *tags: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, *tags))
    return g


def numpy_generator(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, *tags))
