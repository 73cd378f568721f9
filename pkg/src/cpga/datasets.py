"""Synthetic domain-shift benchmarks.

Two families of paired (source, target) datasets:

* Gaussian clusters: one cluster per class around fixed means, the target
  domain applies rotation / translation / scale to the cluster means and
  re-draws the noise.
* Two moons: the classic interleaved half circles, K=2 only, with the same
  transform applied to the target domain.

Target labels are generated (the benchmark knows them) but are only
reachable through ``eval_labels()``; adaptation code must never call it.
"""

import re
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_moons

from .errors import ConfigurationError
from .numerics import numpy_generator

_HEADER_RE = re.compile(
    r"^cpga-dataset v1 K=(\d+) d=(\d+) domain=(source|target)$"
)

# substream tags for the per-domain noise draws
_SRC_STREAM = 101
_TGT_STREAM = 102


@dataclass(frozen=True)
class ShiftConfig:
    """Benchmark geometry and the source->target transform.

    The transform maps a clean point x to ``scale * rotate(x) + translation``.
    Rotation acts as independent plane rotations in consecutive coordinate
    pairs (0,1), (2,3), ... so it is well defined in any dimension.
    """

    num_classes: int = 8
    input_dim: int = 16
    samples_per_class: int = 100
    rotation_angle: float = 0.0
    translation: tuple = ()
    scale: float = 1.0
    noise_std: float = 0.3
    class_separation: float = 3.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ConfigurationError("input_dim must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.scale <= 0:
            raise ConfigurationError("scale must be > 0")
        if self.class_separation <= 0:
            raise ConfigurationError("class_separation must be > 0")
        if len(self.translation_vector()) not in (0, self.input_dim):
            raise ConfigurationError(
                "translation must be empty, scalar, or length input_dim"
            )

    def translation_vector(self) -> np.ndarray:
        t = self.translation
        if isinstance(t, (int, float)):
            return np.full(self.input_dim, float(t))
        t = np.asarray(t, dtype=np.float64)
        if t.size == 0:
            return np.zeros(self.input_dim)
        return t

    def is_identity(self) -> bool:
        return (
            self.rotation_angle == 0.0
            and self.scale == 1.0
            and not self.translation_vector().any()
        )


class Dataset:
    """Feature matrix plus labels, tagged with the domain it came from.

    ``labels`` is usable only for the source domain; target labels exist
    solely for evaluation and must be read through ``eval_labels()``.
    """

    def __init__(self, features, labels, domain: str, num_classes: int):
        if domain not in ("source", "target"):
            raise ConfigurationError("domain must be 'source' or 'target'")
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ConfigurationError("features must be a 2-d matrix")
        if labels.shape != (features.shape[0],):
            raise ConfigurationError("labels must align with feature rows")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ConfigurationError("labels out of range for num_classes")
        self.features = features
        self.domain = domain
        self.num_classes = int(num_classes)
        self._labels = labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def labels(self) -> np.ndarray:
        """Training labels. Forbidden for the target domain."""
        if self.domain == "target":
            raise RuntimeError(
                "target labels are evaluation-only; use eval_labels()"
            )
        return self._labels

    def eval_labels(self) -> np.ndarray:
        """Ground-truth labels for metrics only."""
        return self._labels


def _class_means(cfg: ShiftConfig) -> np.ndarray:
    """One mean per class, separated by cfg.class_separation.

    Classes sit on circles of four per coordinate plane when the dimension
    allows, so a plane rotation drags every cluster toward its in-plane
    neighbour by the same amount while identity remains the nearest-mean
    assignment for rotations below pi/4. Falls back to a single circle in
    the first two coordinates when the dimension is tight.
    """
    k, d = cfg.num_classes, cfg.input_dim
    means = np.zeros((k, d))
    n_planes = -(-k // 4)
    if d >= 2 * n_planes:
        for i in range(k):
            plane, slot = divmod(i, 4)
            angle = slot * np.pi / 2
            means[i, 2 * plane] = cfg.class_separation * np.cos(angle)
            means[i, 2 * plane + 1] = cfg.class_separation * np.sin(angle)
    else:
        angles = 2 * np.pi * np.arange(k) / k
        means[:, 0] = cfg.class_separation * np.cos(angles)
        means[:, 1] = cfg.class_separation * np.sin(angles)
    return means


def rotation_matrix(dim: int, angle: float) -> np.ndarray:
    """Plane rotation by ``angle`` in each coordinate pair (0,1), (2,3), ..."""
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        rot[i, i] = c
        rot[i, i + 1] = -s
        rot[i + 1, i] = s
        rot[i + 1, i + 1] = c
    return rot


def apply_shift(points: np.ndarray, cfg: ShiftConfig) -> np.ndarray:
    rot = rotation_matrix(cfg.input_dim, cfg.rotation_angle)
    return cfg.scale * (points @ rot.T) + cfg.translation_vector()


def make_gaussian_domains(cfg: ShiftConfig):
    """Paired Gaussian-cluster domains. Returns (source, target)."""
    cfg.validate()
    means = _class_means(cfg)
    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)

    rng_s = numpy_generator(cfg.seed, _SRC_STREAM)
    noise_s = rng_s.standard_normal((labels.size, cfg.input_dim))
    source = Dataset(
        means[labels] + cfg.noise_std * noise_s,
        labels, "source", cfg.num_classes,
    )

    rng_t = numpy_generator(cfg.seed, _TGT_STREAM)
    noise_t = rng_t.standard_normal((labels.size, cfg.input_dim))
    target = Dataset(
        apply_shift(means, cfg)[labels] + cfg.noise_std * noise_t,
        labels, "target", cfg.num_classes,
    )
    return source, target


def make_moons_domains(cfg: ShiftConfig):
    """Paired two-moons domains. Requires num_classes == 2."""
    cfg.validate()
    if cfg.num_classes != 2:
        raise ConfigurationError("num_classes must be 2 for moons")
    n = 2 * cfg.samples_per_class

    def draw(stream):
        rng = numpy_generator(cfg.seed, stream)
        xy, labels = make_moons(
            n_samples=(cfg.samples_per_class, cfg.samples_per_class),
            noise=cfg.noise_std,
            random_state=np.random.RandomState(rng.integers(2**31)),
        )
        feats = np.zeros((n, cfg.input_dim))
        feats[:, :2] = cfg.class_separation * xy
        if cfg.input_dim > 2:
            feats[:, 2:] = cfg.noise_std * rng.standard_normal(
                (n, cfg.input_dim - 2)
            )
        return feats, labels

    feats_s, labels_s = draw(_SRC_STREAM)
    feats_t, labels_t = draw(_TGT_STREAM)
    source = Dataset(feats_s, labels_s, "source", cfg.num_classes)
    target = Dataset(apply_shift(feats_t, cfg), labels_t, "target", cfg.num_classes)
    return source, target


def inject_label_noise(labels: np.ndarray, rate: float, seed: int) -> np.ndarray:
    """Corrupt exactly round(rate * n) labels to a different class each.

    Returns a new array; the input is untouched.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError("rate must be in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    n_flip = int(round(rate * labels.size))
    if n_flip == 0:
        return out
    num_classes = int(labels.max()) + 1
    if num_classes < 2:
        raise ConfigurationError("rate > 0 needs at least 2 classes present")
    rng = numpy_generator(seed, 103)
    idx = rng.choice(labels.size, size=n_flip, replace=False)
    # shift by a nonzero offset mod K so the new label always differs
    offsets = rng.integers(1, num_classes, size=n_flip)
    out[idx] = (out[idx] + offsets) % num_classes
    return out


def save_dataset(dataset: Dataset, path):
    """Text format: header line, then one 'label,f1,...,fd' row per sample.

    Floats are written with 17 significant digits so load_dataset
    round-trips exactly.
    """
    with open(path, "w") as fh:
        fh.write(
            f"cpga-dataset v1 K={dataset.num_classes} "
            f"d={dataset.input_dim} domain={dataset.domain}\n"
        )
        for label, row in zip(dataset._labels, dataset.features):
            feats = ",".join(f"{v:.17g}" for v in row)
            fh.write(f"{label},{feats}\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        m = _HEADER_RE.match(header)
        if m is None:
            raise ValueError(f"{path}: line 1: bad header {header!r}")
        k, d, domain = int(m.group(1)), int(m.group(2)), m.group(3)
        labels, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 1:
                raise ValueError(
                    f"{path}: line {lineno}: expected {d + 1} fields, "
                    f"got {len(parts)}"
                )
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return Dataset(np.array(rows).reshape(len(rows), d), labels, domain, k)
