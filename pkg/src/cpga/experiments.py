"""Study drivers: ablation ladder, loss-weight sweeps, pseudo-label noise
robustness, and plot emission. Everything funnels through
``training.run_pipeline`` so results stay reproducible per (config, seed).
"""

import csv
import io
import os
from dataclasses import dataclass, replace

import numpy as np
import torch

from .datasets import ShiftConfig, make_gaussian_domains
from .errors import ConfigurationError, DivergenceError
from .numerics import numpy_generator, prototype_distances, torch_generator
from .training import MetricsLog, TrainConfig, run_pipeline


def default_benchmark(seed=0) -> ShiftConfig:
    """Rotated-Gaussians benchmark used by the studies below.

    The rotation drags every cluster 0.5 rad toward its in-plane
    neighbour; the noise level is set so the source model loses real
    accuracy on the target while nearest-mean assignment stays intact.
    """
    return ShiftConfig(
        num_classes=8, input_dim=16, samples_per_class=100,
        rotation_angle=0.5, noise_std=0.8, class_separation=2.2, seed=seed,
    )


@dataclass(frozen=True)
class AblationSpec:
    """One arm of the ablation ladder: which stage-2 terms are active."""

    name: str
    use_alignment: bool = True
    use_weights: bool = True
    use_elr: bool = True
    use_nc: bool = True
    stage1_contrast: bool = True
    seeds: tuple = (0, 1, 2, 3, 4)

    def validate(self):
        if not self.name:
            raise ConfigurationError("name must be non-empty")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.use_elr and not self.use_alignment:
            raise ConfigurationError(
                "use_elr requires use_alignment (the regularizer shares "
                "the projected prototypes)"
            )
        if self.use_weights and not self.use_alignment:
            raise ConfigurationError(
                "use_weights only applies when use_alignment is on"
            )


def default_ladder(seeds=(0, 1, 2, 3, 4)):
    """The standard five-arm ladder, weakest to strongest."""
    return [
        AblationSpec("source-only", use_alignment=False, use_weights=False,
                     use_elr=False, use_nc=False, seeds=seeds),
        AblationSpec("contrastive", use_weights=False, use_elr=False,
                     use_nc=False, seeds=seeds),
        AblationSpec("weighted", use_elr=False, use_nc=False, seeds=seeds),
        AblationSpec("weighted+elr", use_nc=False, seeds=seeds),
        AblationSpec("full", seeds=seeds),
    ]


@dataclass
class AblationResult:
    name: str
    seeds: tuple
    accuracies: list        # adapted accuracy per seed, nan = diverged
    source_only: list       # source-only accuracy per seed
    proto_inter: list
    proto_intra: list
    failures: tuple = ()    # seeds whose runs diverged

    @property
    def mean_accuracy(self):
        return float(np.nanmean(self.accuracies))

    @property
    def std_accuracy(self):
        return float(np.nanstd(self.accuracies))


def _run_arm(spec: AblationSpec, shift: ShiftConfig, train: TrainConfig,
             seed: int, label_noise_rate=0.0, progress=False):
    source, target = make_gaussian_domains(replace(shift, seed=seed))
    result = run_pipeline(
        source, target, replace(train, seed=seed),
        use_alignment=spec.use_alignment, use_weights=spec.use_weights,
        use_elr=spec.use_elr, use_nc=spec.use_nc,
        stage1_contrast=spec.stage1_contrast,
        label_noise_rate=label_noise_rate, progress=progress,
    )
    labels = torch.arange(result.generator.num_classes).repeat_interleave(16)
    with torch.no_grad():
        protos = result.generator(
            labels,
            result.generator.sample_noise(
                len(labels), torch_generator(seed, 9901)),
        )
    inter, intra = prototype_distances(protos, labels)
    return result, inter, intra


def run_ablation(specs, shift: ShiftConfig = None,
                 train: TrainConfig = None, progress=False):
    """Run each spec over its seeds. Deterministic per (spec, seed)."""
    shift = shift or default_benchmark()
    train = train or TrainConfig()
    out = []
    for spec in specs:
        spec.validate()
        accs, src_only, inters, intras = [], [], [], []
        failed = []
        for seed in spec.seeds:
            try:
                result, inter, intra = _run_arm(spec, shift, train, seed,
                                                progress=progress)
            except DivergenceError:
                # a blown-up run is a data point, not a reason to lose
                # the rest of the study
                failed.append(seed)
                accs.append(float("nan"))
                src_only.append(float("nan"))
                inters.append(float("nan"))
                intras.append(float("nan"))
                continue
            accs.append(result.adapted_accuracy)
            src_only.append(result.source_only_accuracy)
            inters.append(inter)
            intras.append(intra)
        out.append(AblationResult(spec.name, tuple(spec.seeds), accs,
                                  src_only, inters, intras, tuple(failed)))
    return out


def ablation_csv(results, path=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "seed", "adapted_accuracy",
                     "source_only_accuracy", "proto_inter", "proto_intra"])
    for res in results:
        for seed, acc, src, inter, intra in zip(
                res.seeds, res.accuracies, res.source_only,
                res.proto_inter, res.proto_intra):
            writer.writerow([res.name, seed, repr(acc), repr(src),
                             repr(inter), repr(intra)])
        writer.writerow([res.name, "mean", repr(res.mean_accuracy),
                         repr(float(np.mean(res.source_only))),
                         repr(float(np.mean(res.proto_inter))),
                         repr(float(np.mean(res.proto_intra)))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


@dataclass
class SensitivityResult:
    lambdas: list
    etas: list
    accuracy: np.ndarray     # (len(lambdas), len(etas))

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lambda"] + [f"eta={e:g}" for e in self.etas])
        for lam, row in zip(self.lambdas, self.accuracy):
            writer.writerow([f"{lam:g}"] + [repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def run_sensitivity(lambdas, etas, shift: ShiftConfig = None,
                    train: TrainConfig = None, progress=False):
    """Full (lambda, eta) grid, one pipeline run per cell."""
    if not lambdas or not etas:
        raise ConfigurationError("lambdas and etas must be non-empty")
    shift = shift or default_benchmark()
    train = train or TrainConfig()
    source, target = make_gaussian_domains(shift)
    acc = np.zeros((len(lambdas), len(etas)))
    for i, lam in enumerate(lambdas):
        for j, eta in enumerate(etas):
            cfg = replace(train, lam=float(lam), eta=float(eta))
            try:
                result = run_pipeline(source, target, cfg,
                                      progress=progress)
            except DivergenceError:
                acc[i, j] = np.nan
                continue
            acc[i, j] = result.adapted_accuracy
    return SensitivityResult(list(lambdas), list(etas), acc)


@dataclass
class NoiseResult:
    rates: list
    seeds: tuple
    weighted: np.ndarray     # (len(rates), len(seeds))
    unweighted: np.ndarray

    def mean_gap(self, rate_index) -> float:
        return float(self.weighted[rate_index].mean()
                     - self.unweighted[rate_index].mean())

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rate", "seed", "weighted_accuracy",
                         "unweighted_accuracy"])
        for i, rate in enumerate(self.rates):
            for j, seed in enumerate(self.seeds):
                writer.writerow([f"{rate:g}", seed,
                                 repr(float(self.weighted[i, j])),
                                 repr(float(self.unweighted[i, j]))])
            writer.writerow([f"{rate:g}", "mean",
                             repr(float(self.weighted[i].mean())),
                             repr(float(self.unweighted[i].mean()))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def run_noise_robustness(rates, shift: ShiftConfig = None,
                         train: TrainConfig = None, seeds=(0, 1, 2, 3, 4),
                         progress=False):
    """Weighted vs unweighted alignment under injected pseudo-label noise.

    Both variants run without the regularizers so the weighting is the
    only difference.
    """
    if not rates:
        raise ConfigurationError("rates must be non-empty")
    shift = shift or default_benchmark()
    train = train or TrainConfig()
    weighted_spec = AblationSpec("weighted", use_elr=False, use_nc=False,
                                 seeds=tuple(seeds))
    unweighted_spec = AblationSpec("contrastive", use_weights=False,
                                   use_elr=False, use_nc=False,
                                   seeds=tuple(seeds))
    w = np.zeros((len(rates), len(seeds)))
    u = np.zeros((len(rates), len(seeds)))
    for i, rate in enumerate(rates):
        for j, seed in enumerate(seeds):
            for spec, table in ((weighted_spec, w), (unweighted_spec, u)):
                try:
                    res, _, _ = _run_arm(spec, shift, train, seed,
                                         label_noise_rate=rate,
                                         progress=progress)
                    table[i, j] = res.adapted_accuracy
                except DivergenceError:
                    table[i, j] = np.nan
    return NoiseResult(list(rates), tuple(seeds), w, u)


def emit_plots(log: MetricsLog, out_dir, prototypes=None, proto_labels=None):
    """Write loss.png, accuracy.png, prototypes.png from a metrics log.

    The prototype plot scatters a seeded random 2-d projection when
    vectors are given, else falls back to the inter/intra curves.
    """
    if not log.rows:
        raise ConfigurationError("log has no rows to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in ("pretrain", "stage1", "stage2"):
        rows = log.stage_rows(stage)
        vals = [r["loss_total"] for r in rows if r["loss_total"] is not None]
        if vals:
            ax.plot(range(1, len(vals) + 1), vals, marker=".", label=stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    paths["loss"] = os.path.join(out_dir, "loss.png")
    fig.savefig(paths["loss"])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    any_curve = False
    for col, label in (("target_accuracy", "target"),
                       ("pseudo_label_accuracy", "pseudo-label")):
        rows = log.stage_rows("stage2")
        vals = [r[col] for r in rows if r[col] is not None]
        if vals:
            ax.plot(range(1, len(vals) + 1), vals, marker=".", label=label)
            any_curve = True
    if not any_curve:
        ax.text(0.5, 0.5, "no accuracy rows", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("stage-2 epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    if any_curve:
        ax.legend()
    fig.tight_layout()
    paths["accuracy"] = os.path.join(out_dir, "accuracy.png")
    fig.savefig(paths["accuracy"])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 5))
    if prototypes is not None:
        protos = np.asarray(prototypes, dtype=np.float64)
        labels = np.asarray(proto_labels)
        proj = numpy_generator(0, 7707).standard_normal((protos.shape[1], 2))
        xy = protos @ proj
        for c in np.unique(labels):
            pts = xy[labels == c]
            ax.scatter(pts[:, 0], pts[:, 1], s=14, label=str(c))
        ax.legend(fontsize=7, title="class")
        ax.set_title("prototypes (random 2-d projection)")
    else:
        rows = [r for r in log.rows
                if r["proto_inter_distance"] is not None]
        inter = [r["proto_inter_distance"] for r in rows]
        intra = [r["proto_intra_distance"] for r in rows
                 if r["proto_intra_distance"] is not None]
        ax.plot(range(1, len(inter) + 1), inter, label="inter-class")
        if intra:
            ax.plot(range(1, len(intra) + 1), intra, label="intra-class")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cosine distance")
        if inter or intra:
            ax.legend()
    fig.tight_layout()
    paths["prototypes"] = os.path.join(out_dir, "prototypes.png")
    fig.savefig(paths["prototypes"])
    plt.close(fig)
    return paths
