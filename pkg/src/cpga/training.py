"""Training orchestration: source pretraining, both adaptation stages,
inference, metrics logging, and reverse validation.

The three stages share one MetricsLog (one row per epoch, fixed CSV
schema) and draw every random number from named substreams of
``TrainConfig.seed``, so a config fully determines the run, byte for byte.
"""

import copy
import csv
import io
import os
from dataclasses import dataclass

import numpy as np
import torch

from .datasets import Dataset, inject_label_noise
from .errors import ConfigurationError, ContractViolation, DivergenceError
from .labeling import assign_labels, confidence, init_centroids, refresh_centroids
from .losses import (
    Stage2Batch,
    label_smoothing_ce,
    stage1_objective,
    stage2_objective,
)
from .memory import FeatureBank, PredictionBank, nonparametric_predict
from .models import (
    ContrastiveProjector,
    FeatureExtractor,
    PrototypeGenerator,
    WeightNormClassifier,
    assert_frozen,
    content_hash,
    freeze,
)
from .numerics import (
    as_tensor,
    l2_normalize_rows,
    numpy_generator,
    prototype_distances,
    substream_seed,
    torch_generator,
)

# substream tags: one per independent random decision in a run
_S_EXTRACTOR, _S_CLASSIFIER, _S_PRETRAIN_BATCH = 1, 2, 3
_S_GENERATOR, _S_STAGE1_NOISE, _S_STAGE1_PAIRS = 4, 5, 6
_S_PROJECTOR, _S_STAGE2_NOISE, _S_STAGE2_BATCH = 7, 8, 9
_S_LABEL_NOISE, _S_DIAG, _S_REVERSE, _S_PROTO_EVAL = 10, 11, 12, 13


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the full pipeline. Defaults are tuned for the
    synthetic benchmarks; temperatures and loss weights keep their
    published values (tau=0.07, beta=0.9, eta=0.05, batch 64)."""

    seed: int = 0
    pretrain_epochs: int = 100
    stage1_epochs: int = 2000
    stage2_epochs: int = 300
    batch_size: int = 64
    # Adaptation lr. The pseudo-label loop re-assigns labels once per
    # epoch; features must not outrun that refresh or early mistakes get
    # locked in, so adaptation runs cooler than pretraining.
    learning_rate: float = 0.005
    pretrain_lr: float = 0.01
    stage1_lr: float = 0.5
    momentum: float = 0.9
    smoothing: float = 0.1
    tau: float = 0.07
    # Contrast temperature for prototype generation only. At 0.07 the
    # InfoNCE gradients freeze long before the prototypes reach corner
    # geometry at this scale; a warmer value keeps them alive throughout.
    stage1_tau: float = 0.5
    beta: float = 0.9
    lam: float = 5.0
    eta: float = 0.05
    feature_dim: int = 64
    extractor_hidden: tuple = (128, 128)
    noise_dim: int = 100
    generator_hidden: int = 256
    projector_hidden: tuple = (64, 32)
    contrast_dim: int = 16
    bank_init: str = "zeros"

    def validate(self):
        for name in ("pretrain_epochs", "stage1_epochs", "stage2_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("learning_rate", "pretrain_lr", "stage1_lr", "tau",
                     "stage1_tau"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        for name in ("momentum", "beta"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1)")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigurationError("smoothing must be in [0, 1)")
        for name in ("lam", "eta"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("feature_dim", "noise_dim", "generator_hidden",
                     "contrast_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("extractor_hidden", "projector_hidden"):
            dims = getattr(self, name)
            if not dims or any(d < 1 for d in dims):
                raise ConfigurationError(f"{name} must be positive dims")
        if self.bank_init not in ("zeros", "uniform"):
            raise ConfigurationError("bank_init must be 'zeros' or 'uniform'")


METRICS_COLUMNS = [
    "epoch", "stage", "loss_total", "loss_ce", "loss_contrast", "loss_elr",
    "loss_nc", "target_accuracy", "pseudo_label_accuracy",
    "mean_confidence_weight", "proto_inter_distance", "proto_intra_distance",
]
_STAGES = ("pretrain", "stage1", "stage2")


class MetricsLog:
    """Append-only per-epoch metrics with a fixed CSV schema.

    Epochs count from 1 within each stage and must arrive in order;
    stages must arrive in pipeline order. Identical runs serialize to
    identical bytes.
    """

    def __init__(self):
        self.rows = []

    def append(self, stage, epoch, **values):
        if stage not in _STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}")
        unknown = set(values) - set(METRICS_COLUMNS[2:])
        if unknown:
            raise ConfigurationError(f"unknown metrics fields {sorted(unknown)}")
        if self.rows:
            last = self.rows[-1]
            s_prev, s_new = _STAGES.index(last["stage"]), _STAGES.index(stage)
            if s_new < s_prev:
                raise ContractViolation("stages must arrive in pipeline order")
            expected = last["epoch"] + 1 if stage == last["stage"] else 1
        else:
            expected = 1
        if epoch != expected:
            raise ContractViolation(
                f"epoch {epoch} out of order in stage {stage} "
                f"(expected {expected})"
            )
        row = {"epoch": int(epoch), "stage": stage}
        for col in METRICS_COLUMNS[2:]:
            v = values.get(col)
            row[col] = None if v is None else float(v)
        self.rows.append(row)

    def stage_rows(self, stage):
        return [r for r in self.rows if r["stage"] == stage]

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in self.rows:
            out = []
            for col in METRICS_COLUMNS:
                v = row[col]
                if v is None:
                    out.append("")
                elif col == "epoch":
                    out.append(str(v))
                elif col == "stage":
                    out.append(v)
                else:
                    out.append(repr(v))
            writer.writerow(out)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source):
        if os.path.exists(str(source)):
            with open(source) as fh:
                text = fh.read()
        else:
            text = str(source)
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != METRICS_COLUMNS:
            raise ValueError("metrics header does not match schema")
        log = cls()
        for parts in reader:
            if not parts:
                continue
            values = {}
            for col, raw in zip(METRICS_COLUMNS[2:], parts[2:]):
                values[col] = float(raw) if raw else None
            log.append(parts[1], int(parts[0]), **values)
        return log


@dataclass
class SourceModel:
    extractor: FeatureExtractor
    classifier: WeightNormClassifier


@dataclass
class Stage2Diagnostics:
    """Final-epoch pseudo-label state and the banks, for checkpoints."""

    pseudo_labels: np.ndarray
    weights: np.ndarray
    prediction_bank: PredictionBank
    feature_bank: FeatureBank


def _check_finite(total, parts, stage, epoch):
    bad = not torch.isfinite(total)
    if not bad:
        bad = any(not torch.isfinite(v) for v in parts.values())
    if bad:
        detail = ", ".join(f"{k}={v.item():g}" for k, v in parts.items())
        raise DivergenceError(
            f"non-finite loss in {stage} epoch {epoch}: {detail}"
        )


def _progress(enabled, stage, epoch, total_epochs, **stats):
    if not enabled:
        return
    extras = " ".join(f"{k}={v:.4f}" for k, v in stats.items() if v == v)
    print(f"[{stage}] epoch {epoch}/{total_epochs} {extras}", flush=True)


@torch.no_grad()
def predict_proba(extractor, classifier, x) -> np.ndarray:
    return classifier(extractor(as_tensor(x))).numpy()


def infer(extractor, classifier, x) -> np.ndarray:
    """Hard predictions of the (frozen) classifier on extracted features."""
    return predict_proba(extractor, classifier, x).argmax(axis=1)


def accuracy(extractor, classifier, dataset: Dataset) -> float:
    """Evaluation-only metric; reads the hidden labels."""
    pred = infer(extractor, classifier, dataset.features)
    return float((pred == dataset.eval_labels()).mean())


def pretrain_source(source: Dataset, cfg: TrainConfig, log=None,
                    progress=False) -> SourceModel:
    """Label-smoothed CE training of extractor + classifier on source.

    The classifier comes back frozen; it anchors everything downstream.
    """
    cfg.validate()
    extractor = FeatureExtractor(
        source.input_dim, cfg.feature_dim, cfg.extractor_hidden,
        torch_generator(cfg.seed, _S_EXTRACTOR),
    )
    classifier = WeightNormClassifier(
        source.num_classes, cfg.feature_dim,
        torch_generator(cfg.seed, _S_CLASSIFIER),
    )
    opt = torch.optim.SGD(
        list(extractor.parameters()) + list(classifier.parameters()),
        lr=cfg.pretrain_lr, momentum=cfg.momentum,
    )
    x = as_tensor(source.features)
    y = torch.as_tensor(source.labels, dtype=torch.long)
    batch_gen = torch_generator(cfg.seed, _S_PRETRAIN_BATCH)
    for epoch in range(1, cfg.pretrain_epochs + 1):
        perm = torch.randperm(source.n, generator=batch_gen)
        losses = []
        for chunk in perm.split(cfg.batch_size):
            probs = classifier(extractor(x[chunk]))
            loss = label_smoothing_ce(probs, y[chunk], cfg.smoothing)
            _check_finite(loss, {"ce": loss}, "pretrain", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        if log is not None:
            log.append("pretrain", epoch, loss_total=mean_loss,
                       loss_ce=mean_loss)
        _progress(progress, "pretrain", epoch, cfg.pretrain_epochs,
                  loss=mean_loss)
    freeze(classifier)
    return SourceModel(extractor, classifier)


def train_stage1(classifier: WeightNormClassifier, cfg: TrainConfig,
                 log=None, progress=False, use_contrast=True) -> PrototypeGenerator:
    """Train the prototype generator against the frozen classifier.

    Each epoch is one batch of exactly two prototypes per class and one
    SGD step on CE + prototype InfoNCE (InfoNCE optional).
    """
    cfg.validate()
    assert_frozen(classifier, "classifier")
    hash_before = content_hash(classifier)
    generator = PrototypeGenerator(
        classifier.num_classes, classifier.feature_dim, cfg.noise_dim,
        cfg.generator_hidden, torch_generator(cfg.seed, _S_GENERATOR),
    )
    opt = torch.optim.SGD(generator.parameters(), lr=cfg.stage1_lr,
                          momentum=cfg.momentum)
    noise_gen = torch_generator(cfg.seed, _S_STAGE1_NOISE)
    pair_rng = numpy_generator(cfg.seed, _S_STAGE1_PAIRS)
    labels = torch.arange(classifier.num_classes).repeat_interleave(2)
    for epoch in range(1, cfg.stage1_epochs + 1):
        noise = generator.sample_noise(len(labels), noise_gen)
        total, parts = stage1_objective(
            generator, classifier, labels, noise, cfg.stage1_tau,
            rng=pair_rng, use_contrast=use_contrast,
        )
        _check_finite(total, parts, "stage1", epoch)
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            protos = generator(labels, noise)
        inter, intra = prototype_distances(protos, labels)
        if log is not None:
            log.append(
                "stage1", epoch,
                loss_total=total.item(), loss_ce=parts["ce"].item(),
                loss_contrast=(parts["contrast"].item()
                               if "contrast" in parts else None),
                proto_inter_distance=inter, proto_intra_distance=intra,
            )
        _progress(progress, "stage1", epoch, cfg.stage1_epochs,
                  loss=total.item(), inter=inter, intra=intra)
    if content_hash(classifier) != hash_before:
        raise ContractViolation("classifier changed during stage 1")
    freeze(generator)
    return generator


def _dump_epoch_labels(dump_dir, epoch, labels, weights):
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"epoch_{epoch:04d}.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "pseudo_label", "weight"])
        for i, (lab, w) in enumerate(zip(labels, weights)):
            writer.writerow([i, int(lab), repr(float(w))])


def train_stage2(extractor: FeatureExtractor, projector: ContrastiveProjector,
                 generator: PrototypeGenerator,
                 classifier: WeightNormClassifier, target: Dataset,
                 cfg: TrainConfig, log=None, progress=False,
                 use_alignment=True, use_weights=True, use_elr=True,
                 use_nc=True, label_noise_rate=0.0, dump_dir=None):
    """Adapt the extractor (and projector) to unlabeled target data.

    The generator and classifier must be frozen and come back bit
    identical. Inputs are copied, not mutated. Returns
    (extractor, projector, Stage2Diagnostics).
    """
    cfg.validate()
    assert_frozen(generator, "generator")
    assert_frozen(classifier, "classifier")
    gen_hash = content_hash(generator)
    clf_hash = content_hash(classifier)
    extractor = copy.deepcopy(extractor)
    projector = copy.deepcopy(projector)
    opt = torch.optim.SGD(
        list(extractor.parameters()) + list(projector.parameters()),
        lr=cfg.learning_rate, momentum=cfg.momentum,
    )
    k = classifier.num_classes
    x = as_tensor(target.features)
    noise_gen = torch_generator(cfg.seed, _S_STAGE2_NOISE)
    batch_gen = torch_generator(cfg.seed, _S_STAGE2_BATCH)
    diag_seed = substream_seed(cfg.seed, _S_DIAG)
    pred_bank = PredictionBank(target.n, k, beta=cfg.beta, init=cfg.bank_init)
    feat_bank = FeatureBank(target.n, cfg.feature_dim)
    proto_labels = torch.arange(k)
    centroids = None
    labels = None
    weights = None
    eval_labels = target.eval_labels()
    with torch.no_grad():
        # One full pass seeds the bank; afterwards rows refresh only as
        # their samples come up in batches. The lag smooths the
        # neighborhood geometry and keeps the clustering term from
        # chasing its own last step.
        feat_bank.update(torch.arange(target.n),
                         l2_normalize_rows(extractor(x)))

    for epoch in range(1, cfg.stage2_epochs + 1):
        with torch.no_grad():
            prototypes = generator(
                proto_labels, generator.sample_noise(k, noise_gen)
            ).detach()
            feats_all = extractor(x)
            if centroids is None:
                probs = classifier(feats_all)
                centroids = init_centroids(
                    feats_all, probs, fallback=classifier.weight()
                )
            else:
                centroids = refresh_centroids(feats_all, labels, centroids)
            labels = assign_labels(feats_all, centroids)
            if label_noise_rate > 0.0:
                noisy = inject_label_noise(
                    labels.numpy(), label_noise_rate,
                    substream_seed(cfg.seed, _S_LABEL_NOISE, epoch),
                )
                labels = torch.as_tensor(noisy, dtype=torch.long)
            weights = confidence(feats_all, centroids, labels, cfg.tau)
        if dump_dir is not None:
            _dump_epoch_labels(dump_dir, epoch, labels.numpy(),
                               weights.numpy())

        perm = torch.randperm(target.n, generator=batch_gen)
        sums = {}
        n_batches = 0
        for chunk in perm.split(cfg.batch_size):
            with torch.no_grad():
                f_pre = extractor(x[chunk])
                u_pre = projector(f_pre)
                v_pre = projector(prototypes)
                o_pre = nonparametric_predict(u_pre, v_pre, cfg.tau)
            batch = Stage2Batch(
                x=x[chunk], indices=chunk, pseudo_labels=labels[chunk],
                weights=weights[chunk], prototypes=prototypes,
                bank_rows=pred_bank.get(chunk), feature_bank=feat_bank.rows,
                tau=cfg.tau,
            )
            total, parts = stage2_objective(
                extractor, projector, batch, cfg.lam, cfg.eta,
                use_alignment=use_alignment, use_weights=use_weights,
                use_elr=use_elr, use_nc=use_nc,
            )
            _check_finite(total, parts, "stage2", epoch)
            if parts:
                opt.zero_grad()
                total.backward()
                opt.step()
            if use_elr:
                pred_bank.update(chunk, o_pre)
            if use_nc:
                feat_bank.update(chunk, l2_normalize_rows(f_pre))
            sums["total"] = sums.get("total", 0.0) + total.item()
            for name, value in parts.items():
                sums[name] = sums.get(name, 0.0) + value.item()
            n_batches += 1

        means = {kk: v / n_batches for kk, v in sums.items()}
        acc = accuracy(extractor, classifier, target)
        pseudo_acc = float((labels.numpy() == eval_labels).mean())
        mean_w = float(weights.mean())
        diag_gen = torch_generator(diag_seed, epoch)
        diag_labels = torch.arange(k).repeat_interleave(4)
        with torch.no_grad():
            diag_protos = generator(
                diag_labels, generator.sample_noise(len(diag_labels), diag_gen)
            )
        inter, intra = prototype_distances(diag_protos, diag_labels)
        if log is not None:
            log.append(
                "stage2", epoch,
                loss_total=means.get("total"),
                loss_contrast=means.get("align"),
                loss_elr=means.get("elr"), loss_nc=means.get("nc"),
                target_accuracy=acc, pseudo_label_accuracy=pseudo_acc,
                mean_confidence_weight=mean_w,
                proto_inter_distance=inter, proto_intra_distance=intra,
            )
        _progress(progress, "stage2", epoch, cfg.stage2_epochs,
                  loss=means.get("total", float("nan")), acc=acc,
                  pseudo=pseudo_acc, w=mean_w)

    if content_hash(generator) != gen_hash:
        raise ContractViolation("generator changed during stage 2")
    if content_hash(classifier) != clf_hash:
        raise ContractViolation("classifier changed during stage 2")
    diagnostics = Stage2Diagnostics(
        pseudo_labels=(labels.numpy() if labels is not None
                       else np.zeros(0, dtype=np.int64)),
        weights=(weights.numpy() if weights is not None
                 else np.zeros(0)),
        prediction_bank=pred_bank, feature_bank=feat_bank,
    )
    return extractor, projector, diagnostics


@dataclass
class PipelineResult:
    config: TrainConfig
    source_model: SourceModel
    generator: PrototypeGenerator
    projector: ContrastiveProjector
    extractor: FeatureExtractor
    metrics: MetricsLog
    diagnostics: Stage2Diagnostics
    source_only_accuracy: float
    adapted_accuracy: float


def run_pipeline(source: Dataset, target: Dataset, cfg: TrainConfig,
                 use_alignment=True, use_weights=True, use_elr=True,
                 use_nc=True, stage1_contrast=True, label_noise_rate=0.0,
                 dump_dir=None, progress=False) -> PipelineResult:
    """Full pipeline: pretrain, generate prototypes, adapt, evaluate.

    With every stage-2 term disabled this reduces to the source model
    evaluated on target (stage 2 is skipped entirely).
    """
    log = MetricsLog()
    src = pretrain_source(source, cfg, log, progress)
    source_only = accuracy(src.extractor, src.classifier, target)
    generator = train_stage1(src.classifier, cfg, log, progress,
                             use_contrast=stage1_contrast)
    projector = ContrastiveProjector(
        cfg.feature_dim, cfg.projector_hidden, cfg.contrast_dim,
        torch_generator(cfg.seed, _S_PROJECTOR),
    )
    if use_alignment or use_elr or use_nc:
        extractor, projector, diagnostics = train_stage2(
            src.extractor, projector, generator, src.classifier, target,
            cfg, log, progress, use_alignment=use_alignment,
            use_weights=use_weights, use_elr=use_elr, use_nc=use_nc,
            label_noise_rate=label_noise_rate, dump_dir=dump_dir,
        )
    else:
        extractor = copy.deepcopy(src.extractor)
        diagnostics = Stage2Diagnostics(
            pseudo_labels=np.zeros(0, dtype=np.int64), weights=np.zeros(0),
            prediction_bank=PredictionBank(target.n, target.num_classes,
                                           beta=cfg.beta, init=cfg.bank_init),
            feature_bank=FeatureBank(target.n, cfg.feature_dim),
        )
    adapted = accuracy(extractor, src.classifier, target)
    return PipelineResult(
        config=cfg, source_model=src, generator=generator,
        projector=projector, extractor=extractor, metrics=log,
        diagnostics=diagnostics, source_only_accuracy=source_only,
        adapted_accuracy=adapted,
    )


def prototype_fidelity(generator, classifier, n_draws, seed) -> float:
    """Share of fresh prototype draws the classifier assigns to their
    conditioning label."""
    k = generator.num_classes
    per_class = max(1, n_draws // k)
    labels = torch.arange(k).repeat_interleave(per_class)
    gen = torch_generator(seed, _S_PROTO_EVAL)
    with torch.no_grad():
        protos = generator(labels, generator.sample_noise(len(labels), gen))
        pred = classifier(protos).argmax(dim=1)
    return float((pred == labels).double().mean())


def reverse_score(extractor, generator, target: Dataset, pseudo_labels,
                  cfg: TrainConfig) -> float:
    """Label-free score of an adapted model.

    A fresh classifier is trained on the adapted target features against
    the pseudo-labels, then judged on fresh prototype draws (the only
    source-side objects still available). High agreement means the
    adapted feature layout still matches the prototype anchors.
    """
    rev_seed = substream_seed(cfg.seed, _S_REVERSE)
    with torch.no_grad():
        feats = extractor(as_tensor(target.features))
    y = torch.as_tensor(np.asarray(pseudo_labels), dtype=torch.long)
    k = generator.num_classes
    clf = WeightNormClassifier(k, feats.shape[1],
                               torch_generator(rev_seed, 1))
    opt = torch.optim.SGD(clf.parameters(), lr=cfg.pretrain_lr,
                          momentum=cfg.momentum)
    batch_gen = torch_generator(rev_seed, 2)
    for _ in range(cfg.pretrain_epochs):
        perm = torch.randperm(len(y), generator=batch_gen)
        for chunk in perm.split(cfg.batch_size):
            loss = label_smoothing_ce(clf(feats[chunk]), y[chunk],
                                      cfg.smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
    labels = torch.arange(k).repeat_interleave(32)
    gen = torch_generator(rev_seed, 3)
    with torch.no_grad():
        protos = generator(labels, generator.sample_noise(len(labels), gen))
        pred = clf(protos).argmax(dim=1)
    return float((pred == labels).double().mean())


def reverse_validate(candidates, source: Dataset, target: Dataset,
                     progress=False):
    """Pick a config by reverse score, never touching target labels.

    Returns (best_config, scores). Ties go to the earlier candidate.
    """
    if not candidates:
        raise ConfigurationError("candidates must be non-empty")
    scores = []
    for cfg in candidates:
        result = run_pipeline(source, target, cfg, progress=progress)
        score = reverse_score(
            result.extractor, result.generator, target,
            result.diagnostics.pseudo_labels, cfg,
        )
        scores.append(score)
    best = int(np.argmax(scores))
    return candidates[best], scores
