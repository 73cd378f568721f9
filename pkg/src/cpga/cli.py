"""Command line entry points.

Subcommands: run (one full pipeline), ablate (ladder of loss toggles),
sweep (lambda x eta grid), noise (pseudo-label corruption study), and
plot (render a metrics CSV to figures).

Config files are YAML with two mappings, ``shift`` and ``train``, whose
keys mirror the ShiftConfig / TrainConfig fields, plus an optional
``data: gaussian|moons`` family switch.
"""

import argparse
import csv
import os
import sys
from dataclasses import fields

import numpy as np
import torch
import yaml

from .datasets import ShiftConfig, make_gaussian_domains, make_moons_domains
from .errors import ConfigurationError
from .experiments import (
    AblationSpec,
    ablation_csv,
    default_benchmark,
    default_ladder,
    emit_plots,
    run_ablation,
    run_noise_robustness,
    run_sensitivity,
)
from .models import save_checkpoint
from .numerics import torch_generator
from .training import MetricsLog, TrainConfig, run_pipeline


def config_from_mapping(cls, mapping, where):
    """Build a config dataclass from a YAML mapping, strictly."""
    mapping = mapping or {}
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigurationError(
            f"unknown {where} fields: {sorted(unknown)}"
        )
    coerced = {
        k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items()
    }
    cfg = cls(**coerced)
    cfg.validate()
    return cfg


def load_config(path):
    """Returns (family, ShiftConfig, TrainConfig) from a YAML file."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = set(doc) - {"data", "shift", "train"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    family = doc.get("data", "gaussian")
    if family not in ("gaussian", "moons"):
        raise ConfigurationError("data must be 'gaussian' or 'moons'")
    shift = config_from_mapping(ShiftConfig, doc.get("shift"), "shift")
    train = config_from_mapping(TrainConfig, doc.get("train"), "train")
    return family, shift, train


def make_domains(family, shift):
    if family == "moons":
        return make_moons_domains(shift)
    return make_gaussian_domains(shift)


def _write_prototypes(path, generator, seed, per_class=16):
    labels = torch.arange(generator.num_classes).repeat_interleave(per_class)
    with torch.no_grad():
        protos = generator(
            labels, generator.sample_noise(len(labels),
                                           torch_generator(seed, 7901))
        ).numpy()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"v{i}" for i in range(protos.shape[1])])
        for lab, row in zip(labels.numpy(), protos):
            writer.writerow([int(lab)] + [repr(float(v)) for v in row])


def _read_prototypes(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: not a prototype table")
        labels, rows = [], []
        for parts in reader:
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    return np.array(rows), np.array(labels)


def _cmd_run(args):
    family, shift, train = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    source, target = make_domains(family, shift)
    dump_dir = os.path.join(args.out, "pseudo_labels") if args.dump_labels \
        else None
    result = run_pipeline(source, target, train, progress=not args.quiet,
                          dump_dir=dump_dir)
    result.metrics.to_csv(os.path.join(args.out, "metrics.csv"))
    _write_prototypes(os.path.join(args.out, "prototypes.csv"),
                      result.generator, train.seed)
    ckpt_dir = os.path.join(args.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(os.path.join(ckpt_dir, "extractor.npz"), "extractor",
                    result.extractor, seed=train.seed)
    save_checkpoint(os.path.join(ckpt_dir, "classifier.npz"), "classifier",
                    result.source_model.classifier, seed=train.seed)
    save_checkpoint(os.path.join(ckpt_dir, "generator.npz"), "generator",
                    result.generator, seed=train.seed)
    save_checkpoint(os.path.join(ckpt_dir, "projector.npz"), "projector",
                    result.projector, seed=train.seed)
    save_checkpoint(
        os.path.join(ckpt_dir, "banks.npz"), "banks",
        {"prediction_bank": result.diagnostics.prediction_bank.rows,
         "feature_bank": result.diagnostics.feature_bank.rows},
        seed=train.seed,
    )
    print(f"source-only accuracy: {result.source_only_accuracy:.4f}")
    print(f"adapted accuracy:     {result.adapted_accuracy:.4f}")
    print(f"outputs in {args.out}")
    return 0


def _parse_arms(doc):
    arms = doc.get("arms")
    seeds = tuple(doc.get("seeds", (0, 1, 2, 3, 4)))
    if arms is None:
        return default_ladder(seeds)
    toggles = {"use_alignment", "use_weights", "use_elr", "use_nc",
               "stage1_contrast"}
    specs = []
    for arm in arms:
        if "name" not in arm:
            raise ConfigurationError("every arm needs a name")
        unknown = set(arm) - toggles - {"name", "seeds"}
        if unknown:
            raise ConfigurationError(
                f"unknown arm fields: {sorted(unknown)}"
            )
        kwargs = {k: arm[k] for k in toggles if k in arm}
        specs.append(AblationSpec(arm["name"],
                                  seeds=tuple(arm.get("seeds", seeds)),
                                  **kwargs))
    return specs


def _cmd_ablate(args):
    with open(args.spec) as fh:
        doc = yaml.safe_load(fh) or {}
    shift = config_from_mapping(ShiftConfig, doc.get("shift"), "shift") \
        if "shift" in doc else default_benchmark()
    train = config_from_mapping(TrainConfig, doc.get("train"), "train") \
        if "train" in doc else TrainConfig()
    specs = _parse_arms(doc)
    results = run_ablation(specs, shift, train, progress=not args.quiet)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.csv")
    ablation_csv(results, path)
    for res in results:
        print(f"{res.name}: mean accuracy {res.mean_accuracy:.4f} "
              f"(std {res.std_accuracy:.4f})")
    print(f"wrote {path}")
    return 0


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad float list: {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad int list: {text!r}")


def _load_or_default(config_path):
    if config_path:
        return load_config(config_path)
    return "gaussian", default_benchmark(), TrainConfig()


def _cmd_sweep(args):
    _, shift, train = _load_or_default(args.config)
    result = run_sensitivity(args.lambdas, args.etas, shift, train,
                             progress=not args.quiet)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sensitivity.csv")
    result.to_csv(path)
    best = np.unravel_index(np.argmax(result.accuracy), result.accuracy.shape)
    print(f"best cell: lambda={result.lambdas[best[0]]:g} "
          f"eta={result.etas[best[1]]:g} "
          f"accuracy={result.accuracy[best]:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_noise(args):
    _, shift, train = _load_or_default(args.config)
    result = run_noise_robustness(args.rates, shift, train,
                                  seeds=tuple(args.seeds),
                                  progress=not args.quiet)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "noise.csv")
    result.to_csv(path)
    for i, rate in enumerate(result.rates):
        print(f"rate {rate:g}: weighted {result.weighted[i].mean():.4f} "
              f"unweighted {result.unweighted[i].mean():.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_plot(args):
    log = MetricsLog.from_csv(args.log)
    protos, labels = None, None
    sibling = os.path.join(os.path.dirname(os.path.abspath(args.log)),
                           "prototypes.csv")
    if os.path.exists(sibling):
        protos, labels = _read_prototypes(sibling)
    paths = emit_plots(log, args.out, prototypes=protos, proto_labels=labels)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cpga",
        description="Source-free domain adaptation with generated "
                    "prototypes on synthetic benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="cpga-run")
    p.add_argument("--dump-labels", action="store_true",
                   help="write per-epoch pseudo-label/weight CSVs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="run an ablation ladder from a spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default="cpga-ablation")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="lambda x eta sensitivity grid")
    p.add_argument("--lambda", dest="lambdas", type=_floats, required=True)
    p.add_argument("--eta", dest="etas", type=_floats, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="cpga-sweep")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("noise", help="pseudo-label noise robustness study")
    p.add_argument("--rates", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="cpga-noise")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_noise)

    p = sub.add_parser("plot", help="render a metrics CSV to figures")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default="cpga-plots")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
