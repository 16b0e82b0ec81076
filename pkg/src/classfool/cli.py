"""Command-line entry point: train victims, run attacks, evaluate, analyze.

All commands read one JSON config file; a handful of flags override config
keys. Every source of randomness flows from the single top-level seed
through named substreams (split / train / attack), so any command re-run
with the same config produces byte-identical outputs.

Exit codes: 0 success, 1 unexpected error, 2 validation/config error,
3 file format or version error, 4 numeric/training failure, 5 attack
finished below the requested fooling ratio (artifacts still written),
6 file system error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as dio
from .attack import TargetedPerturbation
from .container import atomic_write_text
from .exceptions import (ConfigError, FormatError, NumericError,
                         TrainingError, ValidationError)
from .metrics import (ablation_compare, distance_matrix, evaluate_attack,
                      fooling_ratio, hopping_trace, leakage)
from .models import (ConvClassifier, DenseClassifier, checkpoint_digest,
                     load_checkpoint, save_checkpoint, train_victim)
from .reporting import (distance_matrix_to_csv, hopping_to_text,
                        load_artifact, report_to_dict, save_artifact,
                        save_report, summarize)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4
EXIT_RATIO_UNMET = 5
EXIT_IO = 6

_TOP_KEYS = {"seed", "output_dir", "report_format", "dataset", "victim",
             "attack", "analyze"}
_DATASET_KEYS = {
    "blobs": {"kind", "classes", "dim", "per_class", "spread", "scale",
              "value_range", "centroids", "test_per_class"},
    "idx": {"kind", "images", "labels", "test_per_class"},
}
_VICTIM_KEYS = {
    "dense": {"arch", "hidden", "epochs", "lr", "batch_size",
              "accuracy_floor", "holdout_fraction"},
    "conv": {"arch", "image_shape", "n_filters", "kernel_size", "epochs",
             "lr", "batch_size", "accuracy_floor", "holdout_fraction"},
}
_ATTACK_KEYS = {"source_label", "target_label", "norm", "eta", "batch_size",
                "stage1_batch_size", "stop_ratio", "beta1", "beta2",
                "stage1_iters", "stage2_min_iters", "max_iters", "eval_every",
                "eval_subset_size", "suppress_leakage", "confidence_floor",
                "project_stage1", "record_snapshots"}
_ANALYZE_KEYS = {"classes", "repeats"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "config")
    for name, allowed_by_kind, kind_key in (
            ("dataset", _DATASET_KEYS, "kind"), ("victim", _VICTIM_KEYS, "arch")):
        if name in cfg:
            section = cfg[name]
            kind = section.get(kind_key)
            if kind not in allowed_by_kind:
                raise ConfigError(
                    f"{name}.{kind_key} must be one of "
                    f"{sorted(allowed_by_kind)}, got {kind!r}")
            _reject_unknown(section, allowed_by_kind[kind], f"config section {name!r}")
    if "attack" in cfg:
        _reject_unknown(cfg["attack"], _ATTACK_KEYS, "config section 'attack'")
    if "analyze" in cfg:
        _reject_unknown(cfg["analyze"], _ANALYZE_KEYS, "config section 'analyze'")
    cfg.setdefault("seed", 0)
    cfg.setdefault("output_dir", "out")
    cfg.setdefault("report_format", "table")
    return cfg


def _substreams(root_seed: int) -> dict[str, int]:
    split = np.random.SeedSequence(root_seed, spawn_key=(0,)).generate_state(3)
    train = np.random.SeedSequence(root_seed, spawn_key=(1,)).generate_state(2)
    attack = np.random.SeedSequence(root_seed, spawn_key=(2,)).generate_state(1)
    return {
        "dataset": int(split[0]), "test_split": int(split[1]), "pools": int(split[2]),
        "victim": int(train[0]), "holdout": int(train[1]),
        "attack": int(attack[0]),
    }


def _build_dataset(cfg: dict, seed: int):
    ds = cfg["dataset"]
    if ds["kind"] == "blobs":
        batch, _ = dio.make_blobs(
            n_classes=int(ds["classes"]), dim=int(ds["dim"]),
            per_class=int(ds["per_class"]), spread=float(ds.get("spread", 0.2)),
            scale=ds.get("scale", 0.05),
            value_range=tuple(ds.get("value_range", (0.0, 1.0))), seed=seed,
            centroids=ds.get("centroids"))
        side = int(round(np.sqrt(batch.dim)))
        shape = (side, side) if side * side == batch.dim else None
        return batch, shape
    batch = dio.load_idx(ds["images"], ds["labels"])
    return batch, dio.idx_image_shape(ds["images"])


def _split(cfg: dict, batch, seeds):
    test_per_class = int(cfg["dataset"].get("test_per_class", 50))
    return dio.split_test(batch, test_per_class, seeds["test_split"])


def _build_victim(cfg: dict, value_range, seed: int):
    vc = dict(cfg.get("victim") or {})
    if not vc:
        raise ConfigError("config needs a 'victim' section")
    arch = vc.pop("arch")
    vc.pop("accuracy_floor", None)
    vc.pop("holdout_fraction", None)
    if "image_shape" in vc:
        vc["image_shape"] = tuple(vc["image_shape"])
    cls = DenseClassifier if arch == "dense" else ConvClassifier
    return cls(seed=seed, value_range=value_range, **vc)


def _checkpoint_path(args, cfg: dict) -> str:
    if getattr(args, "checkpoint", None):
        return args.checkpoint
    return os.path.join(cfg["output_dir"], "victim.ckpt")


def _attack_config(cfg: dict, args) -> dict:
    ac = dict(cfg.get("attack") or {})
    if not ac:
        raise ConfigError("config needs an 'attack' section")
    if getattr(args, "norm", None):
        ac["norm"] = args.norm
    if getattr(args, "eta", None) is not None:
        ac["eta"] = args.eta
    if getattr(args, "zeta", None) is not None:
        ac["stop_ratio"] = args.zeta
    if getattr(args, "batch_size", None) is not None:
        ac["batch_size"] = args.batch_size
    if getattr(args, "no_suppress_leakage", False):
        ac["suppress_leakage"] = False
    return ac


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out_dir", None):
        cfg["output_dir"] = args.out_dir
    if getattr(args, "format", None):
        cfg["report_format"] = args.format
    os.makedirs(cfg["output_dir"], exist_ok=True)
    return cfg, _substreams(int(cfg["seed"]))


def cmd_train(args) -> int:
    cfg, seeds = _prepare(args)
    batch, _ = _build_dataset(cfg, seeds["dataset"])
    train_batch, _ = _split(cfg, batch, seeds)
    model = _build_victim(cfg, train_batch.value_range, seeds["victim"])
    vc = cfg.get("victim") or {}
    model, accuracy = train_victim(
        train_batch, model,
        holdout_fraction=float(vc.get("holdout_fraction", 0.2)),
        accuracy_floor=float(vc.get("accuracy_floor", 0.95)),
        seed=seeds["holdout"])
    path = _checkpoint_path(args, cfg)
    save_checkpoint(model, path)
    print(f"held-out accuracy: {accuracy * 100:.2f}%")
    print(f"checkpoint: {path}")
    return EXIT_OK


def _pools_for_attack(cfg, seeds, model, source_label, ac):
    batch, image_shape = _build_dataset(cfg, seeds["dataset"])
    train_batch, test_batch = _split(cfg, batch, seeds)
    pools = dio.build_pools(
        model, train_batch, test_batch, source_label,
        confidence_floor=float(ac.get("confidence_floor", 0.6)),
        eval_subset_size=int(ac.get("eval_subset_size", 512)),
        seed=seeds["pools"])
    return pools, image_shape


def cmd_attack(args) -> int:
    cfg, seeds = _prepare(args)
    ckpt = _checkpoint_path(args, cfg)
    model = load_checkpoint(ckpt)
    ac = _attack_config(cfg, args)
    attack = TargetedPerturbation(model, seed=seeds["attack"], **ac)
    attack._validate()  # fail before touching any data
    pools, image_shape = _pools_for_attack(
        cfg, seeds, model, int(ac["source_label"]), ac)
    attack.fit_pools(pools)
    report = evaluate_attack(model, attack, pools, metadata={
        "model_digest": checkpoint_digest(ckpt), "root_seed": int(cfg["seed"])})
    out = cfg["output_dir"]
    save_artifact(os.path.join(out, "perturbation.json"),
                  attack.perturbation_, report)
    dio.save_pools(pools, os.path.join(out, "pools.cfp"))
    if args.image:
        if image_shape is None:
            raise ConfigError("dataset dimension is not an image; cannot export")
        h, w = image_shape
        dio.export_perturbation_image(attack.perturbation_, w, h, args.image)
    print(summarize([report], cfg["report_format"]))
    if not attack.ratio_met_:
        print("warning: target fooling ratio not reached within max_iters",
              file=sys.stderr)
        return EXIT_RATIO_UNMET
    return EXIT_OK


def cmd_eval(args) -> int:
    rho, stored = load_artifact(args.artifact)
    pools = dio.load_pools(args.pools)
    model = load_checkpoint(args.checkpoint)
    target = int(stored.metadata["target_label"])
    fool = fooling_ratio(model, pools.source_test, rho, target)
    leak, per_class = leakage(model, pools.nonsource_test, rho, target)
    digest = checkpoint_digest(args.checkpoint)
    metadata = dict(stored.metadata)
    metadata["recomputed_matches"] = (
        fool == stored.fooling_test and leak == stored.leakage)
    if digest != stored.metadata.get("model_digest"):
        metadata["cross_model_warning"] = True
        print("warning: evaluating against a different checkpoint than the "
              "one the perturbation was estimated on", file=sys.stderr)
    report = type(stored)(
        fooling_test=fool, leakage=leak, per_class_leakage=per_class,
        train_fooling=stored.train_fooling, ratio_met=stored.ratio_met,
        rho_linf=stored.rho_linf, rho_l2=stored.rho_l2,
        history=stored.history, config=stored.config, metadata=metadata)
    if args.out:
        save_report(args.out, report)
    print(summarize([report], args.format or "table"))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg, seeds = _prepare(args)
    ckpt = _checkpoint_path(args, cfg)
    model = load_checkpoint(ckpt)
    ac = _attack_config(cfg, args)
    out = cfg["output_dir"]
    an = cfg.get("analyze") or {}

    if args.mode in ("distance-matrix", "hopping") and ac.get("norm") != "unbounded":
        raise ConfigError(
            f"mode {args.mode!r} requires an unbounded-norm attack config")

    if args.mode == "distance-matrix":
        batch, _ = _build_dataset(cfg, seeds["dataset"])
        train_batch, _ = _split(cfg, batch, seeds)
        classes = an.get("classes")
        if classes is None:
            classes = sorted(int(c) for c in np.unique(train_batch.labels))
        overrides = {k: v for k, v in ac.items()
                     if k not in ("source_label", "target_label", "norm",
                                  "stop_ratio", "confidence_floor",
                                  "eval_subset_size", "record_snapshots")}
        dm = distance_matrix(
            model, train_batch, classes, repeats=int(an.get("repeats", 3)),
            stop_ratio=float(ac.get("stop_ratio", 95.0)),
            seed=seeds["attack"],
            confidence_floor=float(ac.get("confidence_floor", 0.6)),
            eval_subset_size=int(ac.get("eval_subset_size", 512)),
            attack_params=overrides)
        csv = distance_matrix_to_csv(dm)
        atomic_write_text(os.path.join(out, "distance_matrix.csv"), csv)
        print(csv, end="")
        return EXIT_OK

    if args.mode == "hopping":
        ac["record_snapshots"] = True
        attack = TargetedPerturbation(model, seed=seeds["attack"], **ac)
        attack._validate()
        pools, _ = _pools_for_attack(cfg, seeds, model, int(ac["source_label"]), ac)
        attack.fit_pools(pools)
        trace = hopping_trace(model, pools.source_eval, attack.snapshots_,
                              int(ac["source_label"]),
                              attack.snapshot_iterations_)
        text = hopping_to_text(trace)
        atomic_write_text(os.path.join(out, "hopping.txt"), text)
        print(text, end="")
        return EXIT_OK

    if args.mode == "ablation":
        pools, _ = _pools_for_attack(cfg, seeds, model, int(ac["source_label"]), ac)
        params = {k: v for k, v in ac.items()
                  if k not in ("source_label", "target_label", "suppress_leakage",
                               "confidence_floor", "eval_subset_size")}
        params["seed"] = seeds["attack"]
        result = ablation_compare(model, pools, params,
                                  target_label=int(ac["target_label"]))
        doc = {"kind": "classfool-ablation", "version": 1,
               "suppressed": report_to_dict(result.suppressed),
               "unsuppressed": report_to_dict(result.unsuppressed),
               "leakage_rise": result.leakage_rise,
               "fooling_change": result.fooling_change}
        atomic_write_text(os.path.join(out, "ablation.json"),
                          json.dumps(doc, indent=1, allow_nan=False))
        print(summarize([result.suppressed, result.unsuppressed],
                        cfg["report_format"]))
        print(f"leakage rise (suppression off - on): {result.leakage_rise:+.2f}")
        print(f"test fooling change: {result.fooling_change:+.2f}")
        return EXIT_OK

    raise ConfigError(f"unknown analyze mode {args.mode!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classfool",
        description="Class-universal targeted perturbations: train victims, "
                    "run attacks, evaluate and analyze.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("-c", "--config", required=True,
                           help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default=None, help="override output_dir")
        p.add_argument("--format", choices=("table", "machine"), default=None)

    p = sub.add_parser("train", help="train and persist a victim classifier")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="estimate a targeted perturbation")
    common(p)
    p.add_argument("--checkpoint", default=None, help="victim checkpoint path")
    p.add_argument("--norm", choices=("linf", "l2", "unbounded"), default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--zeta", type=float, default=None,
                   help="override the stop fooling ratio")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-suppress-leakage", action="store_true",
                   help="drop the non-source term (ablation form)")
    p.add_argument("--image", default=None,
                   help="also export the perturbation as PGM/PPM")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="re-evaluate a stored perturbation")
    p.add_argument("--artifact", required=True)
    p.add_argument("--pools", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.add_argument("--format", choices=("table", "machine"), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze",
                       help="distance-matrix, hopping or ablation analyses")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", required=True,
                   choices=("distance-matrix", "hopping", "ablation"))
    p.add_argument("--norm", choices=("linf", "l2", "unbounded"), default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-suppress-leakage", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # pragma: no cover - safety net
        print(f"unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
