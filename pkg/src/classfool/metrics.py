"""Held-out evaluation metrics and classification-region analyses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import IterationRecord, TargetedPerturbation
from .data import PoolSet, SampleBatch, build_train_pools
from .exceptions import ConfigError, ValidationError
from .validation import check_vector


def _perturbed_predictions(model, batch: SampleBatch, rho) -> np.ndarray:
    rho = check_vector(rho, size=batch.dim, name="rho")
    lo, hi = batch.value_range
    return model.predict(np.clip(batch.data - rho, lo, hi))


def fooling_ratio(model, batch: SampleBatch, rho, target_label: int) -> float:
    """Percentage of samples predicted as the target after perturbation."""
    if len(batch) == 0:
        raise ConfigError("fooling ratio needs a non-empty batch")
    preds = _perturbed_predictions(model, batch, rho)
    return 100.0 * float(np.mean(preds == int(target_label)))


def leakage(model, test_by_class: dict[int, SampleBatch], rho,
            target_label: int) -> tuple[float, dict[int, float]]:
    """Unweighted mean fooling of non-source classes into the target label.

    The target class itself is dropped from the map: predicting the target
    for genuine target samples is correct behaviour, not leakage.
    """
    per_class = {}
    for c, batch in test_by_class.items():
        if int(c) == int(target_label):
            continue
        per_class[int(c)] = fooling_ratio(model, batch, rho, target_label)
    if not per_class:
        raise ConfigError("leakage needs at least one non-source, non-target class")
    overall = float(np.mean(list(per_class.values())))
    return overall, per_class


@dataclass
class FoolingReport:
    """Evaluation summary of one attack run."""

    fooling_test: float
    leakage: float
    per_class_leakage: dict[int, float]
    train_fooling: float
    ratio_met: bool
    rho_linf: float
    rho_l2: float
    history: list[IterationRecord]
    config: dict
    metadata: dict = field(default_factory=dict)


def evaluate_attack(model, attack: TargetedPerturbation, pools: PoolSet,
                    metadata: dict | None = None) -> FoolingReport:
    """Compute test fooling and leakage for a fitted attack on held-out pools."""
    rho = attack.perturbation_
    fool = fooling_ratio(model, pools.source_test, rho, attack.target_label)
    leak, per_class = leakage(model, pools.nonsource_test, rho, attack.target_label)
    config = {k: v for k, v in attack.get_params(deep=False).items() if k != "model"}
    config["eta"] = attack._effective_eta()
    meta = {"leakage_excludes_target": True,
            "source_label": int(attack.source_label),
            "target_label": int(attack.target_label)}
    if metadata:
        meta.update(metadata)
    return FoolingReport(
        fooling_test=fool, leakage=leak, per_class_leakage=per_class,
        train_fooling=float(attack.train_fooling_),
        ratio_met=bool(attack.ratio_met_),
        rho_linf=float(np.max(np.abs(rho))), rho_l2=float(np.linalg.norm(rho)),
        history=list(attack.history_), config=config, metadata=meta)


@dataclass
class HoppingTrace:
    """Label-change events of the dominant non-source prediction."""

    entries: list[tuple[int, int]]  # (iteration, class index)

    def labels(self) -> list[int]:
        return [label for _, label in self.entries]


def hopping_trace(model, source_eval: SampleBatch, perturbations,
                  source_label: int, iterations=None) -> HoppingTrace:
    """Trace the most frequent predicted label (excluding the source) across
    perturbation snapshots, deduplicated to change events.

    Snapshots where every sample still predicts the source class carry no
    non-source majority and are skipped. Ties break toward the lowest index.
    """
    if iterations is None:
        iterations = range(1, len(perturbations) + 1)
    iterations = [int(t) for t in iterations]
    if len(iterations) != len(perturbations):
        raise ValidationError("one iteration number per snapshot required")
    entries: list[tuple[int, int]] = []
    for t, rho in zip(iterations, perturbations):
        preds = _perturbed_predictions(model, source_eval, rho)
        counts = np.bincount(preds, minlength=model.n_classes_)
        counts[int(source_label)] = 0
        if counts.sum() == 0:
            continue
        label = int(np.argmax(counts))
        if not entries or entries[-1][1] != label:
            entries.append((t, label))
    return HoppingTrace(entries)


@dataclass
class DistanceMatrix:
    """Mean/std L2 perturbation norms needed to reach the stop ratio, per
    ordered (source, target) pair. Diagonal entries are NaN."""

    classes: list[int]
    mean: np.ndarray
    std: np.ndarray
    complete: np.ndarray
    repeats: int


_RESERVED_ATTACK_KEYS = {"model", "source_label", "target_label", "norm",
                         "stop_ratio", "seed", "record_snapshots"}


def _check_overrides(attack_params: dict | None) -> dict:
    attack_params = dict(attack_params or {})
    bad = _RESERVED_ATTACK_KEYS & set(attack_params)
    if bad:
        raise ValidationError(f"attack_params may not override {sorted(bad)}")
    return attack_params


def distance_matrix(model, batch: SampleBatch, classes, repeats: int = 3,
                    stop_ratio: float = 95.0, seed: int = 0,
                    confidence_floor: float = 0.6, eval_subset_size: int = 512,
                    attack_params: dict | None = None) -> DistanceMatrix:
    """Unbounded-norm distances between classification regions.

    For every ordered pair the attack runs ``repeats`` times with distinct
    derived seeds; a cell is flagged incomplete if any run fails to reach
    the stop ratio within its iteration budget.
    """
    classes = [int(c) for c in classes]
    attack_params = _check_overrides(attack_params)
    k = len(classes)
    mean = np.full((k, k), np.nan)
    std = np.full((k, k), np.nan)
    complete = np.zeros((k, k), dtype=bool)
    for i, a in enumerate(classes):
        pool_seed = int(np.random.SeedSequence(seed, spawn_key=(i,)).generate_state(1)[0])
        pools = build_train_pools(model, batch, a, confidence_floor,
                                  eval_subset_size, pool_seed)
        for j, b in enumerate(classes):
            if a == b:
                continue
            norms, ok = [], True
            for r in range(repeats):
                run_seed = int(np.random.SeedSequence(
                    seed, spawn_key=(i, j, r)).generate_state(1)[0])
                atk = TargetedPerturbation(
                    model, a, b, norm="unbounded", stop_ratio=stop_ratio,
                    seed=run_seed, **attack_params)
                atk.fit_pools(pools)
                norms.append(np.linalg.norm(atk.perturbation_))
                ok = ok and atk.ratio_met_
            mean[i, j] = float(np.mean(norms))
            std[i, j] = float(np.std(norms))
            complete[i, j] = ok
    return DistanceMatrix(classes, mean, std, complete, int(repeats))


@dataclass
class AblationResult:
    """Paired runs with leakage suppression on vs off, identical seeds."""

    suppressed: FoolingReport
    unsuppressed: FoolingReport
    leakage_rise: float
    fooling_change: float


def ablation_compare(model, pools: PoolSet, attack_params: dict | None = None,
                     source_label: int | None = None,
                     target_label: int | None = None) -> AblationResult:
    """Run the attack twice, toggling only the leakage-suppression term."""
    params = dict(attack_params or {})
    params.pop("suppress_leakage", None)
    src = pools.source_label if source_label is None else int(source_label)
    if target_label is None:
        raise ValidationError("ablation_compare requires a target_label")
    reports = {}
    for suppress in (True, False):
        atk = TargetedPerturbation(model, src, int(target_label),
                                   suppress_leakage=suppress, **params)
        atk.fit_pools(pools)
        reports[suppress] = evaluate_attack(model, atk, pools)
    on, off = reports[True], reports[False]
    return AblationResult(
        suppressed=on, unsuppressed=off,
        leakage_rise=off.leakage - on.leakage,
        fooling_change=off.fooling_test - on.fooling_test)
