"""Estimation of a single targeted perturbation for a whole source class.

The optimizer draws half-source / half-other mini-batches, perturbs and
clips them with the current estimate, combines the per-sample loss
gradients into an expected direction (scaled so the two halves contribute
comparably), tracks exponential first and second moments of that direction,
and accumulates the bias-corrected moment ratio normalized to unit
max-magnitude. After every step the accumulated vector is projected back
onto the configured norm ball; the "unbounded" variant keeps the identity
projection and is the tool used for classification-region measurements.

A warm-up stage first runs a fixed number of iterations with the non-source
half replaced by fresh source draws labelled with the target, and the main
stage continues from that state until the training fooling ratio reaches
the stop threshold (with a minimum iteration floor) or the global iteration
cap is hit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SampleBatch, build_train_pools
from .exceptions import (ConfigError, DegenerateGradientError, NumericError,
                         ValidationError)
from .validation import check_label, check_labels, check_matrix, check_vector

NORM_TYPES = ("linf", "l2", "unbounded")
DEFAULT_ETA = {"linf": 15.0, "l2": 4500.0}

STEP_EPS = 1e-12   # skip threshold for the max-magnitude of a step
DIV_EPS = 1e-8     # guard added to sqrt(second moment) before dividing


@dataclass
class AttackState:
    """Accumulated perturbation plus moment estimates at iteration t."""

    rho: np.ndarray
    upsilon: np.ndarray
    omega: np.ndarray
    t: int

    @classmethod
    def zeros(cls, dim: int) -> "AttackState":
        return cls(np.zeros(dim), np.zeros(dim), np.zeros(dim), 0)


@dataclass
class IterationRecord:
    t: int
    stage: str
    delta: float
    xi_norm: float
    fooling_ratio_train: float
    max_nonsource_label: int
    rho_l2: float
    rho_linf: float
    step_skipped: bool = False


def sample_minibatch(source_pool: SampleBatch, nonsource_pool: SampleBatch,
                     batch_size: int, rng) -> tuple[SampleBatch, SampleBatch]:
    """Draw b/2 samples with replacement from each pool, seeded stream order."""
    if batch_size < 2 or batch_size % 2:
        raise ValidationError(f"batch_size must be even and >= 2, got {batch_size}")
    if len(source_pool) == 0 or len(nonsource_pool) == 0:
        raise ConfigError("mini-batch pools must be non-empty")
    half = batch_size // 2
    s = source_pool.take(rng.integers(0, len(source_pool), size=half))
    o = nonsource_pool.take(rng.integers(0, len(nonsource_pool), size=half))
    return s, o


def perturb_and_clip(batch: SampleBatch, rho) -> SampleBatch:
    """Subtract the perturbation from every sample and clip into the range."""
    rho = check_vector(rho, size=batch.dim, name="rho")
    lo, hi = batch.value_range
    return SampleBatch(np.clip(batch.data - rho, lo, hi), batch.labels,
                       batch.value_range, batch.ids)


def scaling_factor(source_grads: np.ndarray, nonsource_grads: np.ndarray) -> float:
    """Mean source gradient L2 norm over mean non-source gradient L2 norm."""
    source_grads = check_matrix(source_grads, "source_grads")
    nonsource_grads = check_matrix(nonsource_grads, "nonsource_grads")
    num = float(np.mean(np.linalg.norm(source_grads, axis=1)))
    den = float(np.mean(np.linalg.norm(nonsource_grads, axis=1)))
    if den < 1e-12:
        raise DegenerateGradientError(
            "non-source gradient norms collapsed (saturated batch)")
    return num / den


def combined_gradient(source_grads: np.ndarray, nonsource_grads: np.ndarray,
                      scale: float) -> np.ndarray:
    """Half the sum of the two per-half gradient means, one half rescaled."""
    return 0.5 * (source_grads.mean(axis=0) + scale * nonsource_grads.mean(axis=0))


def update_moments(state: AttackState, grad: np.ndarray, beta1: float,
                   beta2: float) -> AttackState:
    """Exponential moving first and raw second moment updates."""
    upsilon = beta1 * state.upsilon + (1.0 - beta1) * grad
    omega = beta2 * state.omega + (1.0 - beta2) * (grad * grad)
    return replace(state, upsilon=upsilon, omega=omega)


def bias_corrected_step(upsilon: np.ndarray, omega: np.ndarray, t: int,
                        beta1: float, beta2: float, eps: float = DIV_EPS
                        ) -> np.ndarray:
    """Bias-corrected moment ratio: sqrt(1-b2^t)/(1-b1^t) * v / (sqrt(w)+eps)."""
    if t < 1:
        raise ValidationError("bias correction requires t >= 1")
    scale = np.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
    return scale * upsilon / (np.sqrt(omega) + eps)


def accumulate_step(rho: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Add the step normalized to unit max-magnitude."""
    m = float(np.max(np.abs(step)))
    if m < STEP_EPS:
        raise ValidationError("step is (numerically) zero; skip this update")
    return rho + step / m


def project(rho, norm: str, eta: float | None) -> np.ndarray:
    """Project onto the linf or l2 ball of radius eta; identity if unbounded.

    Feasible inputs are returned unchanged, which also makes the l2 branch
    bit-exact under re-application.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if norm == "unbounded":
        return rho.copy()
    if norm not in NORM_TYPES:
        raise ValidationError(f"norm must be one of {NORM_TYPES}, got {norm!r}")
    if eta is None or eta <= 0:
        raise ValidationError(f"eta must be > 0 for norm {norm!r}")
    if norm == "linf":
        return np.sign(rho) * np.minimum(np.abs(rho), eta)
    n = float(np.linalg.norm(rho))
    if n <= eta * (1.0 + 1e-12):
        return rho.copy()
    return rho * (eta / n)


class TargetedPerturbation(TransformerMixin, BaseEstimator):
    """Learns one additive perturbation that maps a source class to a target.

    Parameters
    ----------
    model : fitted victim classifier exposing predict_proba / input_gradients.
    source_label, target_label : class indices; must differ.
    norm : "linf", "l2" or "unbounded" projection after every iteration.
    eta : ball radius; defaults to 15 (linf) / 4500 (l2); ignored unbounded.
    batch_size, stage1_batch_size : even mini-batch sizes for the main and
        warm-up stages.
    stop_ratio : training fooling percentage that ends the main stage.
    beta1, beta2 : moment decay rates.
    stage1_iters : warm-up iterations (non-source half replaced by source).
    stage2_min_iters : minimum main-stage iterations before the stop check.
    max_iters : global iteration cap across both stages.
    eval_every : evaluation cadence of the stop criterion.
    eval_subset_size : held-out source subset used for that evaluation.
    seed : drives pool carving and mini-batch draws via named substreams.
    suppress_leakage : when False, the main stage also substitutes fresh
        source samples with the target label for the second half, removing
        the non-source classes from the optimization entirely.
    confidence_floor : non-source pool filter used by ``fit(X, y)``.
    project_stage1 : apply the configured projection during warm-up too.
    record_snapshots : keep a copy of the perturbation after every iteration
        (needed for hopping analyses).

    After fitting: ``perturbation_``, ``history_``, ``n_iter_``,
    ``ratio_met_``, ``train_fooling_``, ``state_``, ``nonsource_draws_``
    and, when recording, ``snapshots_`` / ``snapshot_iterations_``.
    """

    def __init__(self, model, source_label, target_label, norm="linf",
                 eta=None, batch_size=128, stage1_batch_size=64,
                 stop_ratio=80.0, beta1=0.9, beta2=0.999, stage1_iters=100,
                 stage2_min_iters=100, max_iters=450, eval_every=1,
                 eval_subset_size=512, seed=0, suppress_leakage=True,
                 confidence_floor=0.6, project_stage1=True,
                 record_snapshots=False):
        self.model = model
        self.source_label = source_label
        self.target_label = target_label
        self.norm = norm
        self.eta = eta
        self.batch_size = batch_size
        self.stage1_batch_size = stage1_batch_size
        self.stop_ratio = stop_ratio
        self.beta1 = beta1
        self.beta2 = beta2
        self.stage1_iters = stage1_iters
        self.stage2_min_iters = stage2_min_iters
        self.max_iters = max_iters
        self.eval_every = eval_every
        self.eval_subset_size = eval_subset_size
        self.seed = seed
        self.suppress_leakage = suppress_leakage
        self.confidence_floor = confidence_floor
        self.project_stage1 = project_stage1
        self.record_snapshots = record_snapshots

    # -- validation -------------------------------------------------------

    def _effective_eta(self) -> float | None:
        if self.norm == "unbounded":
            return None
        if self.eta is None:
            return DEFAULT_ETA[self.norm]
        return float(self.eta)

    def _validate(self) -> None:
        check_is_fitted(self.model)
        k = self.model.n_classes_
        src = check_label(self.source_label, k, "source_label")
        tgt = check_label(self.target_label, k, "target_label")
        if src == tgt:
            raise ValidationError("target_label must differ from source_label")
        if self.norm not in NORM_TYPES:
            raise ValidationError(f"norm must be one of {NORM_TYPES}, got {self.norm!r}")
        eta = self._effective_eta()
        if self.norm != "unbounded" and (eta is None or eta <= 0):
            raise ValidationError("eta must be > 0 for bounded norms")
        for name in ("batch_size", "stage1_batch_size"):
            b = getattr(self, name)
            if b < 2 or b % 2:
                raise ValidationError(f"{name} must be even and >= 2, got {b}")
        if not 0.0 <= self.stop_ratio <= 100.0:
            raise ValidationError("stop_ratio must be in [0, 100]")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"{name} must be in [0, 1), got {v}")
        for name in ("stage1_iters", "stage2_min_iters"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")

    # -- fitting ----------------------------------------------------------

    def fit(self, X, y):
        """Build training pools from raw arrays and run the attack."""
        self._validate()
        X = check_matrix(X)
        y = check_labels(y, X.shape[0], self.model.n_classes_, name="y")
        batch = SampleBatch(X, y, self.model.value_range)
        pool_seed = int(np.random.SeedSequence(
            self.seed, spawn_key=(0,)).generate_state(1)[0])
        pools = build_train_pools(self.model, batch, int(self.source_label),
                                  float(self.confidence_floor),
                                  int(self.eval_subset_size), pool_seed)
        return self._run(pools)

    def fit_pools(self, pools):
        """Run the attack on pools prepared externally (PoolSet/TrainPools)."""
        self._validate()
        return self._run(pools)

    def _run(self, pools):
        model = self.model
        d = model.n_features_in_
        if pools.source_train.dim != d or pools.nonsource_train.dim != d:
            raise ValidationError("pool dimension does not match the model")
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1,)))
        state = AttackState.zeros(d)
        history: list[IterationRecord] = []
        snaps: list[np.ndarray] = []
        snap_ts: list[int] = []
        self.nonsource_draws_ = 0

        state, _, _ = self._stage("warm", state, pools, rng, history, snaps, snap_ts)
        state, last_ratio, met = self._stage("main", state, pools, rng, history,
                                             snaps, snap_ts)

        self.ratio_met_ = met
        if not met and self._best_rho is not None and self._best_ratio > last_ratio:
            self.perturbation_ = self._best_rho
            self.train_fooling_ = self._best_ratio
        else:
            self.perturbation_ = state.rho.copy()
            self.train_fooling_ = last_ratio
        self.state_ = state
        self.history_ = history
        self.n_iter_ = state.t
        if self.record_snapshots:
            self.snapshots_ = snaps
            self.snapshot_iterations_ = snap_ts
        return self

    def _evaluate(self, eval_batch: SampleBatch, rho: np.ndarray
                  ) -> tuple[float, int]:
        """Fooling percentage on the eval subset + most frequent non-source
        prediction (-1 when every sample still predicts the source)."""
        lo, hi = eval_batch.value_range
        probs = self.model.predict_proba(np.clip(eval_batch.data - rho, lo, hi))
        preds = np.argmax(probs, axis=1)
        ratio = 100.0 * float(np.mean(preds == int(self.target_label)))
        counts = np.bincount(preds, minlength=self.model.n_classes_)
        counts[int(self.source_label)] = 0
        max_label = int(np.argmax(counts)) if counts.sum() > 0 else -1
        return ratio, max_label

    def _stage(self, stage: str, state: AttackState, pools, rng, history,
               snaps, snap_ts) -> tuple[AttackState, float, bool]:
        target = int(self.target_label)
        eta = self._effective_eta()
        if stage == "warm":
            if self.stage1_iters == 0:
                return state, 0.0, False
            batch_size = int(self.stage1_batch_size)
            use_nonsource = False
            norm_eff = self.norm if self.project_stage1 else "unbounded"
        else:
            batch_size = int(self.batch_size)
            use_nonsource = bool(self.suppress_leakage)
            norm_eff = self.norm
            self._best_ratio, self._best_rho = -1.0, None

        source_pool = pools.source_train
        other_pool = pools.nonsource_train if use_nonsource else pools.source_train
        eval_batch = pools.source_eval
        if len(eval_batch) == 0:
            raise ConfigError("evaluation subset is empty")

        last_ratio, last_max = self._evaluate(eval_batch, state.rho)
        if stage == "main" and last_ratio > self._best_ratio:
            self._best_ratio, self._best_rho = last_ratio, state.rho.copy()
        t_stage = 0
        met = False
        while True:
            if stage == "warm":
                keep_going = t_stage < self.stage1_iters
            else:
                met = last_ratio >= self.stop_ratio and t_stage >= self.stage2_min_iters
                keep_going = not met
            if not keep_going or state.t >= self.max_iters:
                break

            s_batch, o_batch = sample_minibatch(source_pool, other_pool,
                                                batch_size, rng)
            if use_nonsource:
                self.nonsource_draws_ += len(o_batch)
            s_batch = perturb_and_clip(s_batch, state.rho)
            o_batch = perturb_and_clip(o_batch, state.rho)
            t = state.t + 1
            try:
                g_src = self.model.input_gradients(s_batch.data, target)
                o_labels = o_batch.labels if use_nonsource else target
                g_oth = self.model.input_gradients(o_batch.data, o_labels)
                delta = scaling_factor(g_src, g_oth)
            except NumericError as e:
                raise type(e)(f"iteration {t}: {e}") from e
            xi = combined_gradient(g_src, g_oth, delta)
            state = replace(state, t=t)
            state = update_moments(state, xi, self.beta1, self.beta2)
            step = bias_corrected_step(state.upsilon, state.omega, t,
                                       self.beta1, self.beta2)
            skipped = float(np.max(np.abs(step))) < STEP_EPS
            rho = state.rho if skipped else accumulate_step(state.rho, step)
            rho = project(rho, norm_eff, eta)
            state = replace(state, rho=rho)
            t_stage += 1

            if t_stage % self.eval_every == 0:
                last_ratio, last_max = self._evaluate(eval_batch, rho)
                if stage == "main" and last_ratio > self._best_ratio:
                    self._best_ratio, self._best_rho = last_ratio, rho.copy()
            history.append(IterationRecord(
                t=t, stage=stage, delta=float(delta),
                xi_norm=float(np.linalg.norm(xi)),
                fooling_ratio_train=last_ratio, max_nonsource_label=last_max,
                rho_l2=float(np.linalg.norm(rho)),
                rho_linf=float(np.max(np.abs(rho))) if rho.size else 0.0,
                step_skipped=skipped))
            if self.record_snapshots:
                snaps.append(rho.copy())
                snap_ts.append(t)

        if stage == "main":
            met = last_ratio >= self.stop_ratio and t_stage >= self.stage2_min_iters
        return state, last_ratio, met

    # -- application ------------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Apply the fitted perturbation: clip(X - rho) into the valid range."""
        check_is_fitted(self, "perturbation_")
        X = check_matrix(X)
        if X.shape[1] != self.perturbation_.size:
            raise ValidationError(
                f"expected {self.perturbation_.size} features, got {X.shape[1]}")
        lo, hi = self.model.value_range
        return np.clip(X - self.perturbation_, lo, hi)

    def predict(self, X) -> np.ndarray:
        """Victim predictions on the perturbed inputs."""
        return self.model.predict(self.transform(X))
