"""Alternating adversarial optimization and the baseline training rules.

Adversarial variants (``br_net``, ``adv_mse``) run three phases per step:

1. minimize the classification loss over the extractor and classifier;
2. with the extractor frozen, update the bias predictor on its own loss;
3. with the bias predictor frozen, update the extractor to defeat it.

``vanilla`` runs phase 1 alone.  ``multi_task`` and ``zafar`` run a single
joint minimization.  Each phase owns its own Adam state.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from ._alloc import tune_allocator
from .autodiff import Adam, Tape, Tensor
from .errors import ContractViolation, NonFiniteError
from .nets import ArchitectureSpec, ModelParams, bp_forward, c_forward, init_params, leaves, rl_forward
from .synthdata import Dataset

log = logging.getLogger(__name__)

MIN_BATCH = 8
MIN_ADV_SAMPLES = 8
EVAL_CHUNK = 256

Conditioning = Union[str, tuple[int, ...]]


@dataclass(frozen=True)
class TrainConfig:
    variant: losses.LossVariant = field(default_factory=losses.LossVariant)
    batch_size: int = 64
    iterations: int = 5000
    lr_c: float = 1e-3
    lr_bp: float = 1e-3
    lr_adv: float = 1e-3
    conditioning: Conditioning = "all"
    seed: int = 0
    log_every: int = 25
    lambda_warmup: float = 0.0  # fraction of iterations for a linear ramp from 0

    def validate(self, n_classes: int = 2) -> "TrainConfig":
        if self.batch_size < MIN_BATCH:
            raise ContractViolation(f"batch_size must be >= {MIN_BATCH}, got {self.batch_size}")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if self.log_every < 1:
            raise ContractViolation("log_every must be >= 1")
        if not 0.0 <= self.lambda_warmup <= 1.0:
            raise ContractViolation("lambda_warmup must be a fraction in [0, 1]")
        for name in ("lr_c", "lr_bp", "lr_adv"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be > 0")
        if self.conditioning != "all":
            if not self.conditioning or any(not 0 <= c < n_classes for c in self.conditioning):
                raise ContractViolation(f"conditioning classes {self.conditioning} not within 0..{n_classes - 1}")
        return self

    def lam_at(self, iteration: int) -> float:
        """lambda for 1-based ``iteration``."""
        lam = self.variant.lam
        span = math.ceil(self.lambda_warmup * self.iterations)
        if span <= 0:
            return lam
        return lam * min(1.0, iteration / span)

    def with_variant(self, name: str, **kw) -> "TrainConfig":
        return replace(self, variant=replace(self.variant, name=losses.canonical_variant(name), **kw))


@dataclass
class IterationLog:
    iteration: int
    loss_c: float
    loss_adv: Optional[float]
    bacc: float
    dcor2: list[float]
    mi: list[float]
    grad_norms: dict[str, float] = field(default_factory=dict)
    adv_skipped: int = 0


@dataclass
class StepResult:
    loss_c: float
    loss_adv: Optional[float] = None
    grad_norms: dict[str, float] = field(default_factory=dict)
    adv_skipped: bool = False


class TrainingDivergence(NonFiniteError):
    """A loss went non-finite.  Carries the last logged parameters."""

    def __init__(self, message: str, phase: str, iteration: int,
                 last_good: Optional[ModelParams] = None, logs: Optional[list] = None):
        super().__init__(message)
        self.phase = phase
        self.iteration = iteration
        self.last_good = last_good
        self.logs = logs or []


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    protected: np.ndarray  # [B, k]

    @classmethod
    def of(cls, ds: Dataset, idx=None) -> "Batch":
        if idx is None:
            return cls(ds.images, ds.labels, ds.protected)
        return cls(ds.images[idx], ds.labels[idx], ds.protected[idx])


@dataclass
class TrainState:
    params: ModelParams
    opt_c: Adam
    opt_bp: Adam
    opt_adv: Adam
    iteration: int = 0

    @classmethod
    def fresh(cls, params: ModelParams, config: TrainConfig) -> "TrainState":
        return cls(params, Adam(lr=config.lr_c), Adam(lr=config.lr_bp), Adam(lr=config.lr_adv))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of shuffled batches; each epoch drops its remainder."""
    if batch_size > n:
        raise ContractViolation(f"batch_size {batch_size} exceeds dataset size {n}")
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def adversarial_groups(labels: np.ndarray, conditioning: Conditioning) -> list[np.ndarray]:
    """Row sets over which the adversarial statistic is computed."""
    if conditioning == "all":
        return [np.arange(len(labels))]
    return [np.flatnonzero(labels == c) for c in conditioning]


def _grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def _check(loss: Tensor, phase: str, iteration: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergence(f"non-finite {phase} loss at iteration {iteration}", phase, iteration)
    return value


def _prefixed(**sets: dict) -> dict[str, np.ndarray]:
    return {f"{p}/{k}": v for p, s in sets.items() for k, v in s.items()}


def _bias_loss(variant: losses.LossVariant, b: Tensor, b_hat: Tensor,
               groups: list[np.ndarray]) -> Optional[Tensor]:
    """Sum of the bias predictor's loss over groups with enough samples."""
    fn = (lambda t, h: losses.adv_corr_loss(t, h, variant.eps_std)) if variant.name == "br_net" \
        else losses.adv_mse_loss
    total = None
    for g in groups:
        if len(g) < MIN_ADV_SAMPLES:
            continue
        term = fn(ad.take_rows(b, g), ad.take_rows(b_hat, g))
        total = term if total is None else total + term
    return total


def _zafar_term(variant: losses.LossVariant, b: Tensor, logits: Tensor,
                groups: list[np.ndarray]) -> Optional[Tensor]:
    total = None
    for g in groups:
        if len(g) < MIN_ADV_SAMPLES:
            continue
        term = losses.zafar_penalty(ad.take_rows(b, g), ad.take_rows(logits, g), variant.eps_std)
        total = term if total is None else total + term
    return total


def _step_update(opt: Adam, named: dict[str, np.ndarray], tensors: dict[str, Tensor],
                 tape: Tape, loss: Tensor) -> float:
    names = list(named)
    grads = ad.backward(tape, loss, [tensors[k] for k in names])
    opt.step(named, dict(zip(names, grads)))
    return _grad_norm(grads)


def train_step(batch: Batch, state: TrainState, config: TrainConfig) -> StepResult:
    """One optimization step; mutates ``state`` in place.

    Any non-finite value surfaces as :class:`TrainingDivergence` naming the
    phase it appeared in.
    """
    tracker = _PhaseTracker()
    try:
        return _train_step(batch, state, config, tracker)
    except TrainingDivergence:
        raise
    except NonFiniteError as exc:
        raise TrainingDivergence(
            f"non-finite value in {tracker.phase} phase at iteration {state.iteration}: {exc}",
            tracker.phase, state.iteration,
        ) from exc


@dataclass
class _PhaseTracker:
    phase: str = "classification"


def _train_step(batch: Batch, state: TrainState, config: TrainConfig, tracker: _PhaseTracker) -> StepResult:
    state.iteration += 1
    it = state.iteration
    variant = config.variant
    spec = state.params.spec
    p = state.params
    lam = config.lam_at(it)
    x = Tensor(batch.images)
    b = Tensor(batch.protected)
    groups = adversarial_groups(batch.labels, config.conditioning)
    result = StepResult(loss_c=float("nan"))

    rl_t, c_t = leaves(p.theta_rl), leaves(p.theta_c)
    joint = variant.name in ("multi_task", "zafar")
    if joint:
        tracker.phase = "joint"
    bp_t = leaves(p.theta_bp) if variant.name == "multi_task" else None

    # phase 1 (or the single joint phase)
    with Tape() as tape:
        feats = rl_forward(x, rl_t, spec)
        logits = c_forward(feats, c_t, spec)
        loss_c = losses.classification_loss(logits, batch.labels)
        extra = None
        if variant.name == "multi_task":
            extra = _bias_loss(variant, b, bp_forward(feats, bp_t, spec), groups)
        elif variant.name == "zafar":
            extra = _zafar_term(variant, b, logits, groups)
        loss = loss_c if extra is None else losses.total_objective(variant, loss_c, extra, lam)[0]
    result.loss_c = _check(loss_c, "classification", it)
    if joint:
        if extra is None:
            result.adv_skipped = True
        else:
            result.loss_adv = _check(extra, "joint", it)
        sets = {"rl": p.theta_rl, "c": p.theta_c}
        tens = _prefixed(rl=rl_t, c=c_t)
        if bp_t is not None:
            sets["bp"] = p.theta_bp
            tens.update(_prefixed(bp=bp_t))
        result.grad_norms["joint"] = _step_update(state.opt_c, _prefixed(**sets), tens, tape, loss)
        return result
    result.grad_norms["classification"] = _step_update(
        state.opt_c, _prefixed(rl=p.theta_rl, c=p.theta_c), _prefixed(rl=rl_t, c=c_t), tape, loss_c
    )
    if not variant.adversarial:
        return result

    # features after the phase-1 update, shared by phases 2 and 3
    rl_t = leaves(p.theta_rl)
    rl_tape = Tape()
    with rl_tape:
        feats = rl_forward(x, rl_t, spec)

    # phase 2: bias predictor on frozen features
    tracker.phase = "bias-predictor"
    bp_t = leaves(p.theta_bp)
    with Tape() as tape:
        bp_loss = _bias_loss(variant, b, bp_forward(feats.detach(), bp_t, spec), groups)
    if bp_loss is None:
        result.adv_skipped = True
        return result
    result.loss_adv = _check(bp_loss, "bias-predictor", it)
    result.grad_norms["bias_predictor"] = _step_update(
        state.opt_bp, dict(p.theta_bp), bp_t, tape, bp_loss
    )

    # phase 3: extractor against the updated, frozen bias predictor
    if lam == 0.0:
        return result
    tracker.phase = "adversarial"
    with rl_tape:
        adv = _bias_loss(variant, b, bp_forward(feats, p.theta_bp, spec), groups)
        loss3 = losses.rl_adversarial_term(variant, adv, lam)
    _check(loss3, "adversarial", it)
    result.grad_norms["adversarial"] = _step_update(state.opt_adv, dict(p.theta_rl), rl_t, rl_tape, loss3)
    return result


def evaluate(params: ModelParams, dataset: Dataset, chunk: int = EVAL_CHUNK):
    """(predicted labels, class probabilities, features) without recording a tape."""
    spec = params.spec
    feats, logits = [], []
    for start in range(0, len(dataset), chunk):
        f = rl_forward(Tensor(dataset.images[start:start + chunk]), params.theta_rl, spec)
        feats.append(f.data)
        logits.append(c_forward(f, params.theta_c, spec).data)
    features = np.concatenate(feats)
    probs = ad.softmax(np.concatenate(logits))
    return probs.argmax(axis=1), probs, features


def _positive_prob(probs: np.ndarray) -> np.ndarray:
    return probs[:, 1]


def full_dataset_log(
    params: ModelParams, dataset: Dataset, config: TrainConfig, iteration: int
) -> IterationLog:
    """Training-set metrics at the current parameters."""
    spec = params.spec
    try:
        _, probs, features = evaluate(params, dataset)
    except NonFiniteError as exc:
        raise TrainingDivergence(f"non-finite evaluation at iteration {iteration}: {exc}",
                                 "evaluation", iteration) from exc
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(probs))):
        raise TrainingDivergence(f"non-finite features at iteration {iteration}", "evaluation", iteration)
    labels = dataset.labels.astype(int)
    onehot = np.eye(spec.n_classes)[labels]
    loss_c = float(-np.mean(np.sum(onehot * np.log(np.clip(probs, 1e-300, None)), axis=1)))
    if spec.n_classes == 2:
        bacc = metrics.classification_report(_positive_prob(probs), labels)[0]
    else:
        bacc = metrics.balanced_accuracy(probs.argmax(axis=1), labels)
    variant = config.variant
    groups = adversarial_groups(labels, config.conditioning)
    b = Tensor(dataset.protected)
    loss_adv = None
    f_t = Tensor(features)
    if variant.name in ("br_net", "adv_mse", "multi_task"):
        term = _bias_loss(variant, b, bp_forward(f_t, params.theta_bp, spec), groups)
        loss_adv = None if term is None else term.item()
    elif variant.name == "zafar":
        logits = Tensor(np.log(np.clip(probs, 1e-300, None)))
        term = _zafar_term(variant, b, logits, groups)
        loss_adv = None if term is None else term.item()
    dc, mi = [], []
    prot = dataset.protected
    for j in range(prot.shape[1]):
        dcs, mis = [], []
        for g in groups:
            if len(g) < MIN_ADV_SAMPLES:
                continue
            dcs.append(metrics.dcor2(features[g], prot[g, j]))
            mis.append(max(metrics.MI_LOG_FLOOR, metrics.mutual_info_knn(features[g], prot[g, j])))
        dc.append(float(np.mean(dcs)) if dcs else float("nan"))
        mi.append(float(np.mean(mis)) if mis else float("nan"))
    return IterationLog(iteration, loss_c, loss_adv, float(bacc), dc, mi)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, batch_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(batch_ss)


def train(
    dataset: Dataset,
    config: TrainConfig,
    spec: Optional[ArchitectureSpec] = None,
    on_log: Optional[Callable[[IterationLog], None]] = None,
) -> tuple[ModelParams, list[IterationLog]]:
    """Train from a seeded initialization; logs every ``config.log_every`` steps."""
    tune_allocator()
    n, _, h, w = dataset.images.shape
    spec = spec or ArchitectureSpec(input_hw=(h, w), n_protected=dataset.protected.shape[1])
    config.validate(spec.n_classes)
    init_rng, batch_rng = _streams(config.seed)
    state = TrainState.fresh(init_params(spec, init_rng), config)
    batches = epoch_batches(n, config.batch_size, batch_rng)
    logs: list[IterationLog] = []
    last_good = state.params.copy()
    norms: dict[str, float] = {}
    skipped = 0
    for _ in range(config.iterations):
        idx = next(batches)
        try:
            step = train_step(Batch.of(dataset, idx), state, config)
        except TrainingDivergence as exc:
            exc.last_good, exc.logs = last_good, logs
            raise
        norms = step.grad_norms
        skipped += step.adv_skipped
        if state.iteration % config.log_every == 0:
            entry = full_dataset_log(state.params, dataset, config, state.iteration)
            entry.grad_norms = dict(norms)
            entry.adv_skipped = skipped
            skipped = 0
            logs.append(entry)
            last_good = state.params.copy()
            if on_log is not None:
                on_log(entry)
            log.debug("iter %d loss_c=%.4f bacc=%.4f dcor2=%s", entry.iteration, entry.loss_c,
                      entry.bacc, entry.dcor2)
    return state.params, logs


def fit_bias_predictor(
    features: np.ndarray,
    protected: np.ndarray,
    spec: ArchitectureSpec = ArchitectureSpec(),
    seed: int = 0,
    iterations: int = 3000,
    lr: float = 1e-2,
    eps_std: float = losses.DEFAULT_EPS_STD,
) -> tuple[dict[str, np.ndarray], float]:
    """Train fresh bias predictors on frozen features and score them out of sample.

    The samples are split into two random halves; a predictor is trained
    full-batch on each half and scored on the other. Returns the parameters
    fitted on the first half and the mean held-out ``sum_k corr^2(b_k, b_hat_k)``.
    Scoring in-sample would reward memorization rather than recoverable signal.
    Features are standardized first so the fixed learning rate suits any
    feature scale.
    """
    tune_allocator()
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2 * MIN_ADV_SAMPLES:
        raise ContractViolation(f"need at least {2 * MIN_ADV_SAMPLES} feature rows, got shape {feats.shape}")
    mu, sd = feats.mean(axis=0), feats.std(axis=0)
    feats = (feats - mu) / np.where(sd > 0, sd, 1.0)
    b_all = np.asarray(protected, dtype=np.float64).reshape(len(feats), -1)
    bp_spec = replace(spec, n_protected=b_all.shape[1])
    perm = np.random.default_rng(seed).permutation(len(feats))
    halves = np.array_split(perm, 2)
    scores, first = [], None
    for fold, (fit_idx, score_idx) in enumerate((halves, halves[::-1])):
        theta = _fit_bp(feats[fit_idx], b_all[fit_idx], bp_spec, seed + fold, iterations, lr, eps_std)
        h = bp_forward(Tensor(feats[score_idx]), theta, bp_spec)
        scores.append(losses.sum_corr_sq(Tensor(b_all[score_idx]), h, eps_std).item())
        first = theta if first is None else first
    return first, float(np.mean(scores))


def _fit_bp(feats, b, spec, seed, iterations, lr, eps_std):
    theta = init_params(spec, seed).theta_bp
    opt = Adam(lr=lr)
    f_t, b_t = Tensor(feats), Tensor(b)
    for _ in range(iterations):
        p_t = leaves(theta)
        with Tape() as tape:
            loss = losses.adv_corr_loss(b_t, bp_forward(f_t, p_t, spec), eps_std)
        opt.step(theta, dict(zip(p_t, ad.backward(tape, loss, list(p_t.values())))))
    return theta
