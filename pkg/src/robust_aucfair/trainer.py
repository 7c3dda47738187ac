"""Projected stochastic gradient descent-ascent for the robust AUC-fairness
Lagrangian, with sharpness-aware perturbation of the descent step.

Modes:

``robust``
    multipliers and adversarial pair distributions are both updated; each
    distribution is projected back onto its TV ball after the ascent step.
``non_robust``
    multipliers are updated but every pair distribution stays at its
    empirical reference (the constraint uses the noisy groups as-is).
``auc_max``
    plain pairwise AUC risk minimization; multipliers stay at zero.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import scorer
from .aucfair import group_auc_report, logistic_loss, surrogate_auc_risk
from .dataset import Batch, Dataset, stratified_sample
from .dro import GammaMatrix, PairDistribution, empirical_pair_weights, project_tv_ball
from .errors import DegeneratePairError, InvariantViolation, NumericError
from .scorer import MlpParams

log = logging.getLogger(__name__)

MODES = ("robust", "non_robust", "auc_max")
FEASIBILITY_TOL = 1e-8


@dataclass
class TrainConfig:
    eta_theta: float = 0.1
    eta_lambda: float = 0.25
    eta_p: float = 0.001
    nu: float = 0.001
    batch_size: int = 1000
    epochs: int = 100
    gamma: GammaMatrix | float = 0.1
    mode: str = "robust"
    seed: int = 0
    tau: float = 0.01
    hidden: tuple[int, int] = (64, 32)
    # False runs plain SGDA: no perturbation gradient is computed at all
    sam: bool = True
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("eta_theta", "eta_lambda", "eta_p"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.nu < 0 or self.tau < 0:
            raise ValueError("nu and tau must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.hidden = tuple(self.hidden)

    def gamma_matrix(self, m: int) -> GammaMatrix:
        if isinstance(self.gamma, GammaMatrix):
            if self.gamma.num_groups != m:
                raise ValueError(f"gamma matrix is {self.gamma.num_groups}x{self.gamma.num_groups}, data has {m} groups")
            return self.gamma
        return GammaMatrix.constant(m, float(self.gamma))


@dataclass
class HistoryRecord:
    epoch: int
    auc: float
    violation: float
    min_max: float
    objective: float
    feasible: bool
    max_gap: float
    lambdas: list
    aborted: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "auc": self.auc,
            "violation": self.violation,
            "min_max": self.min_max,
            "objective": self.objective,
            "feasible": self.feasible,
            "max_gap": self.max_gap,
            "lambdas": self.lambdas,
            "aborted": self.aborted,
        })

    @classmethod
    def from_dict(cls, d: dict) -> "HistoryRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TrainerState:
    params: MlpParams
    lambdas: np.ndarray
    pair_dists: dict[tuple[int, int], PairDistribution] = field(default_factory=dict)
    references: dict[tuple[int, int], PairDistribution] = field(default_factory=dict)
    batch_key: tuple[bytes, bytes] | None = None
    history: list[HistoryRecord] = field(default_factory=list)
    snapshots: dict[int, MlpParams] = field(default_factory=dict)

    @property
    def num_groups(self) -> int:
        return self.lambdas.shape[0]


def init_state(d: int, m: int, config: TrainConfig) -> TrainerState:
    params = scorer.init_params(d, config.hidden, rng=np.random.default_rng([config.seed, 0]))
    return TrainerState(params, np.zeros((m, m)))


def _active_pairs(batch: Batch, m: int) -> list[tuple[int, int]]:
    n_pos, n_neg = batch.group_counts(m)
    return [(z, zp) for z, zp in itertools.product(range(1, m + 1), repeat=2)
            if n_pos[z - 1] and n_neg[zp - 1]]


def _sync_pair_dists(state: TrainerState, batch: Batch) -> tuple[list[tuple[int, int]], bool]:
    """Reset every pair distribution to its reference unless the batch rows are
    unchanged. Returns the active group pairs and whether a reset happened."""
    pos_idx, neg_idx = batch.pos_idx, batch.neg_idx
    key = (pos_idx.tobytes(), neg_idx.tobytes())
    active = _active_pairs(batch, state.num_groups)
    if key == state.batch_key:
        return active, False
    state.batch_key = key
    state.references = {}
    state.pair_dists = {}
    pos_g, neg_g = batch.pos_groups, batch.neg_groups
    for pair in active:
        w = empirical_pair_weights(pos_g, neg_g, *pair)
        state.references[pair] = PairDistribution(w, pair, reference=True)
        state.pair_dists[pair] = PairDistribution(w.copy(), pair)
    return active, True


def _ascend_pair_dists(state: TrainerState, active, pair_matrix: np.ndarray, lambdas: np.ndarray,
                       eta_p: float, gamma: GammaMatrix) -> None:
    for pair in active:
        z, zp = pair
        stepped = state.pair_dists[pair].weights + eta_p * lambdas[z - 1, zp - 1] * pair_matrix
        state.pair_dists[pair] = project_tv_ball(
            PairDistribution(stepped, pair), state.references[pair], gamma.radius(z, zp)
        )


def _pair_weight_matrix(lambdas: np.ndarray, pair_dists: dict, shape: tuple[int, int]) -> np.ndarray | None:
    """``sum over pairs of lambda * (p_tilde - uniform)``, the weight each
    surrogate pair term receives in the constraint part of the Lagrangian."""
    total = None
    lam_sum = 0.0
    for (z, zp), dist in pair_dists.items():
        lam = lambdas[z - 1, zp - 1]
        if lam == 0.0:
            continue
        lam_sum += lam
        total = lam * dist.weights if total is None else total + lam * dist.weights
    if total is None:
        return None
    return total - lam_sum / (shape[0] * shape[1])


def lagrangian_terms(scores: np.ndarray, n_pos: int, weight: np.ndarray | None):
    """Value, score gradient and surrogate pair matrix of the batch Lagrangian.

    ``scores`` holds the positive rows first, then the negative rows.
    """
    pos, neg = scores[:n_pos], scores[n_pos:]
    margins = pos[:, None] - neg[None, :]
    count = margins.size
    pair_matrix = expit(margins)
    value = float(logistic_loss(margins).sum() / count)
    d_margin = -expit(-margins) / count
    if weight is not None:
        value += float(np.sum(weight * pair_matrix))
        d_margin = d_margin + weight * pair_matrix * (1.0 - pair_matrix)
    dscores = np.concatenate([d_margin.sum(axis=1), -d_margin.sum(axis=0)])
    return value, dscores, pair_matrix


def lagrangian_value(state: TrainerState, batch: Batch, scores) -> float:
    """Batch Lagrangian; ``scores`` are ordered positives then negatives as in
    ``batch.pos_idx`` / ``batch.neg_idx``. Pair distributions missing from the
    state (skipped pairs) contribute nothing."""
    n_pos = batch.pos_idx.size
    if n_pos == 0 or batch.neg_idx.size == 0:
        raise DegeneratePairError("batch needs at least one positive and one negative row")
    shape = (n_pos, batch.neg_idx.size)
    weight = _pair_weight_matrix(state.lambdas, state.pair_dists, shape)
    value = lagrangian_terms(np.asarray(scores, dtype=np.float64), n_pos, weight)[0]
    if not math.isfinite(value):
        raise NumericError(f"non-finite Lagrangian value {value}")
    return value


def sgda_iteration(state: TrainerState, batch: Batch, features: np.ndarray, config: TrainConfig,
                   gamma: GammaMatrix | None = None) -> TrainerState:
    """One descent step on the scorer and one ascent step on the multipliers
    and pair distributions. Mutates and returns ``state``.

    The state is left untouched if the Lagrangian or its gradient is non-finite.
    """
    pos_idx, neg_idx = batch.pos_idx, batch.neg_idx
    if pos_idx.size == 0 or neg_idx.size == 0:
        raise DegeneratePairError("batch needs at least one positive and one negative row")
    m = state.num_groups
    gamma = gamma if gamma is not None else config.gamma_matrix(m)
    x = features[np.concatenate([pos_idx, neg_idx])]
    n_pos = pos_idx.size
    shape = (n_pos, neg_idx.size)

    # with the whole training set as the batch the pair distributions persist
    full_batch = pos_idx.size + neg_idx.size == features.shape[0]
    active, weight = [], None
    if config.mode != "auc_max":
        active, fresh = _sync_pair_dists(state, batch)
        if fresh and not full_batch and config.mode == "robust" and state.lambdas.any():
            # a new mini-batch starts from the reference; take its one projected
            # ascent step at the current parameters so the descent sees it
            scores = scorer.forward(state.params, x)
            warm = expit(scores[:n_pos, None] - scores[None, n_pos:])
            _ascend_pair_dists(state, active, warm, state.lambdas, config.eta_p, gamma)
        weight = _pair_weight_matrix(state.lambdas, state.pair_dists, shape)

    last = {}

    def loss_fn(scores):
        value, dscores, pair_matrix = lagrangian_terms(scores, n_pos, weight)
        last["pair_matrix"] = pair_matrix
        return value, dscores

    perturbed = state.params
    if config.sam:
        _, g0 = scorer.value_and_grad(state.params, x, loss_fn)
        perturbed = scorer.sam_perturb(state.params, g0, config.nu)
    _, g1 = scorer.value_and_grad(perturbed, x, loss_fn)
    pair_matrix = last["pair_matrix"]
    new_params = scorer.sgd_step(state.params, g1, config.eta_theta)

    if config.mode != "auc_max":
        centre = pair_matrix.mean()
        lam_old = state.lambdas.copy()
        for z, zp in active:
            gap = float(np.sum(state.pair_dists[(z, zp)].weights * pair_matrix) - centre)
            state.lambdas[z - 1, zp - 1] = max(0.0, lam_old[z - 1, zp - 1] + config.eta_lambda * gap)
        if config.mode == "robust" and full_batch:
            _ascend_pair_dists(state, active, pair_matrix, lam_old, config.eta_p, gamma)
    state.params = new_params
    check_invariants(state, gamma)
    return state


def check_invariants(state: TrainerState, gamma: GammaMatrix) -> None:
    if np.any(state.lambdas < 0):
        raise InvariantViolation("negative Lagrange multiplier")
    for (z, zp), dist in state.pair_dists.items():
        w = dist.weights
        ref = state.references[(z, zp)].weights
        budget = 2.0 * gamma.radius(z, zp)
        if (w.min() < 0 or abs(w.sum() - 1.0) > FEASIBILITY_TOL
                or np.abs(w - ref).sum() > budget + FEASIBILITY_TOL):
            raise InvariantViolation(f"pair distribution ({z}, {zp}) left its TV ball")


def evaluate_epoch(params: MlpParams, data: Dataset, epoch: int, tau: float,
                   lambdas: np.ndarray, groups: np.ndarray | None = None,
                   aborted: bool = False) -> HistoryRecord:
    scores = scorer.forward(params, data.features)
    groups = data.noisy_groups if groups is None else groups
    report = group_auc_report(scores, data.labels, groups, data.num_groups)
    pos = scores[data.labels == 1]
    neg = scores[data.labels == -1]
    max_gap = report.max_gap()
    return HistoryRecord(
        epoch=epoch,
        auc=report.overall_auc,
        violation=report.violation(),
        min_max=report.min_max(),
        objective=surrogate_auc_risk(pos, neg),
        feasible=bool(max_gap <= tau),
        max_gap=max_gap,
        lambdas=lambdas.tolist(),
        aborted=aborted,
    )


def select_best_iterate(history: list[HistoryRecord], tau: float | None = None) -> HistoryRecord:
    """Lowest-objective feasible iterate; otherwise the one with the smallest
    worst-case gap. Earlier epochs win ties.

    With ``tau`` given, feasibility is recomputed from ``max_gap``.
    """
    if not history:
        raise ValueError("empty history")

    def feasible(r):
        return r.feasible if tau is None else r.max_gap <= tau

    candidates = [r for r in history if feasible(r)]
    if candidates:
        return min(candidates, key=lambda r: (r.objective, r.epoch))
    return min(history, key=lambda r: (r.max_gap, r.epoch))


@dataclass
class TrainResult:
    params: MlpParams
    history: list[HistoryRecord]
    best_epoch: int | None
    state: TrainerState

    def write_history(self, path) -> None:
        write_history(path, self.history)


def write_history(path, history: list[HistoryRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")


def read_history(path) -> list[HistoryRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [HistoryRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def train(train_ds: Dataset, val_ds: Dataset | None, config: TrainConfig) -> TrainResult:
    """Run ``config.epochs`` epochs and return the selected iterate.

    Each epoch draws ``ceil(n / b)`` stratified batches (unless
    ``steps_per_epoch`` is set) and then scores the validation split on the
    groups the learner observes (``noisy_groups``).
    """
    labels = set(np.unique(train_ds.labels).tolist())
    if labels != {1, -1}:
        raise ValueError("training split needs both classes")
    present = set(np.unique(train_ds.noisy_groups).tolist())
    if present != set(range(1, train_ds.num_groups + 1)):
        raise ValueError(f"training split lacks groups {sorted(set(range(1, train_ds.num_groups + 1)) - present)}")
    if val_ds is None or len(val_ds) == 0 or len(set(np.unique(val_ds.labels).tolist())) < 2:
        log.warning("validation split is empty or single-class; selecting on the training split")
        val_ds = train_ds

    m = train_ds.num_groups
    gamma = config.gamma_matrix(m)
    state = init_state(train_ds.features.shape[1], m, config)
    rng = np.random.default_rng([config.seed, 1])
    steps = config.steps_per_epoch or max(1, -(-len(train_ds) // config.batch_size))

    for epoch in range(1, config.epochs + 1):
        aborted = False
        for _ in range(steps):
            batch = stratified_sample(train_ds, config.batch_size, rng)
            try:
                sgda_iteration(state, batch, train_ds.features, config, gamma)
            except NumericError as exc:
                log.warning("epoch %d aborted: %s", epoch, exc)
                aborted = True
                break
        rec = evaluate_epoch(state.params, val_ds, epoch, config.tau, state.lambdas, aborted=aborted)
        state.history.append(rec)
        state.snapshots[epoch] = state.params.copy()

    if not state.history:
        return TrainResult(state.params.copy(), [], None, state)
    best = select_best_iterate(state.history, config.tau)
    return TrainResult(state.snapshots[best.epoch].copy(), state.history, best.epoch, state)
