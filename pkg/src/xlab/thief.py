"""The attacker: query selection over a proxy pool and substitute training.

``run_attack`` spends the budget in rounds. The first round is always a
uniform random batch; later rounds use the configured strategy, scored by
the substitute trained on everything labeled so far. The substitute is
retrained from scratch after every round.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .errors import BudgetExhausted, ConfigError, StateError
from .modelzoo import TRAINING_MODES, Backbone, ComposedModel, extract_features, predict, train_model
from .numcore import RngStream, SgdHyper, as_matrix

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "entropy", "kcenter")
KCENTER_SPACES = ("probs", "features")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "random"
    rounds: int = 1
    per_round: int | None = None  # None: budget // rounds, remainder to the last round

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.kind == "random" and self.rounds != 1:
            raise ConfigError("random selection is single-shot (rounds=1)")

    def round_sizes(self, budget: int) -> list[int]:
        if self.per_round is None:
            base = budget // self.rounds
            sizes = [base] * self.rounds
            sizes[-1] += budget - base * self.rounds
        else:
            sizes = [self.per_round] * self.rounds
        if sum(sizes) > budget:
            raise ConfigError(f"{self.rounds} rounds of {self.per_round} exceed budget {budget}")
        if min(sizes) < 1:
            raise ConfigError("every round must select at least one sample")
        return sizes


def default_strategy(kind: str, rounds: int = 5) -> SelectionStrategy:
    return SelectionStrategy(kind, 1 if kind == "random" else rounds)


@dataclass(frozen=True, eq=False)
class AttackConfig:
    budget: int
    strategy: SelectionStrategy
    thief_backbone: Backbone
    thief_training_mode: str
    hyper: SgdHyper
    seed: int
    epochs: int = 100
    batch_size: int = 32
    kcenter_space: str = "probs"

    def __post_init__(self):
        if self.budget < 10:
            raise ConfigError("budget must be at least 10 to leave a validation slice")
        if self.thief_training_mode not in TRAINING_MODES:
            raise ConfigError(f"unknown training mode {self.thief_training_mode!r}")
        if self.kcenter_space not in KCENTER_SPACES:
            raise ConfigError(f"unknown k-center space {self.kcenter_space!r}")
        self.strategy.round_sizes(self.budget)


@dataclass
class AttackTranscript:
    queried_indices: list[int] = field(default_factory=list)
    returned_labels: list[int] = field(default_factory=list)
    query_rounds: list[int] = field(default_factory=list)
    per_round_validation_accuracy: list[float] = field(default_factory=list)
    total_spent: int = 0
    truncated: bool = False

    def record(self, round_no, indices, labels):
        self.queried_indices.extend(int(i) for i in indices)
        self.returned_labels.extend(int(v) for v in labels)
        self.query_rounds.extend([round_no] * len(indices))
        self.total_spent += len(indices)

    def save_csv(self, path) -> None:
        """Columns ``round, index, label, spent`` (``spent`` is cumulative)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "index", "label", "spent"])
            for k, (r, i, lab) in enumerate(zip(self.query_rounds, self.queried_indices, self.returned_labels), 1):
                writer.writerow([r, i, lab, k])


def load_transcript(path) -> AttackTranscript:
    t = AttackTranscript()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t.record(int(row["round"]), [int(row["index"])], [int(row["label"])])
    return t


# -- selection strategies -------------------------------------------------------


def select_random(pool: Dataset, n: int, rng: RngStream, exclude=()) -> np.ndarray:
    """Uniform sample of ``n`` pool indices without replacement, skipping ``exclude``."""
    candidates = np.setdiff1d(np.arange(len(pool)), np.asarray(list(exclude), dtype=np.int64))
    if n > candidates.size:
        raise ConfigError(f"cannot draw {n} samples from {candidates.size} candidates")
    return candidates[rng.choice(candidates.size, n)]


def prediction_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def select_entropy(pool: Dataset, substitute: ComposedModel, n: int, already=()) -> np.ndarray:
    """The ``n`` unqueried indices with the highest substitute prediction entropy.

    Ties go to the lower index.
    """
    if not substitute.trained:
        raise StateError("entropy selection needs a trained substitute")
    mask = np.ones(len(pool), dtype=bool)
    mask[np.asarray(list(already), dtype=np.int64)] = False
    candidates = np.flatnonzero(mask)
    if n > candidates.size:
        raise ConfigError(f"cannot select {n} of {candidates.size} unqueried samples")
    h = prediction_entropy(predict(substitute, pool.features[candidates], "soft"))
    order = np.lexsort((candidates, -h))
    return candidates[order[:n]]


def select_kcenter(pool_features, selected_features, n: int) -> np.ndarray:
    """Greedy farthest-first traversal.

    Each step picks the pool row farthest (Euclidean) from its nearest
    selected row, then adds it to the selected set. Ties go to the lower index.
    Returns indices into ``pool_features``.
    """
    pool = as_matrix(pool_features, "pool_features")
    chosen = as_matrix(selected_features, "selected_features") if np.size(selected_features) else np.empty((0, pool.shape[1]))
    if chosen.shape[0] == 0:
        raise StateError("k-center selection needs at least one selected point")
    if n > pool.shape[0]:
        raise ConfigError(f"cannot select {n} of {pool.shape[0]} pool rows")
    nearest = np.full(pool.shape[0], np.inf)
    for row in chosen:
        nearest = np.minimum(nearest, np.sqrt(((pool - row) ** 2).sum(axis=1)))
    picked = []
    taken = np.zeros(pool.shape[0], dtype=bool)
    for _ in range(n):
        scores = np.where(taken, -np.inf, nearest)
        best = int(np.argmax(scores))
        picked.append(best)
        taken[best] = True
        nearest = np.minimum(nearest, np.sqrt(((pool - pool[best]) ** 2).sum(axis=1)))
    return np.asarray(picked, dtype=np.int64)


# -- attack loop -------------------------------------------------------------------


def _labels_from(response):
    arr = np.asarray(response)
    if arr.ndim == 2:  # soft-label victim: train on its argmax
        return np.argmax(arr, axis=1).astype(np.int64)
    return arr.astype(np.int64)


def _query(client, pool, indices, transcript, round_no):
    """Query ``indices``; on budget exhaustion fall back to whatever budget is left."""
    try:
        labels = _labels_from(client.query(pool.features[indices]))
    except BudgetExhausted as exc:
        transcript.truncated = True
        remaining = exc.remaining if exc.remaining is not None else client.remaining()
        if not remaining:
            return False
        indices = indices[:remaining]
        try:
            labels = _labels_from(client.query(pool.features[indices]))
        except BudgetExhausted:
            return False
    transcript.record(round_no, indices, labels)
    return not transcript.truncated


def run_attack(config: AttackConfig, client, pool: Dataset) -> tuple[ComposedModel, AttackTranscript]:
    """Steal ``client``'s behaviour using unlabeled ``pool`` rows.

    ``client`` is anything with ``query(batch)`` and ``num_classes`` (an
    in-process ``VictimEndpoint`` or a ``RemoteClient``). Returns the
    substitute trained on all labels obtained plus the transcript.
    """
    if len(pool) < config.budget:
        raise ConfigError(f"pool of {len(pool)} is smaller than the budget {config.budget}")
    num_classes = int(client.num_classes)
    rng = RngStream(config.seed, ("attack",))
    sizes = config.strategy.round_sizes(config.budget)
    transcript = AttackTranscript()
    substitute = None
    for round_no, size in enumerate(sizes):
        already = transcript.queried_indices
        if round_no == 0 or config.strategy.kind == "random":
            picks = select_random(pool, size, rng.child("select", round_no), exclude=already)
        elif config.strategy.kind == "entropy":
            picks = select_entropy(pool, substitute, size, already)
        else:
            picks = _kcenter_round(pool, substitute, size, already, config.kcenter_space)
        keep_going = _query(client, pool, picks, transcript, round_no)
        if transcript.total_spent:
            labeled = Dataset(pool.features[transcript.queried_indices], transcript.returned_labels, num_classes)
            substitute, report = train_model(
                config.thief_backbone,
                labeled,
                config.thief_training_mode,
                config.hyper,
                config.epochs,
                rng.child("train", round_no),
                config.batch_size,
            )
            transcript.per_round_validation_accuracy.append(report.best_validation_accuracy)
            logger.debug("round %d: %d labels, val acc %.4f", round_no, transcript.total_spent,
                         report.best_validation_accuracy)
        if not keep_going:
            break
    if substitute is None:
        raise StateError("no labels were obtained; the victim budget was already exhausted")
    return substitute, transcript


def _kcenter_round(pool, substitute, size, already, space):
    mask = np.ones(len(pool), dtype=bool)
    mask[np.asarray(already, dtype=np.int64)] = False
    candidates = np.flatnonzero(mask)
    if space == "probs":
        embed = predict(substitute, pool.features, "soft")
    else:
        embed = extract_features(substitute.backbone, pool.features)
    local = select_kcenter(embed[candidates], embed[np.asarray(already, dtype=np.int64)], size)
    return candidates[local]
