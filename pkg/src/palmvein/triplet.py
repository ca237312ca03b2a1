"""Triplet objective with adaptive margin and online hard-negative mining.

The matching head is trained on triplets (anchor, positive, hard negative):
the loss is a hinge on squared embedding distances, the margin grows
linearly over training, and negatives are mined per anchor from a seeded
random subset of other subjects' samples, keeping only candidates that
currently violate the margin.

A training dataset is a mapping ``subject_id -> sequence of multi-channel
images`` (each ``[C, H, W]`` float32).  The per-subject sample lists may
include augmented copies; the sampler treats every list entry as one more
pose of that subject.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .fe import FEModel, embed, embed_batch, fe_apply, set_trainable
from .optim import Adam
from .tensor import Tensor, backward, relu

__all__ = [
    "MarginSchedule",
    "MiningResult",
    "StepLog",
    "Triplet",
    "TripletBatch",
    "TripletHyper",
    "build_batch",
    "margin_at",
    "mine_hard_negatives",
    "read_training_log",
    "squared_distance",
    "train_triplet",
    "triplet_loss",
    "triplet_loss_batch",
    "write_training_log",
]

logger = logging.getLogger(__name__)

_TAG_MINE = 0x4D1E
_TAG_BATCH = 0xBA7C

#: ``subject_id -> list of [C, H, W] images`` (augmented copies allowed).
Dataset = Mapping[int, Sequence[np.ndarray]]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Triplet:
    """Sample references: (subject_id, sample_index) per corner."""

    anchor: tuple[int, int]
    positive: tuple[int, int]
    negative: tuple[int, int]
    #: True when the negative violated the margin at mining time; False means
    #: it is the hardest-available fallback.
    violator: bool = True

    def __post_init__(self) -> None:
        if self.anchor[0] != self.positive[0]:
            raise ContractError("anchor and positive must share a subject")
        if self.anchor[1] == self.positive[1]:
            raise ContractError("anchor and positive must be different samples")
        if self.negative[0] == self.anchor[0]:
            raise ContractError("negative must come from a different subject")


@dataclass(frozen=True)
class MarginSchedule:
    """Linear margin ramp hitting both endpoints exactly."""

    total_steps: int
    m_start: float = 0.2
    m_end: float = 0.5

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.m_start <= self.m_end:
            raise ConfigError(
                f"need 0 <= m_start <= m_end, got {self.m_start}, {self.m_end}")


@dataclass(frozen=True)
class TripletBatch:
    triplets: tuple[Triplet, ...]
    #: margin in force when the batch was mined
    margin: float
    #: candidates examined / margin violators found while mining this batch
    checked: int
    violators: int

    @property
    def violator_rate(self) -> float:
        return self.violators / self.checked if self.checked else 0.0


@dataclass(frozen=True)
class MiningResult:
    #: indices into the candidate pool, ascending by distance (ties: low index)
    negatives: tuple[int, ...]
    distances: tuple[float, ...]
    #: True when no candidate violated the margin and the single hardest
    #: candidate was returned instead
    fallback: bool
    #: the seeded pool subset that was examined
    subset: tuple[int, ...]
    checked: int
    violators: int


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance between two embedding vectors (differentiable)."""
    if a.shape != b.shape or len(a.shape) != 1:
        raise DimensionError(
            f"squared_distance expects equal 1-D vectors, got {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).sum()


def triplet_loss(a: Tensor, p: Tensor, hn: Tensor, margin: float) -> Tensor:
    """Hinge loss ``0.5 * max(0, margin + J_p - J_hn)`` on squared distances.

    Exactly zero, with zero gradient, whenever ``J_hn - J_p >= margin``.
    """
    if margin < 0:
        raise ContractError(f"margin must be non-negative, got {margin}")
    j_p = squared_distance(a, p)
    j_hn = squared_distance(a, hn)
    return relu((j_p + margin) - j_hn) * 0.5


def triplet_loss_batch(ea: Tensor, ep: Tensor, ehn: Tensor,
                       margin: float) -> Tensor:
    """Mean triplet loss over row-aligned embedding batches ``[N, d]``."""
    if margin < 0:
        raise ContractError(f"margin must be non-negative, got {margin}")
    if not (ea.shape == ep.shape == ehn.shape) or len(ea.shape) != 2:
        raise DimensionError(
            f"expected matching [N,d] batches, got {ea.shape}, {ep.shape}, {ehn.shape}")
    dp = ea - ep
    dn = ea - ehn
    j_p = (dp * dp).sum(axis=1)
    j_hn = (dn * dn).sum(axis=1)
    return relu((j_p + margin) - j_hn).mean() * 0.5


def margin_at(step: int, schedule: MarginSchedule) -> float:
    """Margin in force at ``step``; out-of-range steps clamp to the endpoints."""
    if step <= 0:
        if step < 0:
            logger.warning("margin_at: step %d < 0 clamped to 0", step)
        return schedule.m_start
    if step >= schedule.total_steps:
        if step > schedule.total_steps:
            logger.warning("margin_at: step %d > %d clamped", step,
                           schedule.total_steps)
        return schedule.m_end
    frac = step / schedule.total_steps
    return schedule.m_start + (schedule.m_end - schedule.m_start) * frac


# ---------------------------------------------------------------------------
# Mining
# ---------------------------------------------------------------------------


def mine_hard_negatives(
    fe: FEModel,
    anchor: np.ndarray,
    pool: np.ndarray | Sequence[np.ndarray],
    j_p: float,
    margin: float,
    *,
    k: int = 1,
    seed: int = 0,
    subset_size: int = 32,
    pool_embeddings: np.ndarray | None = None,
    anchor_embedding: np.ndarray | None = None,
) -> MiningResult:
    """Scan a seeded random pool subset for margin-violating negatives.

    A candidate at squared distance ``J_hn`` from the anchor violates the
    margin when ``J_hn < j_p + margin``.  Returns up to ``k`` violators
    sorted ascending by distance (ties broken by pool index); when none
    violate, the single hardest (smallest-distance) candidate is returned
    with ``fallback=True``.

    ``pool_embeddings``/``anchor_embedding`` allow a caller that has already
    embedded the samples under the current weights to skip re-embedding.
    """
    n = len(pool)
    if n == 0:
        raise ContractError("candidate pool is empty")
    if k < 1 or subset_size < 1:
        raise ContractError(f"k and subset_size must be >= 1, got {k}, {subset_size}")
    if margin < 0:
        raise ContractError(f"margin must be non-negative, got {margin}")

    rng = np.random.default_rng([seed, _TAG_MINE])
    subset = rng.choice(n, size=min(subset_size, n), replace=False)

    if anchor_embedding is None:
        anchor_embedding = embed(fe, anchor)
    if pool_embeddings is not None:
        cand = np.asarray(pool_embeddings)[subset]
    else:
        stack = pool if isinstance(pool, np.ndarray) else np.stack(pool)
        cand = embed_batch(fe, stack[subset])

    dists = ((cand - anchor_embedding[None, :]) ** 2).sum(axis=1)
    order = np.lexsort((subset, dists))  # ascending distance, then pool index
    violating = dists[order] < j_p + margin
    n_viol = int(violating.sum())

    if n_viol == 0:
        logger.info("mine_hard_negatives: no violator (j_p=%.4f, margin=%.3f); "
                    "falling back to hardest candidate", j_p, margin)
        chosen = order[:1]
        fallback = True
    else:
        chosen = order[:min(k, n_viol)]
        fallback = False

    return MiningResult(
        negatives=tuple(int(subset[i]) for i in chosen),
        distances=tuple(float(dists[i]) for i in chosen),
        fallback=fallback,
        subset=tuple(int(i) for i in subset),
        checked=int(subset.size),
        violators=n_viol,
    )


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------


def _validate_dataset(dataset: Dataset) -> None:
    rich = [sid for sid, samples in dataset.items() if len(samples) >= 2]
    if len(rich) < 2:
        raise ContractError(
            "triplet training needs >= 2 subjects with >= 2 samples each")


def build_batch(
    dataset: Dataset,
    fe: FEModel,
    schedule: MarginSchedule,
    step: int,
    batch_size: int = 90,
    seed: int = 0,
    subset_size: int = 32,
) -> TripletBatch:
    """Mine one batch of triplets under the margin in force at ``step``.

    Every distinct dataset sample is embedded once under the current
    weights; per-slot mining then reuses those embeddings.
    """
    _validate_dataset(dataset)
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    margin = margin_at(step, schedule)

    keys = [(sid, i) for sid in sorted(dataset) for i in range(len(dataset[sid]))]
    row_of = {key: r for r, key in enumerate(keys)}
    table = embed_batch(fe, np.stack([dataset[sid][i] for sid, i in keys]))

    eligible = np.array([sid for sid in sorted(dataset) if len(dataset[sid]) >= 2])
    pools = {}  # anchor sid -> (pool keys, pool embedding rows)
    rng = np.random.default_rng([seed, _TAG_BATCH, step])

    triplets = []
    checked = violators = 0
    for _ in range(batch_size):
        sid = int(rng.choice(eligible))
        a_idx, p_idx = (int(i) for i in
                        rng.choice(len(dataset[sid]), size=2, replace=False))
        e_a = table[row_of[(sid, a_idx)]]
        e_p = table[row_of[(sid, p_idx)]]
        j_p = float(((e_a - e_p) ** 2).sum())

        if sid not in pools:
            pool_keys = [key for key in keys if key[0] != sid]
            pools[sid] = (pool_keys, table[[row_of[key] for key in pool_keys]])
        pool_keys, pool_rows = pools[sid]

        res = mine_hard_negatives(
            fe, dataset[sid][a_idx], pool_rows, j_p, margin,
            k=1, seed=int(rng.integers(2 ** 31)), subset_size=subset_size,
            pool_embeddings=pool_rows, anchor_embedding=e_a)
        checked += res.checked
        violators += res.violators
        triplets.append(Triplet(
            anchor=(sid, a_idx),
            positive=(sid, p_idx),
            negative=pool_keys[res.negatives[0]],
            violator=not res.fallback,
        ))

    return TripletBatch(tuple(triplets), margin, checked, violators)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TripletHyper:
    batch_size: int = 90
    lr: float = 1e-3
    seed: int = 0
    subset_size: int = 32
    #: steps per stabilization window ("epoch" for the frozen-phase test)
    stabilize_window: int = 10
    #: relative change of window-mean loss counted as stable
    stabilize_tol: float = 0.02
    #: consecutive stable windows required to unfreeze the trunk
    stabilize_patience: int = 3
    #: hard cap on frozen-phase windows
    stabilize_cap: int = 20


@dataclass(frozen=True)
class StepLog:
    step: int
    loss: float
    margin: float
    violator_rate: float
    phase: str  # "frozen" | "full"


def train_triplet(
    fe: FEModel,
    dataset: Dataset,
    schedule: MarginSchedule,
    hyper: TripletHyper = TripletHyper(),
) -> list[StepLog]:
    """Staged triplet training: frozen trunk until the head stabilizes.

    The trunk starts frozen and unfreezes once the window-mean loss changes
    by less than ``stabilize_tol`` for ``stabilize_patience`` consecutive
    windows, or after ``stabilize_cap`` windows, whichever comes first.
    Training leaves the whole model trainable.
    """
    _validate_dataset(dataset)
    set_trainable(fe, trunk=False, head=True)
    opt = Adam(fe.params, lr=hyper.lr)

    log: list[StepLog] = []
    phase = "frozen"
    window: list[float] = []
    prev_mean: float | None = None
    stable = windows_done = 0

    for step in range(schedule.total_steps):
        batch = build_batch(dataset, fe, schedule, step,
                            batch_size=hyper.batch_size, seed=hyper.seed,
                            subset_size=hyper.subset_size)
        anchors = np.stack([dataset[s][i] for s, i in
                            (t.anchor for t in batch.triplets)])
        positives = np.stack([dataset[s][i] for s, i in
                              (t.positive for t in batch.triplets)])
        negatives = np.stack([dataset[s][i] for s, i in
                              (t.negative for t in batch.triplets)])

        ea = fe_apply(fe, Tensor(anchors))
        ep = fe_apply(fe, Tensor(positives))
        ehn = fe_apply(fe, Tensor(negatives))
        loss = triplet_loss_batch(ea, ep, ehn, batch.margin)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise ContractError(
                f"triplet training diverged at step {step}: loss={loss_val}")

        opt.zero_grad()
        backward(loss)
        opt.step()
        log.append(StepLog(step, loss_val, batch.margin,
                           batch.violator_rate, phase))

        if phase == "frozen":
            window.append(loss_val)
            if len(window) == hyper.stabilize_window:
                mean = float(np.mean(window))
                window.clear()
                windows_done += 1
                if prev_mean is not None:
                    rel = abs(mean - prev_mean) / max(abs(prev_mean), 1e-12)
                    stable = stable + 1 if rel < hyper.stabilize_tol else 0
                prev_mean = mean
                if stable >= hyper.stabilize_patience or \
                        windows_done >= hyper.stabilize_cap:
                    logger.info("unfreezing trunk at step %d (%s)", step + 1,
                                "stabilized" if stable >= hyper.stabilize_patience
                                else "window cap")
                    set_trainable(fe, trunk=True, head=True)
                    phase = "full"

    return log


def write_training_log(log: Sequence[StepLog], path) -> None:
    """Emit the training log as CSV: step, loss, margin, violator_rate, phase."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "margin", "violator_rate", "phase"])
        for entry in log:
            writer.writerow([entry.step, repr(entry.loss), repr(entry.margin),
                             repr(entry.violator_rate), entry.phase])


def read_training_log(path) -> list[StepLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StepLog(int(r["step"]), float(r["loss"]), float(r["margin"]),
                    float(r["violator_rate"]), r["phase"]) for r in rows]
