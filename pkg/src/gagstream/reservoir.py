"""Reservoir of historical sessions and informativeness-weighted online updates.

The reservoir is a classic uniform sample of the stream: the ``t``-th
session offered to a full reservoir of capacity ``|C|`` replaces a random
entry with probability ``|C| / t``. When a chunk of new sessions arrives,
:func:`build_update_set` forces in every session carrying an unseen item or
user and fills the remaining window by sampling the rest of
``reservoir + new`` in proportion to how badly the current model predicts
each session's last item.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError
from .model import GAGModel, PredictionDistribution, LOG_CLAMP
from .session_graph import Session, last_item_example, prefix_examples

log = logging.getLogger(__name__)


class DistanceKind(str, Enum):
    WASSERSTEIN = "wasserstein"
    KL = "kl"
    TOTAL_VARIATION = "total_variation"


@dataclass
class Reservoir:
    capacity: int
    entries: list[Session] = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractError("reservoir capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)


def maybe_store(reservoir: Reservoir, session, rng: np.random.Generator) -> Reservoir:
    """Offer one session to the reservoir (in place).

    Below capacity the session is always appended. Afterwards it replaces a
    uniformly chosen entry with probability ``capacity / t``, ``t`` counting
    this session.
    """
    reservoir.t += 1
    if len(reservoir.entries) < reservoir.capacity:
        reservoir.entries.append(session)
    elif rng.random() * reservoir.t < reservoir.capacity:
        reservoir.entries[int(rng.integers(reservoir.capacity))] = session
    return reservoir


def advance(reservoir: Reservoir, new_sessions: Iterable, rng: np.random.Generator) -> Reservoir:
    for s in new_sessions:
        maybe_store(reservoir, s, rng)
    return reservoir


# ---------------------------------------------------------------------------
# distances between a one-hot target and a predicted distribution


def _probs(pred) -> np.ndarray:
    probs = pred.probs if isinstance(pred, PredictionDistribution) else pred
    return np.asarray(probs, dtype=np.float64)


def _check_normalised(probs: np.ndarray) -> None:
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(probs < 0):
        raise ContractError("prediction is not a normalised probability vector")


def earth_movers_1d(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Earth mover's distance between histograms on the points 0..m-1 (last axis).

    With ground cost ``|i - j|`` the optimal plan moves mass monotonically,
    so the distance is the L1 gap between the two CDFs.
    """
    gap = np.cumsum(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64), axis=-1)
    return np.abs(gap[..., :-1]).sum(axis=-1)


def wasserstein_onehot(targets: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """:func:`earth_movers_1d` between one-hot(target) rows and ``probs``."""
    m = probs.shape[-1]
    cdf = np.cumsum(probs, axis=-1)[..., :-1]
    step = (np.arange(m - 1) >= targets[..., None]).astype(np.float64)
    return np.abs(step - cdf).sum(axis=-1)


def distances(kind: DistanceKind, targets: Sequence[int], pred) -> np.ndarray:
    """Vectorised :func:`distribution_distance` over a (B, m) prediction."""
    probs = np.atleast_2d(_probs(pred))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    _check_normalised(probs)
    if len(targets) != probs.shape[0]:
        raise ContractError(f"{len(targets)} targets for {probs.shape[0]} predictions")
    if len(targets) and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise ContractError("target outside catalog")
    kind = DistanceKind(kind)
    rows = np.arange(len(targets))
    p_target = probs[rows, targets]
    if kind is DistanceKind.KL:
        return -np.log(np.maximum(p_target, LOG_CLAMP))
    if kind is DistanceKind.TOTAL_VARIATION:
        others = probs.copy()
        others[rows, targets] = -np.inf
        best_other = others.max(axis=1) if probs.shape[1] > 1 else np.zeros(len(rows))
        return np.maximum(1.0 - p_target, best_other)
    return wasserstein_onehot(targets, probs)


def distribution_distance(kind: DistanceKind, target: int, pred) -> float:
    """Distance between the one-hot at ``target`` and a single prediction.

    ``kl`` is ``-log p[target]``; ``total_variation`` is
    ``max(1 - p[target], max_{j != target} p[j])``; ``wasserstein`` is the
    index-line EMD from :func:`wasserstein_onehot`.
    """
    probs = _probs(pred)
    if probs.ndim != 1:
        raise ContractError("distribution_distance expects one prediction row")
    return float(distances(kind, [target], probs[None, :])[0])


# ---------------------------------------------------------------------------
# update set construction


@dataclass
class UpdateSet:
    sessions: list[Session]
    forced_count: int
    window_size: int


def weighted_sample(weights: Sequence[float], k: int, rng: np.random.Generator) -> list[int]:
    """Draw ``k`` distinct indices, each draw proportional to the remaining weights.

    Once the remaining weights sum to zero the rest is drawn uniformly.
    """
    w = np.asarray(weights, dtype=np.float64).copy()
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractError("sampling weights must be finite and non-negative")
    k = min(k, len(w))
    alive = np.ones(len(w), dtype=bool)
    picked: list[int] = []
    for _ in range(k):
        cum = np.cumsum(np.where(alive, w, 0.0))
        total = cum[-1]
        if total > 0:
            # side="right" never lands on a zero-weight slot since cum is flat there
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            if idx == len(w):  # u * total rounded up to total
                idx = int(np.flatnonzero(alive & (w > 0))[-1])
        else:
            idx = int(rng.choice(np.flatnonzero(alive)))
        alive[idx] = False
        picked.append(idx)
    return picked


def session_distances(
    model: GAGModel, sessions: Sequence[Session], kind: DistanceKind = DistanceKind.WASSERSTEIN
) -> np.ndarray:
    """Informativeness of each session: distance of its last-item prediction."""
    if not sessions:
        return np.zeros(0)
    examples = [last_item_example(s) for s in sessions]
    pred = model.predict([g for g, _ in examples])
    return distances(kind, [t for _, t in examples], pred)


def has_novel_entity(session: Session, known_items, known_users) -> bool:
    return session.user_id not in known_users or any(v not in known_items for v in session.items)


def build_update_set(
    reservoir: Reservoir,
    new_sessions: Sequence[Session],
    model: GAGModel,
    window_size: int,
    known_items,
    known_users,
    rng: np.random.Generator,
    *,
    force_novel: bool = True,
    weighting: str = "distance",
    distance_kind: DistanceKind = DistanceKind.WASSERSTEIN,
) -> UpdateSet:
    """Pick the sessions the model is updated on after a chunk arrives.

    Args:
        reservoir: historical sample ``C``.
        new_sessions: the chunk just evaluated, ``C_new``.
        model: current model, already grown to cover every entity.
        window_size: sampling budget.
        known_items, known_users: entities seen before this chunk.
        rng: randomness for the draws.
        force_novel: include every new session containing an unseen
            item or user before sampling.
        weighting: ``"distance"`` samples proportionally to the chosen
            distance; ``"uniform"`` ignores it.
        distance_kind: which distance scores informativeness.
    """
    if window_size < 1:
        raise ContractError("window_size must be >= 1")
    forced: list[Session] = []
    pool: list[Session] = list(reservoir.entries)
    for s in new_sessions:
        if force_novel and has_novel_entity(s, known_items, known_users):
            forced.append(s)
        else:
            pool.append(s)

    slots = max(0, window_size - len(forced))
    slots = min(slots, len(pool))
    if slots == 0:
        return UpdateSet(forced, len(forced), window_size)

    if weighting == "distance":
        d = session_distances(model, pool, distance_kind)
        if d.sum() <= 0:
            log.warning("all candidate distances are zero; sampling uniformly")
    elif weighting == "uniform":
        d = np.ones(len(pool))
    else:
        raise ContractError(f"unknown weighting {weighting!r}")
    picked = weighted_sample(d, slots, rng)
    return UpdateSet(forced + [pool[i] for i in picked], len(forced), window_size)


def online_update(
    model: GAGModel,
    update_set: UpdateSet,
    online_epochs: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> GAGModel:
    """Minibatch cross-entropy training on every prefix of the update set (in place)."""
    if not update_set.sessions:
        log.warning("empty update set; model left unchanged")
        return model
    if online_epochs <= 0:
        return model
    if rng is None:
        rng = np.random.default_rng([model.config.rng_seed, model.params.step])
    examples = [ex for s in update_set.sessions for ex in prefix_examples(s)]
    model.fit(examples, online_epochs, rng)
    return model


# ---------------------------------------------------------------------------
# JSON-lines snapshots


def save_reservoir(path, reservoir: Reservoir) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"capacity": reservoir.capacity, "t": reservoir.t}) + "\n")
        for s in reservoir.entries:
            fh.write(
                json.dumps(
                    {
                        "user_id": s.user_id,
                        "items": list(s.items),
                        "arrival_index": s.arrival_index,
                        "timestamp": s.timestamp,
                    }
                )
                + "\n"
            )


def load_reservoir(path) -> Reservoir:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"{path}: empty reservoir snapshot")
    try:
        header = json.loads(lines[0])
        entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(
                Session(
                    user_id=int(rec["user_id"]),
                    items=tuple(int(v) for v in rec["items"]),
                    arrival_index=int(rec["arrival_index"]),
                    timestamp=float(rec.get("timestamp", 0.0)),
                )
            )
        reservoir = Reservoir(capacity=int(header["capacity"]), entries=entries, t=int(header["t"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed reservoir snapshot ({exc})") from exc
    if len(reservoir.entries) > reservoir.capacity or reservoir.t < len(reservoir.entries):
        raise DataError(f"{path}: snapshot violates reservoir invariants")
    return reservoir
