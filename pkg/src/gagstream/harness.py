"""Prequential streaming evaluation: test on a chunk, then learn from it.

The offline phase trains on the chronologically first sessions and seeds
the reservoir with them. Each later chunk is scored first (every prefix of
every session predicts its successor) and only then used as ``C_new`` for
the online update and the reservoir.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import VARIANT_SAMPLING, RunConfig
from .data import Corpus, chronological_split
from .errors import ContractError, DataError
from .model import GAGModel, predict_scores
from .reservoir import (
    DistanceKind,
    Reservoir,
    advance,
    build_update_set,
    online_update,
)
from .session_graph import Session, build_session_graph, prefix_examples

log = logging.getLogger(__name__)

SCORE_CHUNK = 512


@dataclass
class ChunkReport:
    chunk_index: int
    recall: dict[int, float]
    mrr: dict[int, float]
    session_count: int
    event_count: int
    wall_time: float = 0.0
    update_size: int = 0
    forced_count: int = 0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "chunk_index": self.chunk_index,
            "session_count": self.session_count,
            "event_count": self.event_count,
            "update_size": self.update_size,
            "forced_count": self.forced_count,
        }
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"mrr@{k}"] = self.mrr[k]
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    @classmethod
    def from_dict(cls, rec: dict) -> "ChunkReport":
        ks = sorted(int(key.split("@")[1]) for key in rec if key.startswith("recall@"))
        return cls(
            chunk_index=rec["chunk_index"],
            recall={k: rec[f"recall@{k}"] for k in ks},
            mrr={k: rec[f"mrr@{k}"] for k in ks},
            session_count=rec["session_count"],
            event_count=rec["event_count"],
            wall_time=rec.get("wall_time", 0.0),
            update_size=rec.get("update_size", 0),
            forced_count=rec.get("forced_count", 0),
        )


# ---------------------------------------------------------------------------
# scorers: anything mapping session prefixes to an (E, m) score matrix


class GAGScorer:
    def __init__(self, model: GAGModel):
        self.model = model

    @property
    def num_items(self) -> int:
        return self.model.num_items

    def scores(self, prefixes: Sequence[Session]) -> np.ndarray:
        graphs = [build_session_graph(p) for p in prefixes]
        return predict_scores(self.model.params, self.model.config, graphs)


class PopRecommender:
    """Global popularity; ``update`` adds counts from more sessions."""

    def __init__(self, num_items: int = 0):
        self.counts = np.zeros(num_items)

    @property
    def num_items(self) -> int:
        return len(self.counts)

    def grow(self, num_items: int) -> None:
        if num_items > len(self.counts):
            self.counts = np.concatenate([self.counts, np.zeros(num_items - len(self.counts))])

    def update(self, sessions: Sequence[Session]) -> None:
        for s in sessions:
            self.grow(max(s.items) + 1)
            np.add.at(self.counts, list(s.items), 1.0)

    def scores(self, prefixes: Sequence[Session]) -> np.ndarray:
        return np.tile(self.counts, (len(prefixes), 1))

    def recommend(self, prefix: Sequence[int], k: int) -> list[int]:
        row = self.scores([Session(0, tuple(prefix))])[0]
        return rank_order(row)[:k].tolist()


class SPopRecommender(PopRecommender):
    """Items of the current prefix by in-session count, then global popularity."""

    def scores(self, prefixes: Sequence[Session]) -> np.ndarray:
        base = self.counts / (self.counts.max() + 1.0) if len(self.counts) else self.counts
        out = np.tile(base, (len(prefixes), 1))
        for row, p in enumerate(prefixes):
            for v in p.items:
                if v < out.shape[1]:
                    out[row, v] += 1.0
        return out


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Item ids by descending score, ties by ascending id."""
    return np.lexsort((np.arange(len(scores)), -scores))


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target under descending score, ties by ascending id."""
    rows = np.arange(len(targets))
    ts = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    better = (scores > ts) | ((scores == ts) & (ids < targets[:, None]))
    return better.sum(axis=1) + 1


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int]) -> tuple[dict[int, float], dict[int, float]]:
    recall, mrr = {}, {}
    for k in ks:
        hit = ranks <= k
        recall[k] = float(hit.mean())
        mrr[k] = float(np.where(hit, 1.0 / ranks, 0.0).mean())
    return recall, mrr


def chunk_events(chunk: Sequence[Session]) -> tuple[list[Session], np.ndarray]:
    """Every prefix of every session paired with the item that follows it."""
    prefixes, targets = [], []
    for s in chunk:
        for p in range(1, len(s.items)):
            prefixes.append(Session(s.user_id, s.items[:p]))
            targets.append(s.items[p])
    return prefixes, np.asarray(targets, dtype=np.int64)


def evaluate_chunk(
    scorer, chunk: Sequence[Session], ks: Sequence[int] = (5, 10, 20), chunk_index: int = 0, workers: int = 1
) -> ChunkReport:
    """Recall@K and MRR@K over all prefix prediction events of a chunk."""
    if not chunk:
        raise DataError("cannot evaluate an empty chunk")
    start = time.perf_counter()
    prefixes, targets = chunk_events(chunk)
    if targets.max() >= scorer.num_items:
        raise ContractError("scorer catalog does not cover the chunk; grow it first")

    def score_slice(lo: int) -> np.ndarray:
        hi = lo + SCORE_CHUNK
        return target_ranks(scorer.scores(prefixes[lo:hi]), targets[lo:hi])

    starts = range(0, len(prefixes), SCORE_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score_slice, starts))
    else:
        parts = [score_slice(lo) for lo in starts]
    ranks = np.concatenate(parts)
    recall, mrr = metrics_from_ranks(ranks, ks)
    return ChunkReport(
        chunk_index=chunk_index,
        recall=recall,
        mrr=mrr,
        session_count=len(chunk),
        event_count=len(targets),
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# offline phase and the streaming loop


def catalog_extent(sessions: Sequence[Session]) -> tuple[int, int]:
    items = max((max(s.items) for s in sessions), default=-1) + 1
    users = max((s.user_id for s in sessions), default=-1) + 1
    return items, users


def train_offline(config: RunConfig, train: Sequence[Session]) -> GAGModel:
    n_items, n_users = catalog_extent(train)
    model = GAGModel.create(config.model_config(), max(n_items, 1), max(n_users, 1))
    examples = [ex for s in train for ex in prefix_examples(s)]
    rng = np.random.default_rng([config.rng_seed, 1])
    history = model.fit(examples, config.offline_epochs, rng, plateau_tol=config.plateau_tol or None)
    log.info("offline training: %d epochs, final loss %s", len(history), history[-1] if history else None)
    return model


@dataclass
class StreamResult:
    reports: list[ChunkReport]
    train_size: int
    chunk_sizes: list[int]
    reservoir_capacity: int
    final_num_items: int
    final_num_users: int
    offline_seconds: float = 0.0
    model: Optional[GAGModel] = field(default=None, repr=False)


def run_stream(
    config: RunConfig, corpus: Corpus, offline_model: Optional[GAGModel] = None
) -> StreamResult:
    """Offline training, then evaluate -> update -> advance for every chunk.

    ``offline_model`` skips offline training; it is copied, never mutated,
    so one pretrained model can seed several variants.
    """
    train, chunks = chronological_split(corpus.sessions, config.train_frac, config.num_chunks)
    if not train:
        raise DataError("training portion is empty")
    known_items = {v for s in train for v in s.items}
    known_users = {s.user_id for s in train}
    capacity = max(1, len(train) // config.reservoir_capacity_divisor)
    reservoir = advance(Reservoir(capacity), train, np.random.default_rng([config.rng_seed, 2]))

    t0 = time.perf_counter()
    model: Optional[GAGModel] = None
    pop: Optional[PopRecommender] = None
    if config.method == "gag":
        model = offline_model.copy() if offline_model is not None else train_offline(config, train)
        scorer = GAGScorer(model)
    else:
        pop = SPopRecommender() if config.method == "spop" else PopRecommender()
        pop.update(train)
        scorer = pop
    offline_seconds = time.perf_counter() - t0

    reports = []
    for idx, chunk in enumerate(chunks, start=1):
        n_items, n_users = catalog_extent(chunk)
        if model is not None:
            model.grow(n_items, n_users)
        else:
            pop.grow(n_items)
        report = evaluate_chunk(scorer, chunk, config.ks, chunk_index=idx, workers=config.workers)

        start = time.perf_counter()
        if model is not None and config.variant != "static":
            force_novel, weighting = VARIANT_SAMPLING[config.variant]
            window = max(1, len(chunk) // config.window_divisor)
            update = build_update_set(
                reservoir,
                chunk,
                model,
                window,
                known_items,
                known_users,
                np.random.default_rng([config.rng_seed, 3, idx]),
                force_novel=force_novel,
                weighting=weighting,
                distance_kind=DistanceKind(config.distance_kind),
            )
            online_update(model, update, config.online_epochs, np.random.default_rng([config.rng_seed, 4, idx]))
            report.update_size = len(update.sessions)
            report.forced_count = update.forced_count
        elif pop is not None and config.pop_online:
            pop.update(chunk)
        advance(reservoir, chunk, np.random.default_rng([config.rng_seed, 5, idx]))
        known_items.update(v for s in chunk for v in s.items)
        known_users.update(s.user_id for s in chunk)
        report.wall_time += time.perf_counter() - start
        reports.append(report)
        log.info("chunk %d: recall@%d=%.4f", idx, max(config.ks), report.recall[max(config.ks)])

    return StreamResult(
        reports=reports,
        train_size=len(train),
        chunk_sizes=[len(c) for c in chunks],
        reservoir_capacity=capacity,
        final_num_items=model.num_items if model is not None else pop.num_items,
        final_num_users=model.num_users if model is not None else len(known_users),
        offline_seconds=offline_seconds,
        model=model,
    )
