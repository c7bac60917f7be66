"""Seeded synthetic event logs with user-specific Markov browsing and drift.

Items are partitioned into groups of ``group_size``. Every item has a short
ranked list of successors inside its group, and every user favours a few
groups. A session starts in one of the user's groups and mostly follows
successor links, occasionally jumping to another item of a favoured group.

At ``drift_at`` (fraction of the timeline) a ``drift_strength`` fraction of
items get new successor lists and the same fraction of users get new
tastes. After ``split_at`` a ``novel_rate`` fraction of sessions contains
an item never seen before that point; such items recur with probability
``reuse_novel`` and have their own fixed successor.

Sessions sit in disjoint two-day slots, events five minutes apart, so
sessionising with any gap between 100 minutes and 48 hours recovers them
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SLOT_SECONDS = 2 * 86400
EVENT_SECONDS = 300
EPOCH = 1_262_304_000  # 2010-01-01


@dataclass
class SynthConfig:
    users: int = 50
    items: int = 200
    sessions: int = 1500
    drift_at: float = 0.6
    drift_strength: float = 0.5
    novel_rate: float = 0.05
    split_at: float = 0.6
    min_len: int = 3
    max_len: int = 8
    group_size: int = 20
    groups_per_user: int = 2
    successors: int = 3
    follow_prob: float = 0.8
    reuse_novel: float = 0.5
    seed: int = 0


def _phase(rng, cfg: SynthConfig):
    n_groups = max(1, cfg.items // cfg.group_size)
    group_of = rng.permutation(cfg.items) % n_groups
    members = [np.flatnonzero(group_of == g) for g in range(n_groups)]
    succ = np.empty((cfg.items, cfg.successors), dtype=np.int64)
    for i in range(cfg.items):
        pool = members[group_of[i]]
        succ[i] = rng.choice(pool, size=cfg.successors, replace=len(pool) < cfg.successors)
    k = min(cfg.groups_per_user, n_groups)
    tastes = [np.concatenate([members[g] for g in rng.choice(n_groups, size=k, replace=False)]) for _ in range(cfg.users)]
    return succ, tastes


def generate_sessions(cfg: SynthConfig) -> list[tuple[int, list[int]]]:
    """Return ``(user, items)`` per session in time order (ids are ints)."""
    rng = np.random.default_rng(cfg.seed)
    before = _phase(rng, cfg)
    fresh = _phase(rng, cfg)
    moved_items = rng.random(cfg.items) < cfg.drift_strength
    moved_users = rng.random(cfg.users) < cfg.drift_strength
    after = (
        np.where(moved_items[:, None], fresh[0], before[0]),
        [fresh[1][u] if moved_users[u] else before[1][u] for u in range(cfg.users)],
    )
    phases = [before, after]
    weights = 0.5 ** np.arange(cfg.successors)
    weights /= weights.sum()

    drift_idx = int(np.floor(cfg.drift_at * cfg.sessions))
    split_idx = int(np.floor(cfg.split_at * cfg.sessions))
    post = np.arange(split_idx, cfg.sessions)
    n_novel = int(round(cfg.novel_rate * len(post)))
    novel_sessions = set(rng.choice(post, size=n_novel, replace=False).tolist()) if n_novel else set()
    novel_next: list[int] = []  # successor of each minted novel item

    out = []
    for k in range(cfg.sessions):
        succ, tastes = phases[0] if k < drift_idx else phases[1]
        user = int(rng.integers(cfg.users))
        taste = tastes[user]
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        cur = int(rng.choice(taste))
        seq = [cur]
        while len(seq) < length:
            if rng.random() < cfg.follow_prob:
                cur = int(succ[cur, rng.choice(cfg.successors, p=weights)])
            else:
                cur = int(rng.choice(taste))
            seq.append(cur)
        if k in novel_sessions:
            if novel_next and rng.random() < cfg.reuse_novel:
                j = int(rng.integers(len(novel_next)))
            else:
                j = len(novel_next)
                novel_next.append(int(rng.choice(taste)))
            pos = int(rng.integers(1, length))
            seq = seq[:pos] + [cfg.items + j, novel_next[j]] + seq[pos:]
            seq = seq[: max(cfg.max_len, pos + 2)]
        out.append((user, seq))
    return out


def generate_log(cfg: SynthConfig) -> list[tuple[str, str, int]]:
    rows = []
    for k, (user, seq) in enumerate(generate_sessions(cfg)):
        start = EPOCH + k * SLOT_SECONDS
        for j, item in enumerate(seq):
            rows.append((f"u{user}", f"i{item}", start + j * EVENT_SECONDS))
    return rows


def write_log(path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("user\titem\ttimestamp\n")
        for u, v, ts in rows:
            fh.write(f"{u}\t{v}\t{ts}\n")
