"""Event-log ingestion, sessionisation and chronological splitting.

Input logs are delimiter-separated text (optionally gzip-compressed) with
three columns: user, item, unix timestamp. Tabs are used as the delimiter
when the first data line contains one, commas otherwise. Blank lines and
lines starting with ``#`` are skipped. The first remaining line is a header
iff its timestamp column does not parse as a number.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .errors import DataError
from .session_graph import Session

MIN_SESSION_LEN = 2
MAX_SESSION_LEN = 20
CORPUS_FORMAT = "gagstream-corpus/1"


@dataclass
class EventLog:
    users: list[str]
    items: list[str]
    timestamps: list[float]

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Corpus:
    """Sessions in end-time order with dense id vocabularies.

    Ids are assigned in first-appearance order over the ordered sessions, so
    the training prefix owns the lowest ids and every later chunk only
    appends to the vocabularies.
    """

    sessions: list[Session]
    item_vocab: list[str]
    user_vocab: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sessions)


def git_blob_sha1(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _open_text(path: Path) -> Iterator[str]:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw.decode("utf-8").splitlines()


def read_event_log(path) -> EventLog:
    """Parse an event log, enforcing timestamp order within each user.

    Raises:
        DataError: a line has the wrong column count or a bad timestamp;
            the message carries the 1-based line number.
    """
    path = Path(path)
    log = EventLog([], [], [])
    delim = None
    header_checked = False
    for lineno, line in enumerate(_open_text(path), start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if delim is None:
            delim = "\t" if "\t" in line else ","
        cols = [c.strip() for c in line.split(delim)]
        if len(cols) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 columns, found {len(cols)}")
        try:
            ts = float(cols[2])
        except ValueError:
            if not header_checked:
                header_checked = True
                continue
            raise DataError(f"{path}:{lineno}: bad timestamp {cols[2]!r}") from None
        header_checked = True
        if not math.isfinite(ts) or ts < 0:
            raise DataError(f"{path}:{lineno}: timestamp must be finite and non-negative")
        log.users.append(cols[0])
        log.items.append(cols[1])
        log.timestamps.append(ts)
    return log


def sessionize(
    log: EventLog,
    session_gap: float,
    top_n_items: int,
    min_len: int = MIN_SESSION_LEN,
    max_len: int = MAX_SESSION_LEN,
) -> list[tuple[str, list[str], float, float]]:
    """Split each user's stream at gaps longer than ``session_gap`` seconds.

    Only the ``top_n_items`` most frequent items survive (ties by item name).
    Returns ``(user, items, start, end)`` tuples ordered by end time.
    """
    counts = Counter(log.items)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = {item for item, _ in ranked[:top_n_items]}

    per_user: dict[str, list[tuple[float, int, str]]] = defaultdict(list)
    for idx, (u, v, ts) in enumerate(zip(log.users, log.items, log.timestamps)):
        if v in keep:
            per_user[u].append((ts, idx, v))

    sessions = []
    for u, events in per_user.items():
        events.sort()
        current = [events[0]]
        for ev in events[1:]:
            if ev[0] - current[-1][0] > session_gap:
                sessions.append((u, current))
                current = [ev]
            else:
                current.append(ev)
        sessions.append((u, current))

    out = [
        (u, [e[2] for e in evs], evs[0][0], evs[-1][0])
        for u, evs in sessions
        if min_len <= len(evs) <= max_len
    ]
    out.sort(key=lambda s: (s[3], s[2], s[0]))
    return out


def build_corpus(raw_sessions, meta: dict | None = None) -> Corpus:
    items: dict[str, int] = {}
    users: dict[str, int] = {}
    sessions = []
    for idx, (u, seq, _start, end) in enumerate(raw_sessions):
        uid = users.setdefault(u, len(users))
        ids = tuple(items.setdefault(v, len(items)) for v in seq)
        sessions.append(Session(uid, ids, arrival_index=idx, timestamp=float(end)))
    return Corpus(sessions, list(items), list(users), dict(meta or {}))


def ingest_events(path, session_gap: float, top_n_items: int) -> Corpus:
    """Read a log and turn it into a filtered, chronologically ordered corpus.

    Args:
        path: event log (plain or gzip).
        session_gap: maximum silence in seconds inside one session.
        top_n_items: number of most frequent items kept.

    Raises:
        DataError: malformed input, or no session survives filtering.
    """
    path = Path(path)
    log = read_event_log(path)
    raw = sessionize(log, session_gap, top_n_items)
    if not raw:
        raise DataError(f"{path}: no sessions after preprocessing")
    meta = {
        "source": path.name,
        "source_sha1": git_blob_sha1(path.read_bytes()),
        "session_gap": session_gap,
        "top_n_items": top_n_items,
        "num_events": len(log),
    }
    return build_corpus(raw, meta)


def save_corpus(path, corpus: Corpus) -> None:
    """Write a canonical JSON-lines corpus; identical corpora give identical bytes."""
    header = {
        "format": CORPUS_FORMAT,
        "items": corpus.item_vocab,
        "users": corpus.user_vocab,
        "meta": corpus.meta,
        "num_sessions": len(corpus.sessions),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for s in corpus.sessions:
            fh.write(json.dumps([s.user_id, list(s.items), s.timestamp], separators=(",", ":")) + "\n")


def is_corpus_file(path) -> bool:
    try:
        with open(path, "rb") as fh:
            first = fh.readline(4096)
        return first.startswith(b"{") and CORPUS_FORMAT.encode() in first
    except OSError:
        return False


def load_corpus(path) -> Corpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
        if header.get("format") != CORPUS_FORMAT:
            raise DataError(f"{path}: not a {CORPUS_FORMAT} file")
        sessions = []
        for idx, line in enumerate(lines[1:]):
            u, seq, ts = json.loads(line)
            sessions.append(Session(int(u), tuple(int(v) for v in seq), arrival_index=idx, timestamp=float(ts)))
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed corpus ({exc})") from exc
    if len(sessions) != header.get("num_sessions", len(sessions)):
        raise DataError(f"{path}: session count disagrees with header")
    return Corpus(sessions, list(header["items"]), list(header["users"]), dict(header.get("meta", {})))


def chronological_split(
    sessions: Sequence[Session], train_frac: float = 0.6, num_chunks: int = 5
) -> tuple[list[Session], list[list[Session]]]:
    """First ``floor(train_frac * N)`` sessions train; the rest form equal chunks.

    Sessions left over by the integer division all go to the last chunk.
    """
    sessions = list(sessions)
    n = len(sessions)
    if n == 0:
        raise DataError("cannot split an empty corpus")
    # round first so that e.g. 0.6 * 10 = 6.000000000000001 floors to 6
    n_train = math.floor(round(n * train_frac, 9))
    rest = sessions[n_train:]
    if len(rest) < num_chunks:
        raise DataError(f"only {len(rest)} candidate sessions for {num_chunks} chunks")
    size = len(rest) // num_chunks
    chunks = [rest[i * size : (i + 1) * size] for i in range(num_chunks - 1)]
    chunks.append(rest[(num_chunks - 1) * size :])
    return sessions[:n_train], chunks
