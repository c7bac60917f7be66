"""Session sequences and their weighted directed session graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CatalogError, ContractError


@dataclass(frozen=True)
class Session:
    """One user's time-ordered clicks.

    ``arrival_index`` is the session's position in the global stream and
    ``timestamp`` its end time (seconds since epoch); both are metadata and
    take no part in graph construction.
    """

    user_id: int
    items: tuple[int, ...]
    arrival_index: int = 0
    chunk_tag: Optional[str] = None
    timestamp: float = 0.0

    def __post_init__(self):
        if not isinstance(self.items, tuple):
            object.__setattr__(self, "items", tuple(int(i) for i in self.items))

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SessionGraph:
    user_id: int
    nodes: tuple[int, ...]
    senders: np.ndarray
    receivers: np.ndarray
    weights: np.ndarray
    last_node: int
    in_degree: np.ndarray = field(repr=False)
    out_degree: np.ndarray = field(repr=False)

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return [
            (int(s), int(r), int(w))
            for s, r, w in zip(self.senders, self.receivers, self.weights)
        ]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def build_session_graph(session: Session, num_items: Optional[int] = None) -> SessionGraph:
    """Convert a session into its weighted directed graph.

    Nodes are the unique items in first-occurrence order. Each consecutive
    pair ``(v[n-1], v[n])`` contributes one unit of weight to the directed
    edge between their nodes; repeated items give self-loops.

    Args:
        session: the click sequence, at least one item long.
        num_items: catalog size; when given, every item must lie in
            ``[0, num_items)``.

    Raises:
        CatalogError: an item id is outside the catalog.
        ContractError: the session is empty.
    """
    items = session.items
    if len(items) == 0:
        raise ContractError("session must contain at least one item")
    if num_items is not None:
        for v in items:
            if v < 0 or v >= num_items:
                raise CatalogError(f"item {v} outside catalog of size {num_items}")

    index: dict[int, int] = {}
    for v in items:
        if v not in index:
            index[v] = len(index)

    counts: dict[tuple[int, int], int] = {}
    for a, b in zip(items[:-1], items[1:]):
        key = (index[a], index[b])
        counts[key] = counts.get(key, 0) + 1

    # dict preserves first-transition order
    pairs = list(counts.items())
    senders = np.array([p[0][0] for p in pairs], dtype=np.int64)
    receivers = np.array([p[0][1] for p in pairs], dtype=np.int64)
    weights = np.array([p[1] for p in pairs], dtype=np.float64)
    n = len(index)
    in_deg, out_deg = _degrees(n, senders, receivers, weights)
    return SessionGraph(
        user_id=session.user_id,
        nodes=tuple(index),
        senders=senders,
        receivers=receivers,
        weights=weights,
        last_node=index[items[-1]],
        in_degree=in_deg,
        out_degree=out_deg,
    )


def _degrees(n, senders, receivers, weights):
    in_deg = np.bincount(receivers, weights=weights, minlength=n).astype(np.float64)
    out_deg = np.bincount(senders, weights=weights, minlength=n).astype(np.float64)
    return in_deg, out_deg


def node_degrees(graph: SessionGraph) -> tuple[np.ndarray, np.ndarray]:
    """Weighted (in, out) degree per node; self-loops count toward both."""
    return _degrees(graph.num_nodes, graph.senders, graph.receivers, graph.weights)


@dataclass
class GraphBatch:
    """Several session graphs packed into one disjoint union.

    Node and edge arrays are concatenated with offsets so message passing
    over a whole minibatch is a handful of dense ops and segment sums.
    """

    node_items: np.ndarray  # (N,) catalog id of each node
    node_graph: np.ndarray  # (N,) owning graph of each node
    senders: np.ndarray  # (E,) global node index
    receivers: np.ndarray  # (E,)
    weights: np.ndarray  # (E,)
    edge_graph: np.ndarray  # (E,)
    last_nodes: np.ndarray  # (B,) global node index of each graph's last item
    users: np.ndarray  # (B,)

    @property
    def num_graphs(self) -> int:
        return len(self.users)

    @property
    def num_nodes(self) -> int:
        return len(self.node_items)

    def edge_norm(self) -> np.ndarray:
        """Per-edge 1/sqrt(out_deg(sender) * in_deg(receiver)); 0 where undefined."""
        n = self.num_nodes
        in_deg = np.bincount(self.receivers, weights=self.weights, minlength=n)
        out_deg = np.bincount(self.senders, weights=self.weights, minlength=n)
        prod = out_deg[self.senders] * in_deg[self.receivers]
        norm = np.zeros_like(prod)
        ok = prod > 0
        norm[ok] = 1.0 / np.sqrt(prod[ok])
        return norm

    @classmethod
    def from_graphs(cls, graphs: Sequence[SessionGraph]) -> "GraphBatch":
        node_items, node_graph = [], []
        senders, receivers, weights, edge_graph = [], [], [], []
        last_nodes, users = [], []
        offset = 0
        for g_idx, g in enumerate(graphs):
            n = g.num_nodes
            node_items.append(np.asarray(g.nodes, dtype=np.int64))
            node_graph.append(np.full(n, g_idx, dtype=np.int64))
            senders.append(g.senders + offset)
            receivers.append(g.receivers + offset)
            weights.append(g.weights)
            edge_graph.append(np.full(len(g.senders), g_idx, dtype=np.int64))
            last_nodes.append(g.last_node + offset)
            users.append(g.user_id)
            offset += n

        def cat(parts, dtype):
            return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

        return cls(
            node_items=cat(node_items, np.int64),
            node_graph=cat(node_graph, np.int64),
            senders=cat(senders, np.int64),
            receivers=cat(receivers, np.int64),
            weights=cat(weights, np.float64),
            edge_graph=cat(edge_graph, np.int64),
            last_nodes=np.asarray(last_nodes, dtype=np.int64),
            users=np.asarray(users, dtype=np.int64),
        )


def as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, SessionGraph):
        return GraphBatch.from_graphs([graphs])
    return GraphBatch.from_graphs(list(graphs))


def prefix_examples(session: Session) -> list[tuple[SessionGraph, int]]:
    """Every (prefix graph, next item) pair of a session: ``l - 1`` examples."""
    items = session.items
    return [
        (build_session_graph(Session(session.user_id, items[:p])), items[p])
        for p in range(1, len(items))
    ]


def last_item_example(session: Session) -> tuple[SessionGraph, int]:
    """The session's final item predicted from everything before it."""
    if len(session.items) < 2:
        raise ContractError("need at least two items to form a prediction example")
    return build_session_graph(Session(session.user_id, session.items[:-1])), session.items[-1]
