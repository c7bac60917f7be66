"""Global-attributed session graph network: forward, backward and Adam.

Everything runs on a :class:`~gagstream.session_graph.GraphBatch`, the
disjoint union of a minibatch of session graphs. A single graph is just a
batch of one. Gradients are derived by hand; ``tests/test_gradients.py``
checks them against central finite differences.

Each GAG layer, for node features ``H`` and global attributes ``U``:

    e_in[k]  = w_k * (W_ein  [H[s_k] ; U[g_k]] + b_ein)
    e_out[k] = w_k * (W_eout [H[s_k] ; U[g_k]] + b_eout)
    v_in[i]  = sum_{k: r_k = i} c_k e_out[k]
    v_out[i] = sum_{k: s_k = i} c_k e_in[k]         c_k = 1/sqrt(out(s_k) in(r_k))
    H'[i]    = W_node [v_in[i] ; v_out[i]] + b_node
    alpha[i] = w_att . [H'[last] ; H'[i] ; U] + b_att
    U'       = sum_i alpha[i] H'[i] + U

Scores are ``U' X^T`` over the whole catalog, followed by a softmax.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CatalogError, ConfigError, ContractError, NumericError, ShapeError
from .session_graph import GraphBatch, SessionGraph, as_batch

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass
class ModelConfig:
    embed_dim: int = 200
    num_layers: int = 1
    learning_rate: float = 0.003
    batch_size: int = 100
    rng_seed: int = 0
    edge_out_uses_receiver: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if int(self.embed_dim) < 1:
            raise ConfigError("embed_dim", "must be >= 1")
        if int(self.num_layers) < 1:
            raise ConfigError("num_layers", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size", "must be >= 1")


@dataclass
class ModelParams:
    """Parameter tensors in declaration order plus Adam state.

    ``version`` is bumped on every in-place update so stale forward caches
    can be detected.
    """

    tensors: dict[str, np.ndarray]
    moment1: dict[str, np.ndarray]
    moment2: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    version: int = 0

    @property
    def item_embeddings(self) -> np.ndarray:
        return self.tensors["item_emb"]

    @property
    def user_embeddings(self) -> np.ndarray:
        return self.tensors["user_emb"]

    @property
    def num_items(self) -> int:
        return self.tensors["item_emb"].shape[0]

    @property
    def num_users(self) -> int:
        return self.tensors["user_emb"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tensors["item_emb"].shape[1]

    @property
    def num_layers(self) -> int:
        return sum(1 for name in self.tensors if name.endswith(".att.bias"))

    def layer(self, k: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{k}."
        return {n[len(prefix):]: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def copy(self) -> "ModelParams":
        return ModelParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            moment1={k: v.copy() for k, v in self.moment1.items()},
            moment2={k: v.copy() for k, v in self.moment2.items()},
            step=self.step,
            seed=self.seed,
            version=self.version,
        )


def tensor_shapes(d: int, num_items: int, num_users: int, num_layers: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {"item_emb": (num_items, d), "user_emb": (num_users, d)}
    for k in range(num_layers):
        p = f"layers.{k}."
        shapes[p + "edge_in.weight"] = (d, 2 * d)
        shapes[p + "edge_in.bias"] = (d,)
        shapes[p + "edge_out.weight"] = (d, 2 * d)
        shapes[p + "edge_out.bias"] = (d,)
        shapes[p + "node.weight"] = (d, 2 * d)
        shapes[p + "node.bias"] = (d,)
        shapes[p + "att.weight"] = (1, 3 * d)
        shapes[p + "att.bias"] = (1,)
    return shapes


def init_model(config: ModelConfig, num_items: int, num_users: int) -> ModelParams:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) init, drawn in declaration order from ``rng_seed``."""
    if num_items < 1:
        raise ConfigError("num_items", "catalog must contain at least one item")
    if num_users < 1:
        raise ConfigError("num_users", "catalog must contain at least one user")
    d = config.embed_dim
    bound = 1.0 / np.sqrt(d)
    rng = np.random.default_rng(config.rng_seed)
    tensors = {
        name: rng.uniform(-bound, bound, size=shape)
        for name, shape in tensor_shapes(d, num_items, num_users, config.num_layers).items()
    }
    return ModelParams(
        tensors=tensors,
        moment1={k: np.zeros_like(v) for k, v in tensors.items()},
        moment2={k: np.zeros_like(v) for k, v in tensors.items()},
        seed=config.rng_seed,
    )


def grow_catalog(params: ModelParams, new_num_items: int, new_num_users: int) -> ModelParams:
    """Append freshly initialised item/user rows; existing rows are kept bitwise."""
    m, n = params.num_items, params.num_users
    if new_num_items < m or new_num_users < n:
        raise ContractError(
            f"cannot shrink catalog from ({m}, {n}) to ({new_num_items}, {new_num_users})"
        )
    if new_num_items == m and new_num_users == n:
        return params
    d = params.embed_dim
    bound = 1.0 / np.sqrt(d)
    grown = params.copy()
    for name, tag, old, new in (("item_emb", 1, m, new_num_items), ("user_emb", 2, n, new_num_users)):
        if new == old:
            continue
        # seed depends on the growth step so repeated runs draw the same rows
        rng = np.random.default_rng([params.seed, tag, old, new])
        rows = rng.uniform(-bound, bound, size=(new - old, d))
        grown.tensors[name] = np.vstack([params.tensors[name], rows])
        grown.moment1[name] = np.vstack([params.moment1[name], np.zeros((new - old, d))])
        grown.moment2[name] = np.vstack([params.moment2[name], np.zeros((new - old, d))])
    grown.version += 1
    return grown


# ---------------------------------------------------------------------------
# one GAG layer, split into its three stages


def _as_user_matrix(u: np.ndarray, batch: GraphBatch) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if u.shape[0] != batch.num_graphs:
        raise ShapeError(f"expected {batch.num_graphs} global attributes, got {u.shape[0]}")
    return u


def _check_feats(node_feats: np.ndarray, batch: GraphBatch, d: int) -> None:
    if node_feats.shape != (batch.num_nodes, d):
        raise ShapeError(f"node features {node_feats.shape} != ({batch.num_nodes}, {d})")


def edge_messages(
    graph,
    node_feats: np.ndarray,
    u: np.ndarray,
    params: ModelParams,
    layer: int = 0,
    edge_out_uses_receiver: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted per-edge messages ``(e_in, e_out)``, each of shape (E, d)."""
    batch = as_batch(graph)
    lp = params.layer(layer)
    d = lp["edge_in.bias"].shape[0]
    _check_feats(node_feats, batch, d)
    U = _as_user_matrix(u, batch)
    if U.shape[1] != d:
        raise ShapeError(f"global attribute has dim {U.shape[1]}, expected {d}")
    z_in, z_out = _edge_inputs(batch, node_feats, U, edge_out_uses_receiver)
    w = batch.weights[:, None]
    e_in = w * (z_in @ lp["edge_in.weight"].T + lp["edge_in.bias"])
    e_out = w * (z_out @ lp["edge_out.weight"].T + lp["edge_out.bias"])
    return e_in, e_out


def _edge_inputs(batch, H, U, edge_out_uses_receiver):
    Ue = U[batch.edge_graph]
    z_in = np.concatenate([H[batch.senders], Ue], axis=1)
    out_src = batch.receivers if edge_out_uses_receiver else batch.senders
    z_out = np.concatenate([H[out_src], Ue], axis=1)
    return z_in, z_out


def _scatter(index: np.ndarray, size: int, weights: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """(size x len(index)) matrix summing rows into their ``index`` bucket."""
    data = np.ones(len(index)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    # build CSR directly: column j sits in row index[j]
    order = np.argsort(index, kind="stable")
    indptr = np.concatenate([[0], np.cumsum(np.bincount(index, minlength=size))])
    return sp.csr_matrix((data[order], order, indptr), shape=(size, len(index)))


def aggregate_nodes(
    graph, e_in: np.ndarray, e_out: np.ndarray, params: ModelParams, layer: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Degree-normalised neighbourhood sums and the node update.

    Returns ``(v_in, v_out, v_new)``. A node without incoming (outgoing)
    edges gets a zero ``v_in`` (``v_out``).
    """
    batch = as_batch(graph)
    lp = params.layer(layer)
    n = batch.num_nodes
    norm = batch.edge_norm()
    v_in = _scatter(batch.receivers, n, norm) @ e_out
    v_out = _scatter(batch.senders, n, norm) @ e_in
    c = np.concatenate([v_in, v_out], axis=1)
    v_new = c @ lp["node.weight"].T + lp["node.bias"]
    return v_in, v_out, v_new


def global_update(
    graph, node_feats: np.ndarray, u: np.ndarray, params: ModelParams, layer: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention readout anchored on the last item, plus the residual.

    Returns ``(alpha, u_sg, u_new)``. The attention weights are used raw,
    without normalisation.
    """
    batch = as_batch(graph)
    lp = params.layer(layer)
    U = _as_user_matrix(u, batch)
    q = _att_inputs(batch, node_feats, U)
    alpha = q @ lp["att.weight"][0] + lp["att.bias"][0]
    u_sg = _scatter(batch.node_graph, batch.num_graphs) @ (alpha[:, None] * node_feats)
    return alpha, u_sg, u_sg + U


def _att_inputs(batch, H, U):
    last = batch.last_nodes[batch.node_graph]
    return np.concatenate([H[last], H, U[batch.node_graph]], axis=1)


# ---------------------------------------------------------------------------
# whole-model forward / loss / backward


@dataclass
class LayerActivations:
    node_feats: np.ndarray
    u: np.ndarray
    e_in: np.ndarray
    e_out: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray
    v_new: np.ndarray
    alpha: np.ndarray
    u_sg: np.ndarray
    u_new: np.ndarray


@dataclass
class PredictionDistribution:
    """Scores and softmax probabilities, shape (m,) or (B, m)."""

    scores: np.ndarray
    probs: np.ndarray

    def row(self, i: int) -> "PredictionDistribution":
        if self.scores.ndim == 1:
            if i != 0:
                raise IndexError(i)
            return self
        return PredictionDistribution(self.scores[i], self.probs[i])

    def __len__(self) -> int:
        return 1 if self.scores.ndim == 1 else self.scores.shape[0]


@dataclass
class ForwardCache:
    batch: GraphBatch
    layers: list[LayerActivations]
    probs: np.ndarray
    params_version: int
    params_id: int
    edge_out_uses_receiver: bool = False


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_catalog(batch: GraphBatch, params: ModelParams) -> None:
    if batch.num_nodes and (batch.node_items.min() < 0 or batch.node_items.max() >= params.num_items):
        raise CatalogError(f"item id outside catalog of size {params.num_items}")
    if len(batch.users) and (batch.users.min() < 0 or batch.users.max() >= params.num_users):
        raise CatalogError(f"user id outside catalog of size {params.num_users}")


def session_representation(
    graphs, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, list[LayerActivations], GraphBatch]:
    batch = as_batch(graphs)
    _check_catalog(batch, params)
    H = params.item_embeddings[batch.node_items]
    U = params.user_embeddings[batch.users]
    acts = []
    for k in range(params.num_layers):
        e_in, e_out = edge_messages(batch, H, U, params, k, config.edge_out_uses_receiver)
        v_in, v_out, v_new = aggregate_nodes(batch, e_in, e_out, params, k)
        alpha, u_sg, u_new = global_update(batch, v_new, U, params, k)
        acts.append(LayerActivations(H, U, e_in, e_out, v_in, v_out, v_new, alpha, u_sg, u_new))
        H, U = v_new, u_new
    return U, acts, batch


def forward(graphs, params: ModelParams, config: ModelConfig) -> tuple[PredictionDistribution, ForwardCache]:
    """Score every catalog item for each graph in ``graphs``.

    ``graphs`` may be one :class:`SessionGraph`, a sequence of them, or a
    prepared :class:`GraphBatch`. The result always has a leading batch axis.
    """
    U, acts, batch = session_representation(graphs, params, config)
    scores = U @ params.item_embeddings.T
    probs = softmax(scores)
    cache = ForwardCache(
        batch=batch,
        layers=acts,
        probs=probs,
        params_version=params.version,
        params_id=id(params),
        edge_out_uses_receiver=config.edge_out_uses_receiver,
    )
    return PredictionDistribution(scores, probs), cache


def loss(pred: PredictionDistribution, targets: Sequence[int]) -> float:
    """Summed cross-entropy of the batch, with probabilities clamped at 1e-12."""
    probs = np.atleast_2d(pred.probs)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) != probs.shape[0]:
        raise ShapeError(f"{len(targets)} targets for {probs.shape[0]} predictions")
    if len(targets) and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise CatalogError("target outside catalog")
    p = probs[np.arange(len(targets)), targets]
    return float(-np.log(np.maximum(p, LOG_CLAMP)).sum())


def backward(cache: ForwardCache, targets: Sequence[int], params: ModelParams) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` w.r.t. every tensor in ``params``."""
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise ContractError("forward cache is stale: parameters changed since forward()")
    batch = cache.batch
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    B = batch.num_graphs
    rows = np.arange(B)
    X = params.item_embeddings

    dZ = cache.probs.copy()
    dZ[rows, targets] -= 1.0
    # a clamped log term is constant, so it carries no gradient
    dZ[cache.probs[rows, targets] < LOG_CLAMP] = 0.0

    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    U_final = cache.layers[-1].u_new
    grads["item_emb"] += dZ.T @ U_final
    dU = dZ @ X
    dH = np.zeros((batch.num_nodes, params.embed_dim))

    n = batch.num_nodes
    d = params.embed_dim
    node_to_graph = _scatter(batch.node_graph, B)
    edge_to_graph = _scatter(batch.edge_graph, B)
    to_sender = _scatter(batch.senders, n)
    to_receiver = _scatter(batch.receivers, n)
    to_last = _scatter(batch.last_nodes[batch.node_graph], n)
    norm = batch.edge_norm()[:, None]
    w = batch.weights[:, None]
    out_src = batch.receivers if cache.edge_out_uses_receiver else batch.senders
    to_out_src = to_receiver if cache.edge_out_uses_receiver else to_sender

    for k in reversed(range(len(cache.layers))):
        a = cache.layers[k]
        lp = params.layer(k)
        name = f"layers.{k}."
        H, U, Hn = a.node_feats, a.u, a.v_new

        # u_new = u_sg + U
        dU_in = dU.copy()
        dsg_nodes = dU[batch.node_graph]
        dalpha = np.einsum("ij,ij->i", dsg_nodes, Hn)
        dHn = dH + a.alpha[:, None] * dsg_nodes

        q = _att_inputs(batch, Hn, U)
        grads[name + "att.weight"] += (dalpha @ q)[None, :]
        grads[name + "att.bias"] += dalpha.sum()
        dq = dalpha[:, None] * lp["att.weight"][0][None, :]
        dHn += to_last @ dq[:, :d] + dq[:, d : 2 * d]
        dU_in += node_to_graph @ dq[:, 2 * d :]

        c = np.concatenate([a.v_in, a.v_out], axis=1)
        grads[name + "node.weight"] += dHn.T @ c
        grads[name + "node.bias"] += dHn.sum(axis=0)
        dc = dHn @ lp["node.weight"]
        de_out = norm * dc[batch.receivers, :d]
        de_in = norm * dc[batch.senders, d:]

        Ue = U[batch.edge_graph]
        z_in = np.concatenate([H[batch.senders], Ue], axis=1)
        z_out = np.concatenate([H[out_src], Ue], axis=1)
        da_in = w * de_in
        da_out = w * de_out
        grads[name + "edge_in.weight"] += da_in.T @ z_in
        grads[name + "edge_in.bias"] += da_in.sum(axis=0)
        grads[name + "edge_out.weight"] += da_out.T @ z_out
        grads[name + "edge_out.bias"] += da_out.sum(axis=0)
        dz_in = da_in @ lp["edge_in.weight"]
        dz_out = da_out @ lp["edge_out.weight"]

        dH = to_sender @ dz_in[:, :d] + to_out_src @ dz_out[:, :d]
        dU = dU_in + edge_to_graph @ (dz_in[:, d:] + dz_out[:, d:])

    np.add.at(grads["item_emb"], batch.node_items, dH)
    np.add.at(grads["user_emb"], batch.users, dU)
    return grads


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], config: ModelConfig) -> ModelParams:
    """Bias-corrected Adam update, applied in place.

    Raises:
        NumericError: a gradient contains NaN/Inf (nothing is updated), or
            the update produced a non-finite parameter.
        ShapeError: gradient shapes do not match the parameters.
    """
    for name, t in params.tensors.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    params.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**params.step
    c2 = 1.0 - b2**params.step
    for name, t in params.tensors.items():
        g = grads[name]
        m = params.moment1[name]
        v = params.moment2[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        if not np.all(np.isfinite(t)):
            raise NumericError(f"parameter {name} became non-finite")
    params.version += 1
    return params


def train_step(
    params: ModelParams, config: ModelConfig, graphs, targets: Sequence[int]
) -> float:
    """Forward, backward and one Adam update on a minibatch. Returns the batch loss."""
    pred, cache = forward(graphs, params, config)
    value = loss(pred, targets)
    if not np.isfinite(value):
        raise NumericError("loss is not finite")
    grads = backward(cache, targets, params)
    adam_step(params, grads, config)
    return value


def predict_scores(params: ModelParams, config: ModelConfig, graphs: Sequence[SessionGraph]) -> np.ndarray:
    """Score matrix (B, m) without keeping activations."""
    U, _, _ = session_representation(graphs, params, config)
    return U @ params.item_embeddings.T


def recommend_topk(pred: PredictionDistribution, k: int) -> list[tuple[int, float]]:
    """Top-``k`` items by descending probability, ties broken by ascending id."""
    probs = np.asarray(pred.probs)
    if probs.ndim != 1:
        raise ShapeError("recommend_topk expects a single prediction row")
    if k < 1 or k > len(probs):
        raise ContractError(f"k={k} must lie in [1, {len(probs)}]")
    order = np.lexsort((np.arange(len(probs)), -probs))[:k]
    return [(int(i), float(probs[i])) for i in order]


@dataclass
class GAGModel:
    """Parameters bundled with the config that produced them."""

    params: ModelParams
    config: ModelConfig

    @classmethod
    def create(cls, config: ModelConfig, num_items: int, num_users: int) -> "GAGModel":
        return cls(init_model(config, num_items, num_users), config)

    @property
    def num_items(self) -> int:
        return self.params.num_items

    @property
    def num_users(self) -> int:
        return self.params.num_users

    def grow(self, num_items: int, num_users: int) -> None:
        self.params = grow_catalog(
            self.params, max(num_items, self.num_items), max(num_users, self.num_users)
        )

    def copy(self) -> "GAGModel":
        return GAGModel(self.params.copy(), self.config)

    def predict(self, graphs, chunk: int = 512) -> PredictionDistribution:
        graphs = list(graphs)
        scores = np.vstack(
            [predict_scores(self.params, self.config, graphs[i : i + chunk]) for i in range(0, len(graphs), chunk)]
        ) if graphs else np.zeros((0, self.num_items))
        return PredictionDistribution(scores, softmax(scores) if len(scores) else scores)

    def fit(
        self,
        examples: Sequence[tuple[SessionGraph, int]],
        epochs: int,
        rng: np.random.Generator,
        plateau_tol: Optional[float] = None,
    ) -> list[float]:
        """Shuffled minibatch training. Returns the mean loss of each epoch.

        With ``plateau_tol`` set, stops once an epoch improves the mean loss
        by less than that relative amount.
        """
        history: list[float] = []
        n = len(examples)
        if n == 0:
            return history
        bs = self.config.batch_size
        for _ in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                graphs = [examples[i][0] for i in idx]
                targets = [examples[i][1] for i in idx]
                total += train_step(self.params, self.config, graphs, targets)
            history.append(total / n)
            if plateau_tol is not None and len(history) >= 2:
                prev, cur = history[-2], history[-1]
                if prev - cur < plateau_tol * abs(prev):
                    log.info("training loss plateaued after %d epochs", len(history))
                    break
        return history
