"""Graph-convolution action classifier over morphology line graphs.

Each layer computes ``relu(h @ W_self + mean_neighbors(h) @ W_nbr + b)``; an
output layer maps to per-node logits over the primitive vocabulary. Gradients
are written out by hand (no autodiff framework).

Batches pack whole graphs end to end; the mean aggregation is a sparse
block-diagonal matrix, so nodes of different graphs never mix.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .morphology import EMBED_DIM, LineGraph, MorphologyTree, to_line_graph

CHECKPOINT_MAGIC = b"MEVOCKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 192
    depth: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0 or self.hidden <= 0 or self.depth <= 0:
            raise ValueError("training hyperparameters must be positive")


class ClassifierParams:
    """Weights in a fixed order: (W_self, W_nbr, b) per conv layer, then (W_out, b_out)."""

    def __init__(self, tensors: Sequence[np.ndarray]):
        self.tensors = [np.asarray(t) for t in tensors]
        if (len(self.tensors) - 2) % 3 != 0:
            raise ValueError("malformed parameter list")

    @property
    def depth(self) -> int:
        return (len(self.tensors) - 2) // 3

    @property
    def in_dim(self) -> int:
        return self.tensors[0].shape[0]

    @property
    def hidden(self) -> int:
        return self.tensors[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.tensors[-1].shape[0]

    @property
    def dtype(self):
        return self.tensors[0].dtype

    def layer(self, i: int):
        return self.tensors[3 * i: 3 * i + 3]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams([t.copy() for t in self.tensors])

    def __eq__(self, other):
        if not isinstance(other, ClassifierParams) or len(other.tensors) != len(self.tensors):
            return NotImplemented
        return all(a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors))


def reset(rng: np.random.Generator, in_dim: int, hidden: int = 192, depth: int = 3, n_classes: int = 4, dtype="float64") -> ClassifierParams:
    """Fresh weights: uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    dtype = np.dtype(dtype)

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

    tensors = []
    d = in_dim
    for _ in range(depth):
        tensors += [glorot(d, hidden), glorot(d, hidden), np.zeros(hidden, dtype)]
        d = hidden
    tensors += [glorot(d, n_classes), np.zeros(n_classes, dtype)]
    return ClassifierParams(tensors)


# ---------------------------------------------------------------------------
# batches


@dataclass
class GraphBatch:
    x: np.ndarray  # (n_nodes, in_dim)
    agg: sp.csr_matrix  # (n_nodes, n_nodes) row i averages the neighbours of node i
    graph: np.ndarray  # (n_nodes,) index of the owning graph
    n_graphs: int
    labels: Optional[np.ndarray] = None

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def mean_aggregator(n: int, src: np.ndarray, dst: np.ndarray) -> sp.csr_matrix:
    """Sparse mean over incoming messages; isolated nodes get a zero row."""
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    w = 1.0 / deg[dst] if len(dst) else np.zeros(0)
    return sp.csr_matrix((w, (dst, src)), shape=(n, n))


def node_features(graph: LineGraph, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float).reshape(1, -1)
    return np.hstack([graph.embeddings, np.repeat(state, graph.n_nodes, axis=0)])


def make_batch(items: Sequence[tuple[LineGraph, np.ndarray, Optional[Sequence[int]]]]) -> GraphBatch:
    """Pack ``(line_graph, state, labels_or_None)`` triples into one batch."""
    xs, srcs, dsts, owner, labels = [], [], [], [], []
    offset = 0
    have_labels = all(lab is not None for _, _, lab in items)
    for gi, (g, state, lab) in enumerate(items):
        xs.append(node_features(g, state))
        for a, b in g.edges:
            srcs += [offset + a, offset + b]
            dsts += [offset + b, offset + a]
        owner.append(np.full(g.n_nodes, gi))
        if have_labels:
            labels.append(np.asarray(lab, dtype=np.int64))
        offset += g.n_nodes
    agg = mean_aggregator(offset, np.array(srcs, dtype=np.int64), np.array(dsts, dtype=np.int64))
    return GraphBatch(
        x=np.vstack(xs),
        agg=agg,
        graph=np.concatenate(owner),
        n_graphs=len(items),
        labels=np.concatenate(labels) if have_labels else None,
    )


class GraphDataset:
    """Append-only store of labelled episodes, kept as flat node arrays for fast batching."""

    def __init__(self, state_dim: int):
        self.state_dim = state_dim
        self._graphs: dict[int, LineGraph] = {}
        self._pending: list[tuple[int, np.ndarray, np.ndarray]] = []
        self._n_episodes = 0
        self._arrays = None
        self.episode_morph = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self._n_episodes

    def add_morphology(self, tree: MorphologyTree) -> None:
        if tree.id not in self._graphs:
            self._graphs[tree.id] = to_line_graph(tree)

    def graph(self, morph_id: int) -> LineGraph:
        return self._graphs[morph_id]

    def add_episodes(self, morph_id: int, assignments: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Append episodes and return their indices."""
        g = self._graphs[morph_id]
        assignments = np.asarray(assignments, dtype=np.int64).reshape(-1, g.n_nodes)
        states = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        if len(assignments) != len(states):
            raise ValueError("assignments and states differ in length")
        self._pending.append((morph_id, assignments, states))
        start = self._n_episodes
        self._n_episodes += len(states)
        self._arrays = None
        return np.arange(start, self._n_episodes)

    def _build(self):
        if self._arrays is not None:
            return self._arrays
        feats, labels, node_count, edge_src, edge_dst, edge_count, morph = [], [], [], [], [], [], []
        for morph_id, acts, states in self._pending:
            g = self._graphs[morph_id]
            k = g.n_nodes
            m = len(states)
            blk = np.empty((m, k, EMBED_DIM + self.state_dim))
            blk[:, :, :EMBED_DIM] = g.embeddings
            blk[:, :, EMBED_DIM:] = states[:, None, :]
            feats.append(blk.reshape(m * k, -1))
            labels.append(acts.reshape(-1))
            node_count.append(np.full(m, k))
            e = np.array(g.edges, dtype=np.int64).reshape(-1, 2)
            src = np.concatenate([e[:, 0], e[:, 1]])
            dst = np.concatenate([e[:, 1], e[:, 0]])
            edge_src.append(np.tile(src, m))
            edge_dst.append(np.tile(dst, m))
            edge_count.append(np.full(m, len(src)))
            morph.append(np.full(m, morph_id))
        feats = np.vstack(feats) if feats else np.zeros((0, EMBED_DIM + self.state_dim))
        node_count = np.concatenate(node_count) if node_count else np.zeros(0, np.int64)
        edge_count = np.concatenate(edge_count) if edge_count else np.zeros(0, np.int64)
        node_start = np.concatenate([[0], np.cumsum(node_count)[:-1]]).astype(np.int64)
        edge_start = np.concatenate([[0], np.cumsum(edge_count)[:-1]]).astype(np.int64)
        src = np.concatenate(edge_src) if edge_src else np.zeros(0, np.int64)
        dst = np.concatenate(edge_dst) if edge_dst else np.zeros(0, np.int64)
        # local edge endpoints -> global node ids
        ep_of_edge = np.repeat(np.arange(len(edge_count)), edge_count)
        gsrc = src + node_start[ep_of_edge]
        gdst = dst + node_start[ep_of_edge]
        deg = np.bincount(gdst, minlength=len(feats)).astype(np.float64)
        self.episode_morph = np.concatenate(morph) if morph else np.zeros(0, np.int64)
        self._arrays = dict(
            x=feats,
            labels=np.concatenate(labels) if labels else np.zeros(0, np.int64),
            node_start=node_start,
            node_count=node_count,
            edge_start=edge_start,
            edge_count=edge_count,
            gsrc=gsrc,
            gdst=gdst,
            deg=deg,
        )
        return self._arrays

    def batch(self, episodes: np.ndarray, dtype=None) -> GraphBatch:
        A = self._build()
        episodes = np.asarray(episodes, dtype=np.int64)
        counts = A["node_count"][episodes]
        nodes = _concat_ranges(A["node_start"][episodes], counts)
        ecounts = A["edge_count"][episodes]
        edges = _concat_ranges(A["edge_start"][episodes], ecounts)
        local = np.empty(len(A["x"]), dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        gsrc = A["gsrc"][edges]
        gdst = A["gdst"][edges]
        n = len(nodes)
        w = 1.0 / A["deg"][gdst]
        agg = sp.csr_matrix((w, (local[gdst], local[gsrc])), shape=(n, n))
        x = A["x"][nodes]
        if dtype is not None:
            x = x.astype(dtype, copy=False)
            agg = agg.astype(dtype)
        return GraphBatch(
            x=x,
            agg=agg,
            graph=np.repeat(np.arange(len(episodes)), counts),
            n_graphs=len(episodes),
            labels=A["labels"][nodes],
        )


def _concat_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return np.arange(total, dtype=np.int64) + offsets


# ---------------------------------------------------------------------------
# forward / backward


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(params: ClassifierParams, x: np.ndarray, agg):
    if x.shape[1] != params.in_dim:
        raise ValueError(f"input dimension {x.shape[1]} does not match classifier ({params.in_dim})")
    h = x.astype(params.dtype, copy=False)
    cache = []
    for i in range(params.depth):
        ws, wn, b = params.layer(i)
        m = agg @ h
        pre = h @ ws + m @ wn + b
        cache.append((h, m, pre))
        h = np.maximum(pre, 0)
    wo, bo = params.tensors[-2:]
    logits = h @ wo + bo
    return _log_softmax(logits), cache, h


def forward(params: ClassifierParams, graph: Union[GraphBatch, LineGraph], state=None) -> np.ndarray:
    """Per-node log-probabilities, shape (n_nodes, n_classes)."""
    if isinstance(graph, LineGraph):
        graph = make_batch([(graph, state, None)])
    return _forward(params, graph.x, graph.agg)[0]


def loss(params: ClassifierParams, batch: GraphBatch) -> float:
    """Mean negative log-likelihood of the true label over every node in the batch."""
    logp = forward(params, batch)
    return float(-logp[np.arange(batch.n_nodes), batch.labels].mean())


def loss_and_grad(params: ClassifierParams, batch: GraphBatch) -> tuple[float, list[np.ndarray]]:
    logp, cache, h = _forward(params, batch.x, batch.agg)
    n = batch.n_nodes
    rows = np.arange(n)
    value = float(-logp[rows, batch.labels].mean())

    d = np.exp(logp)
    d[rows, batch.labels] -= 1.0
    d /= n
    wo = params.tensors[-2]
    grads = [None] * len(params.tensors)
    grads[-2] = h.T @ d
    grads[-1] = d.sum(axis=0)
    dh = d @ wo.T
    agg_t = batch.agg.T.tocsr()
    for i in reversed(range(params.depth)):
        ws, wn, _ = params.layer(i)
        h_in, m, pre = cache[i]
        da = dh * (pre > 0)
        grads[3 * i] = h_in.T @ da
        grads[3 * i + 1] = m.T @ da
        grads[3 * i + 2] = da.sum(axis=0)
        if i > 0:
            dh = da @ ws.T + agg_t @ (da @ wn.T)
    return value, grads


def grad(params: ClassifierParams, batch: GraphBatch) -> list[np.ndarray]:
    return loss_and_grad(params, batch)[1]


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params: ClassifierParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(t) for t in params.tensors]
        self.v = [np.zeros_like(t) for t in params.tensors]
        self.t = 0

    def step(self, params: ClassifierParams, grads: Sequence[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(params.tensors, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= (c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)).astype(p.dtype, copy=False)


def fit(
    params: ClassifierParams,
    dataset: GraphDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    episodes: Optional[np.ndarray] = None,
    epochs: Optional[int] = None,
) -> tuple[ClassifierParams, np.ndarray]:
    """Train on ``episodes`` (default: all) and return new params plus the per-epoch mean loss."""
    idx = np.arange(len(dataset)) if episodes is None else np.asarray(episodes, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("cannot fit on an empty dataset")
    params = params.copy()
    opt = Adam(params, cfg)
    history = []
    for _ in range(cfg.epochs if epochs is None else epochs):
        order = rng.permutation(idx)
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = dataset.batch(order[s: s + cfg.batch_size], dtype=params.dtype)
            value, grads = loss_and_grad(params, batch)
            opt.step(params, grads)
            total += value * batch.n_nodes
            count += batch.n_nodes
        history.append(total / count)
    return params, np.array(history)


def episode_logliks(params: ClassifierParams, dataset: GraphDataset, episodes: Optional[np.ndarray] = None, chunk: int = 2048) -> np.ndarray:
    """Sum over joints of log q(a_j | s_T, m) for each episode."""
    idx = np.arange(len(dataset)) if episodes is None else np.asarray(episodes, dtype=np.int64)
    out = np.zeros(len(idx))
    for s in range(0, len(idx), chunk):
        batch = dataset.batch(idx[s: s + chunk], dtype=params.dtype)
        logp = forward(params, batch)
        taken = logp[np.arange(batch.n_nodes), batch.labels].astype(np.float64)
        out[s: s + batch.n_graphs] = np.bincount(batch.graph, weights=taken, minlength=batch.n_graphs)
    return out


def predict_episode_loglik(params: ClassifierParams, tree: MorphologyTree, assignment: Sequence[int], state) -> tuple[np.ndarray, float]:
    """Per-joint log-probabilities of the taken primitives, and their sum."""
    g = to_line_graph(tree)
    logp = forward(params, g, state)
    per_joint = logp[np.arange(g.n_nodes), np.asarray(assignment, dtype=np.int64)].astype(np.float64)
    return per_joint, float(per_joint.sum())


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(params: ClassifierParams, fh: BinaryIO) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors)))
    for t in params.tensors:
        code = _DTYPE_CODES[t.dtype]
        fh.write(struct.pack("<BI", code, t.ndim))
        fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes())


def read_checkpoint(fh: BinaryIO) -> ClassifierParams:
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a classifier checkpoint")
    version, count = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    codes = {v: k for k, v in _DTYPE_CODES.items()}
    tensors = []
    for _ in range(count):
        code, ndim = struct.unpack("<BI", fh.read(5))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        dt = codes[code].newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors.append(np.frombuffer(fh.read(nbytes), dtype=dt).reshape(shape).astype(codes[code]))
    return ClassifierParams(tensors)
