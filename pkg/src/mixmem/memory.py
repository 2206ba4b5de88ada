"""Tri-modality memory pool with a learned router and exact top-K retrieval.

Each pool entry carries text, image, and action embeddings for one stored
clip.  A query is scored against every entry by a routing-weighted sum of
cosine similarities, and the best K entries are returned with their exact
stored embeddings.  Scoring is an exhaustive scan; the partial-selection
fast path in `retrieve` is tie-exact, so results never depend on pool size
or selection strategy.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, DimensionError, PoolError

_NORM_FLOOR = 1e-12  # below this a vector counts as zero and cosines read 0


@dataclass
class MemoryEntry:
    id: int
    e_txt: np.ndarray
    e_img: np.ndarray
    e_act: np.ndarray
    source_tag: str = ""


class MemoryPool:
    """Immutable ordered collection of entries with cached unit matrices."""

    def __init__(self, entries, dims=None):
        entries = list(entries)
        if dims is None:
            if not entries:
                raise PoolError("cannot infer dims from an empty pool")
            dims = (len(entries[0].e_txt), len(entries[0].e_act))
        self.dims = (int(dims[0]), int(dims[1]))
        d_clip, d_act = self.dims
        ids = set()
        for e in entries:
            if e.id in ids:
                raise PoolError(f"duplicate entry id {e.id}")
            ids.add(e.id)
            if e.e_txt.shape != (d_clip,) or e.e_img.shape != (d_clip,):
                raise PoolError(f"entry {e.id} has off-size text/image embeddings")
            if e.e_act.shape != (d_act,):
                raise PoolError(f"entry {e.id} has an off-size action embedding")
            for v in (e.e_txt, e.e_img, e.e_act):
                if not np.all(np.isfinite(v)):
                    raise PoolError(f"entry {e.id} has non-finite embeddings")
        self.entries = entries
        self.ids = np.array([e.id for e in entries], dtype=np.uint64)
        self._units = None

    def __len__(self):
        return len(self.entries)

    def _stack(self, attr):
        return np.stack([np.asarray(getattr(e, attr), dtype=np.float64)
                         for e in self.entries])

    def unit_matrices(self):
        """Row-normalized (text, image, action) matrices, built once."""
        if self._units is None:
            self._units = tuple(_unit_rows(self._stack(a))
                                for a in ("e_txt", "e_img", "e_act"))
        return self._units


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.where(norms < _NORM_FLOOR, 0.0, m / np.maximum(norms, _NORM_FLOOR))


def _unit_vec(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return np.zeros_like(v) if n < _NORM_FLOOR else v / n


@dataclass
class RoutingWeights:
    w_txt: float
    w_img: float
    w_act: float

    def as_array(self):
        return np.array([self.w_txt, self.w_img, self.w_act], dtype=np.float64)

    def validate(self):
        a = self.as_array()
        if not (np.all(a > 0.0) and np.all(a < 1.0)):
            raise DimensionError(f"routing weights outside (0,1): {a}")
        if abs(float(a.sum()) - 1.0) > 1e-6:
            raise DimensionError(f"routing weights off the simplex: {a}")
        return self


class RouterParams:
    """Linear gate from pooled token features to three modality logits.

    Zero-initialized so an untrained router weighs all modalities equally.
    """

    def __init__(self, d_model, name="router.gate"):
        self.gate = T.Linear(name, d_model, 3, zero_init=True)

    def named_parameters(self):
        return self.gate.named_parameters()


class QueryProjections:
    """Mean-pool + linear maps bridging token features into the two
    similarity spaces the pool is scored in."""

    def __init__(self, d_model, d_clip, d_act, rng, name="query"):
        self.to_clip = T.Linear(f"{name}.clip", d_model, d_clip, rng.split("clip"))
        self.to_act = T.Linear(f"{name}.act", d_model, d_act, rng.split("act"))

    def named_parameters(self):
        return self.to_clip.named_parameters() + self.to_act.named_parameters()


def _pool_tokens(f_e):
    """Mean over the token axis; accepts [L, D] or [B, L, D]."""
    f_e = T.astensor(f_e)
    if f_e.ndim not in (2, 3):
        raise DimensionError(f"expected [L, D] or [B, L, D] tokens, got {f_e.shape}")
    return T.tmean(f_e, axis=-2)


def route_batch(f_e, router):
    """Simplex routing weights [B, 3] as a graph node, for training."""
    pooled = _pool_tokens(f_e)
    if pooled.ndim == 1:
        pooled = T.reshape(pooled, (1, -1))
    return T.softmax(router.gate(pooled), axis=-1)


def route(f_e, router) -> RoutingWeights:
    with T.no_grad():
        w = route_batch(f_e, router).data
    if w.shape[0] != 1:
        raise DimensionError("route takes a single token matrix; use route_batch")
    return RoutingWeights(*(float(x) for x in w[0]))


def query_batch(f_e, proj):
    """(q_clip [B, d_clip], q_act [B, d_act]) as graph nodes."""
    pooled = _pool_tokens(f_e)
    if pooled.ndim == 1:
        pooled = T.reshape(pooled, (1, -1))
    return proj.to_clip(pooled), proj.to_act(pooled)


def query_projections(f_e, proj):
    with T.no_grad():
        qc, qa = query_batch(f_e, proj)
    return qc.data[0], qa.data[0]


def mixture_scores(q_clip, q_act, weights: RoutingWeights, pool: MemoryPool):
    """Routing-weighted cosine score of the query against every entry."""
    if len(pool) == 0:
        raise PoolError("cannot score an empty pool")
    u_txt, u_img, u_act = pool.unit_matrices()
    qc, qa = _unit_vec(q_clip), _unit_vec(q_act)
    return (weights.w_txt * (u_txt @ qc) + weights.w_img * (u_img @ qc)
            + weights.w_act * (u_act @ qa))


def mixture_scores_batch(q_clip, q_act, weights, pool: MemoryPool):
    """Graph-path scores [B, N]; `weights` is a [B, 3] simplex Tensor."""
    if len(pool) == 0:
        raise PoolError("cannot score an empty pool")
    u_txt, u_img, u_act = (T.Tensor(u) for u in pool.unit_matrices())
    qc = T.l2_normalize_rows(T.astensor(q_clip))
    qa = T.l2_normalize_rows(T.astensor(q_act))
    sims = (T.matmul(qc, T.transpose(u_txt)), T.matmul(qc, T.transpose(u_img)),
            T.matmul(qa, T.transpose(u_act)))
    out = None
    for j, sim in enumerate(sims):
        term = T.mul(weights[:, j:j + 1], sim)
        out = term if out is None else T.add(out, term)
    return out


@dataclass
class RetrievalResult:
    """Top-K slice of the pool plus the context that produced it.

    `top_indices` are pool positions in descending score order (ties resolved
    by smaller entry id); memories are the exact stored embedding arrays.
    """

    scores: np.ndarray
    top_indices: list
    text_mem: np.ndarray
    image_mems: np.ndarray
    action_mems: np.ndarray
    weights: RoutingWeights = None
    top_ids: list = None


def topk_positions(scores, ids, k):
    """Positions of the k largest scores, descending, smaller id on ties.

    Matches a full lexicographic sort exactly: the partial-selection path
    first finds the k-th score, then sorts every candidate at or above it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if k < n:
        kth = scores[np.argpartition(-scores, k - 1)[:k]].min()
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((np.asarray(ids)[cand], -scores[cand]))]
    return order[:k]


def retrieve(scores, pool: MemoryPool, k, weights=None) -> RetrievalResult:
    scores = np.asarray(scores, dtype=np.float64)
    n = len(pool)
    if scores.shape != (n,):
        raise DimensionError(f"scores shape {scores.shape} does not match pool size {n}")
    if not 1 <= k <= n:
        raise CapacityError(f"k={k} outside [1, {n}]")
    top = topk_positions(scores, pool.ids, k)
    picked = [pool.entries[i] for i in top]
    return RetrievalResult(
        scores=scores,
        top_indices=[int(i) for i in top],
        text_mem=picked[0].e_txt,
        image_mems=np.stack([e.e_img for e in picked]),
        action_mems=np.stack([e.e_act for e in picked]),
        weights=weights,
        top_ids=[int(e.id) for e in picked])


def pool_merge(a: MemoryPool, b: MemoryPool) -> MemoryPool:
    """Concatenate pools; colliding ids from `b` are reassigned above the max."""
    if a.dims != b.dims:
        raise PoolError(f"pool dims differ: {a.dims} vs {b.dims}")
    taken = {int(e.id) for e in a.entries}
    next_id = max(taken, default=-1) + 1
    merged = list(a.entries)
    for e in b.entries:
        eid = int(e.id)
        if eid in taken:
            eid = next_id
        taken.add(eid)
        next_id = max(next_id, eid + 1)
        merged.append(MemoryEntry(eid, e.e_txt, e.e_img, e.e_act, e.source_tag))
    return MemoryPool(merged, dims=a.dims)
