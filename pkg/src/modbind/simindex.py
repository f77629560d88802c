"""Exact and approximate (HNSW) cosine-similarity indices.

Both indices require pre-normalized stores and score by dot product, so
"similarity" below always means cosine. Ties are broken by ascending row
index everywhere, which keeps searches reproducible.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass

import numpy as np

from .core import EmbeddingStore, ItemId
from .errors import DimMismatch, FormatError, NotNormalized


@dataclass(frozen=True)
class SearchHit:
    row: int
    id: ItemId
    score: float


@dataclass(frozen=True)
class HnswConfig:
    M: int = 32
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("ef parameters must be positive")


def _check_queries(store: EmbeddingStore, queries: EmbeddingStore) -> None:
    if queries.dim != store.dim:
        raise DimMismatch(f"query dim {queries.dim} != index dim {store.dim}")
    if not queries.normalized:
        raise NotNormalized("queries must be normalized")


def _topk_rows(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k indices of one score row, descending score, ties by ascending index."""
    k = min(k, scores.shape[0])
    if k == scores.shape[0]:
        order = np.argsort(-scores, kind="stable")
    else:
        # argpartition may split a tie group across the k boundary
        # arbitrarily, so gather every row tied with the k-th value before
        # sorting by (-score, index) and truncating.
        part = np.argpartition(-scores, k - 1)
        kth = scores[part[k - 1]]
        cand = np.flatnonzero(scores >= kth)
        order = cand[np.lexsort((cand, -scores[cand]))][:k]
    return order, scores[order]


class ExactIndex:
    """Ground-truth index: full double-precision scan of dot products."""

    def __init__(self, store: EmbeddingStore):
        if not store.normalized:
            raise NotNormalized("exact index requires a normalized store")
        self.store = store
        self._data64 = store.data.astype(np.float64)

    @property
    def dim(self) -> int:
        return self.store.dim

    def search_rows(self, queries: np.ndarray, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
        q = np.asarray(queries, dtype=np.float64)
        # one matvec per query so a batch is bitwise identical to a loop of
        # single-query calls (gemm blocking would round differently)
        return [_topk_rows(self._data64 @ q[i], k) for i in range(q.shape[0])]

    def search(self, queries: EmbeddingStore, k: int) -> list[list[SearchHit]]:
        _check_queries(self.store, queries)
        out = []
        for rows, scores in self.search_rows(queries.data, k):
            recs = self.store.records
            out.append(
                [SearchHit(int(r), recs[int(r)].id, float(s)) for r, s in zip(rows, scores)]
            )
        return out


class HnswIndex:
    """Navigable small-world graph over a normalized store.

    Max out-degree is M per layer and 2M at layer 0; node levels follow the
    usual exponential distribution with mL = 1/ln(M), drawn from a generator
    seeded by the config, so identical (store, config) gives an identical
    graph. Insertion is sequential for the same reason.
    """

    def __init__(self, store: EmbeddingStore, cfg: HnswConfig = HnswConfig()):
        if not store.normalized:
            raise NotNormalized("hnsw index requires a normalized store")
        if store.count < 1:
            raise ValueError("hnsw index needs at least one vector")
        self.store = store
        self.cfg = cfg
        self._vecs = store.data
        n = store.count
        self._m = cfg.M
        self._m0 = 2 * cfg.M
        self._ml = 1.0 / math.log(cfg.M)
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        # (0, 1] uniforms so log() is finite
        self._levels = np.floor(
            -np.log(1.0 - rng.random(n)) * self._ml
        ).astype(np.int64)
        self._max_level = 0
        self._entry = 0
        # neighbor table + degree count per layer; capacity fixed by the caps
        self._nbrs: list[np.ndarray] = []
        self._cnts: list[np.ndarray] = []
        self._stamp = np.zeros(n, dtype=np.int64)
        self._cur_stamp = 0
        self._build()

    # -- construction ------------------------------------------------------

    def _ensure_layer(self, layer: int) -> None:
        n = self.store.count
        while len(self._nbrs) <= layer:
            cap = self._m0 if len(self._nbrs) == 0 else self._m
            self._nbrs.append(np.empty((n, cap), dtype=np.int32))
            self._cnts.append(np.zeros(n, dtype=np.int32))

    def _build(self) -> None:
        n = self.store.count
        self._max_level = int(self._levels[0])
        self._ensure_layer(self._max_level)
        for i in range(1, n):
            self._insert(i)

    def _insert(self, i: int) -> None:
        vecs = self._vecs
        q = vecs[i]
        level = int(self._levels[i])
        self._ensure_layer(level)
        ep = [(-float(vecs[self._entry] @ q), self._entry)]
        for layer in range(self._max_level, level, -1):
            ep = self._search_layer(q, ep, layer, 1)
        for layer in range(min(level, self._max_level), -1, -1):
            cands = self._search_layer(q, ep, layer, self.cfg.ef_construction)
            cap = self._m0 if layer == 0 else self._m
            chosen = cands[: self._m]
            nbr, cnt = self._nbrs[layer], self._cnts[layer]
            ids = np.fromiter((c[1] for c in chosen), dtype=np.int32, count=len(chosen))
            nbr[i, : len(ids)] = ids
            cnt[i] = len(ids)
            for _, u in chosen:
                du = cnt[u]
                if du < cap:
                    nbr[u, du] = i
                    cnt[u] = du + 1
                else:
                    self._prune(u, i, layer, cap)
            ep = cands
        if level > self._max_level:
            self._max_level = level
            self._entry = i

    def _prune(self, u: int, extra: int, layer: int, cap: int) -> None:
        """Keep the cap nearest neighbors of u among current ones plus extra."""
        nbr, cnt = self._nbrs[layer], self._cnts[layer]
        ids = np.concatenate([nbr[u, : cnt[u]], np.int32([extra])])
        dots = self._vecs[ids] @ self._vecs[u]
        keep = ids[np.lexsort((ids, -dots))][:cap]
        nbr[u, : len(keep)] = keep
        cnt[u] = len(keep)

    # -- search ------------------------------------------------------------

    def _search_layer(
        self, q: np.ndarray, entry: list[tuple[float, int]], layer: int, ef: int
    ) -> list[tuple[float, int]]:
        """Beam search at one layer; returns (neg-similarity, id) ascending."""
        vecs = self._vecs
        nbr, cnt = self._nbrs[layer], self._cnts[layer]
        stamp = self._stamp
        self._cur_stamp += 1
        cur = self._cur_stamp
        cand: list[tuple[float, int]] = []
        best: list[tuple[float, int]] = []
        for d, v in entry:
            if stamp[v] != cur:
                stamp[v] = cur
                heapq.heappush(cand, (d, v))
                heapq.heappush(best, (-d, v))
        while len(best) > ef:
            heapq.heappop(best)
        while cand:
            d, v = heapq.heappop(cand)
            if len(best) >= ef and d > -best[0][0]:
                break
            ids = nbr[v, : cnt[v]]
            if ids.size == 0:
                continue
            fresh = ids[stamp[ids] != cur]
            if fresh.size == 0:
                continue
            stamp[fresh] = cur
            dots = vecs[fresh] @ q
            worst = -best[0][0] if best else math.inf
            nb = len(best)
            for nid, s in zip(fresh.tolist(), dots.tolist()):
                nd = -s
                if nb < ef:
                    heapq.heappush(cand, (nd, nid))
                    heapq.heappush(best, (-nd, nid))
                    nb += 1
                    worst = -best[0][0]
                elif nd < worst:
                    heapq.heappush(cand, (nd, nid))
                    heapq.heapreplace(best, (-nd, nid))
                    worst = -best[0][0]
        out = [(-nd, v) for nd, v in best]
        out.sort()
        return out

    def search_rows(self, queries: np.ndarray, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
        ef = max(self.cfg.ef_search, k)  # silently raise ef to k
        vecs = self._vecs
        out = []
        for qi in range(queries.shape[0]):
            q = np.ascontiguousarray(queries[qi], dtype=np.float32)
            ep = [(-float(vecs[self._entry] @ q), self._entry)]
            for layer in range(self._max_level, 0, -1):
                ep = self._search_layer(q, ep, layer, 1)
            found = self._search_layer(q, ep, 0, ef)
            found = found[:k]
            # ascending neg-similarity with id tie-break == descending score
            # with ascending-row tie-break
            rows = np.array([v for _, v in found], dtype=np.int64)
            scores = np.array([-d for d, _ in found], dtype=np.float64)
            out.append((rows, scores))
        return out

    def search(self, queries: EmbeddingStore, k: int) -> list[list[SearchHit]]:
        _check_queries(self.store, queries)
        recs = self.store.records
        out = []
        for rows, scores in self.search_rows(queries.data, k):
            out.append(
                [SearchHit(int(r), recs[int(r)].id, float(s)) for r, s in zip(rows, scores)]
            )
        return out


Index = ExactIndex | HnswIndex


def build_exact(store: EmbeddingStore) -> ExactIndex:
    return ExactIndex(store)


def build_hnsw(store: EmbeddingStore, cfg: HnswConfig = HnswConfig()) -> HnswIndex:
    return HnswIndex(store, cfg)


def search(index: Index, queries: EmbeddingStore, k: int) -> list[list[SearchHit]]:
    if k < 1:
        raise ValueError("k must be positive")
    return index.search(queries, k)


def store_checksum(store: EmbeddingStore) -> str:
    h = hashlib.sha256()
    h.update(store.data.tobytes())
    for rec in store.records:
        h.update(str(rec.id).encode())
    return h.hexdigest()


def save_hnsw(index: HnswIndex, path) -> None:
    """Persist the graph; loading re-binds to a store with a matching checksum."""
    arrays = {
        "levels": index._levels,
        "meta": np.array(
            [index._entry, index._max_level, len(index._nbrs)], dtype=np.int64
        ),
        "config": np.array(
            [index.cfg.M, index.cfg.ef_construction, index.cfg.ef_search, index.cfg.seed],
            dtype=np.int64,
        ),
        "checksum": np.frombuffer(
            bytes.fromhex(store_checksum(index.store)), dtype=np.uint8
        ),
    }
    for layer, (nbr, cnt) in enumerate(zip(index._nbrs, index._cnts)):
        arrays[f"nbr{layer}"] = nbr
        arrays[f"cnt{layer}"] = cnt
    np.savez(path, **arrays)


def load_hnsw(path, store: EmbeddingStore) -> HnswIndex:
    with np.load(path) as blob:
        saved_sum = bytes(blob["checksum"]).hex()
        if saved_sum != store_checksum(store):
            raise FormatError("index checksum does not match the given store")
        m, ef_c, ef_s, seed = (int(x) for x in blob["config"])
        cfg = HnswConfig(M=m, ef_construction=ef_c, ef_search=ef_s, seed=seed)
        index = HnswIndex.__new__(HnswIndex)
        index.store = store
        index.cfg = cfg
        index._vecs = store.data
        index._m = m
        index._m0 = 2 * m
        index._ml = 1.0 / math.log(m)
        index._levels = blob["levels"]
        entry, max_level, n_layers = (int(x) for x in blob["meta"])
        index._entry = entry
        index._max_level = max_level
        index._nbrs = [blob[f"nbr{i}"].copy() for i in range(n_layers)]
        index._cnts = [blob[f"cnt{i}"].copy() for i in range(n_layers)]
        index._stamp = np.zeros(store.count, dtype=np.int64)
        index._cur_stamp = 0
    return index
