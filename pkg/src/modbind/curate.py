"""Training-pair curation: caption dedup, leakage filtering, retrieval-paired
quintuples, similarity-prioritized greedy matching, and diversity selection
for human verification.

Scores are cosine similarities computed inside one caption-to-pool space;
they are never compared across pools (each bi-modal retrieval space has its
own scale).
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EmbeddingStore, ItemId, ItemRecord, MatchConfig, Modality
from .errors import EmptyPool
from .simindex import ExactIndex, HnswConfig, HnswIndex, Index


@dataclass(frozen=True)
class Quintuple:
    """One caption paired with its best match in each non-text modality."""

    caption_id: ItemId
    image_id: ItemId
    video_id: ItemId
    audio_id: ItemId
    points_id: ItemId
    scores: dict[Modality, float]

    def slot(self, modality: Modality) -> ItemId:
        return {
            Modality.IMAGE: self.image_id,
            Modality.VIDEO: self.video_id,
            Modality.AUDIO: self.audio_id,
            Modality.POINTS: self.points_id,
        }[modality]

    def with_slot(self, modality: Modality, item: ItemId, score: float) -> "Quintuple":
        ids = {m: self.slot(m) for m in (Modality.IMAGE, Modality.VIDEO, Modality.AUDIO, Modality.POINTS)}
        ids[modality] = item
        scores = dict(self.scores)
        scores[modality] = score
        return Quintuple(
            self.caption_id,
            ids[Modality.IMAGE],
            ids[Modality.VIDEO],
            ids[Modality.AUDIO],
            ids[Modality.POINTS],
            scores,
        )


@dataclass(frozen=True)
class CandidatePair:
    caption_id: ItemId
    candidate_id: ItemId
    score: float


@dataclass
class MatchResult:
    pairs: list[CandidatePair]
    per_text_count: dict[ItemId, int]
    per_candidate_count: dict[ItemId, int]


@dataclass(frozen=True)
class CandidateTriple:
    """A caption with per_caption candidates in randomized display order."""

    caption_id: ItemId
    candidate_ids: tuple[ItemId, ...]
    scores: tuple[float, ...]


def caption_key(text: str) -> str:
    """Dedup key: NFC, trimmed, whitespace-collapsed, lowercased exact match."""
    norm = unicodedata.normalize("NFC", text)
    return " ".join(norm.split()).lower()


def dedup_captions(captions: list[ItemRecord]) -> list[ItemRecord]:
    """Keep the first record per normalized caption key, order preserved."""
    seen: set[str] = set()
    out = []
    for rec in captions:
        if rec.caption is None:
            raise ValueError(f"record {rec.id} has no caption text")
        key = caption_key(rec.caption)
        if key not in seen:
            seen.add(key)
            out.append(rec)
    return out


def apply_exclusions(pool: EmbeddingStore, denylist: set[ItemId]) -> EmbeddingStore:
    """Drop denylisted rows and anything in the Eval split, order preserved."""
    keep = [
        i
        for i, rec in enumerate(pool.records)
        if rec.id not in denylist and not rec.is_eval
    ]
    if len(keep) == pool.count:
        return pool
    return pool.take(keep)


def load_denylist(path: str | Path) -> set[ItemId]:
    """One dataset-qualified id per line; blank lines and # comments ignored."""
    out = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.add(ItemId.parse(line))
    return out


def _build_index(store: EmbeddingStore, cfg: HnswConfig | None) -> Index:
    if cfg is None:
        return ExactIndex(store)
    return HnswIndex(store, cfg)


def build_quintuples(
    captions: EmbeddingStore,
    pools: dict[Modality, EmbeddingStore],
    index_cfg: HnswConfig | None = None,
    caption_views: dict[Modality, EmbeddingStore] | None = None,
) -> list[Quintuple]:
    """One quintuple per train-split caption: top-1 hit from every pool.

    ``caption_views[mod]``, when given, holds the caption embeddings expressed
    in pool ``mod``'s space (row-aligned with ``captions``); by default the
    caption store itself is queried against every pool. Eval-split items are
    filtered from both sides so no quintuple can leak into evaluation.
    """
    needed = [Modality.IMAGE, Modality.VIDEO, Modality.AUDIO, Modality.POINTS]
    for mod in needed:
        if mod not in pools:
            raise EmptyPool(mod)
    caption_rows = [i for i, rec in enumerate(captions.records) if not rec.is_eval]
    views = caption_views or {}
    top: dict[Modality, list[tuple[int, float]]] = {}
    pool_records: dict[Modality, list[ItemRecord]] = {}
    for mod in needed:
        pool = apply_exclusions(pools[mod], set())
        if pool.count == 0:
            raise EmptyPool(mod)
        view = views.get(mod, captions)
        index = _build_index(pool, index_cfg)
        hits = index.search_rows(view.data[caption_rows], 1)
        top[mod] = [(int(rows[0]), float(scores[0])) for rows, scores in hits]
        pool_records[mod] = pool.records
    out = []
    for qi, ci in enumerate(caption_rows):
        ids = {}
        scores = {}
        for mod in needed:
            row, score = top[mod][qi]
            ids[mod] = pool_records[mod][row].id
            scores[mod] = score
        out.append(
            Quintuple(
                captions.records[ci].id,
                ids[Modality.IMAGE],
                ids[Modality.VIDEO],
                ids[Modality.AUDIO],
                ids[Modality.POINTS],
                scores,
            )
        )
    return out


def top_k_candidates(
    captions: EmbeddingStore,
    pool: EmbeddingStore,
    k: int,
    index_cfg: HnswConfig | None = None,
    caption_view: EmbeddingStore | None = None,
) -> list[CandidatePair]:
    """Up to k candidate pairs per train-split caption from one pool."""
    pool = apply_exclusions(pool, set())
    if pool.count == 0:
        raise EmptyPool(pool.modality)
    caption_rows = [i for i, rec in enumerate(captions.records) if not rec.is_eval]
    view = caption_view if caption_view is not None else captions
    index = _build_index(pool, index_cfg)
    hits = index.search_rows(view.data[caption_rows], k)
    pairs = []
    for qi, (rows, scores) in zip(caption_rows, hits):
        cap_id = captions.records[qi].id
        for row, score in zip(rows, scores):
            pairs.append(CandidatePair(cap_id, pool.records[int(row)].id, float(score)))
    return pairs


def greedy_match(candidates: list[CandidatePair], cfg: MatchConfig) -> MatchResult:
    """Similarity-prioritized greedy matching.

    Candidates are scanned once in descending-score order (ties: caption id,
    then candidate id, ascending); a pair is accepted iff its caption has
    fewer than n accepted pairs and its candidate fewer than m_cap.
    """
    order = sorted(
        candidates, key=lambda c: (-c.score, c.caption_id, c.candidate_id)
    )
    text_seen: dict[ItemId, int] = {}
    cand_seen: dict[ItemId, int] = {}
    accepted = []
    for pair in order:
        if text_seen.get(pair.caption_id, 0) >= cfg.n:
            continue
        if cand_seen.get(pair.candidate_id, 0) >= cfg.m_cap:
            continue
        text_seen[pair.caption_id] = text_seen.get(pair.caption_id, 0) + 1
        cand_seen[pair.candidate_id] = cand_seen.get(pair.candidate_id, 0) + 1
        accepted.append(pair)
    return MatchResult(accepted, text_seen, cand_seen)


def select_diverse(
    matched: MatchResult, per_caption: int = 3, seed: int = 0
) -> list[CandidateTriple]:
    """Keep captions with >= per_caption accepted candidates; top per_caption
    by score each, presentation order randomized by a seeded shuffle."""
    by_caption: dict[ItemId, list[CandidatePair]] = {}
    caption_order: list[ItemId] = []
    for pair in matched.pairs:
        if pair.caption_id not in by_caption:
            caption_order.append(pair.caption_id)
        by_caption.setdefault(pair.caption_id, []).append(pair)
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for cap in caption_order:
        group = by_caption[cap]
        if len(group) < per_caption:
            continue
        group = sorted(group, key=lambda c: (-c.score, c.candidate_id))[:per_caption]
        perm = rng.permutation(per_caption)
        out.append(
            CandidateTriple(
                cap,
                tuple(group[i].candidate_id for i in perm),
                tuple(group[i].score for i in perm),
            )
        )
    return out


# -- JSON-lines exports ------------------------------------------------------

_SLOT_NAMES = {
    Modality.IMAGE: "image",
    Modality.VIDEO: "video",
    Modality.AUDIO: "audio",
    Modality.POINTS: "points",
}


def quintuple_to_json(q: Quintuple) -> dict:
    obj: dict = {"caption": str(q.caption_id)}
    for mod, name in _SLOT_NAMES.items():
        obj[name] = str(q.slot(mod))
        obj[f"score_{name}"] = q.scores[mod]
    return obj


def quintuple_from_json(obj: dict) -> Quintuple:
    return Quintuple(
        ItemId.parse(obj["caption"]),
        ItemId.parse(obj["image"]),
        ItemId.parse(obj["video"]),
        ItemId.parse(obj["audio"]),
        ItemId.parse(obj["points"]),
        {mod: float(obj[f"score_{name}"]) for mod, name in _SLOT_NAMES.items()},
    )


def save_quintuples(quintuples: list[Quintuple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in quintuples:
            f.write(json.dumps(quintuple_to_json(q)) + "\n")


def load_quintuples(path: str | Path) -> list[Quintuple]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(quintuple_from_json(json.loads(line)))
    return out


def save_pairs(pairs: list[CandidatePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {
                        "caption": str(p.caption_id),
                        "candidate": str(p.candidate_id),
                        "score": p.score,
                    }
                )
                + "\n"
            )


def load_pairs(path: str | Path) -> list[CandidatePair]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append(
                CandidatePair(
                    ItemId.parse(obj["caption"]),
                    ItemId.parse(obj["candidate"]),
                    float(obj["score"]),
                )
            )
    return out


def save_triples(triples: list[CandidateTriple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triples:
            f.write(
                json.dumps(
                    {
                        "caption": str(t.caption_id),
                        "candidates": [str(c) for c in t.candidate_ids],
                        "scores": list(t.scores),
                    }
                )
                + "\n"
            )


def load_triples(path: str | Path) -> list[CandidateTriple]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append(
                CandidateTriple(
                    ItemId.parse(obj["caption"]),
                    tuple(ItemId.parse(c) for c in obj["candidates"]),
                    tuple(float(s) for s in obj["scores"]),
                )
            )
    return out
