"""Evaluation protocols: cross-modal recall@k with multi-caption semantics,
zero-shot classification against class-mean (or template-mean)
representatives, multi-label mAP, and the bidirectional audio/points
zero-shot task.

All stores must be normalized; similarity is a dot product and every tie
breaks by ascending index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingStore, ItemId, ItemRecord, Modality
from .errors import (
    ClassCountMismatch,
    DimMismatch,
    EmptyClass,
    MissingGroundTruth,
    NoSharedClasses,
    NotNormalized,
    ZeroVector,
)


@dataclass
class GroundTruth:
    relevant: dict[ItemId, set[ItemId]]

    def for_query(self, query: ItemId) -> set[ItemId]:
        try:
            return self.relevant[query]
        except KeyError:
            raise MissingGroundTruth(query) from None


@dataclass(frozen=True)
class EvalReport:
    task: str
    metric: str
    k: int | None
    value: float
    support: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")
        if self.support <= 0:
            raise ValueError("support must be positive")

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric,
            "k": self.k,
            "value": self.value,
            "support": self.support,
        }


def _require_normalized(*stores: EmbeddingStore) -> None:
    for s in stores:
        if not s.normalized:
            raise NotNormalized(f"{s.modality.value} store must be normalized")


def _rank_rows(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending index."""
    return np.argsort(-scores, kind="stable")


def retrieval_recall(
    queries: EmbeddingStore,
    gallery: EmbeddingStore,
    gt: GroundTruth,
    ks: list[int],
    task: str = "retrieval",
) -> list[EvalReport]:
    """R@k = fraction of queries whose top-k hits intersect their relevant
    set. Multi-caption galleries follow the any-match rule: one relevant
    caption in the top k counts as success."""
    _require_normalized(queries, gallery)
    if queries.dim != gallery.dim:
        raise DimMismatch(f"{queries.dim} vs {gallery.dim}")
    ks = sorted(set(ks))
    kmax = min(max(ks), gallery.count)
    gallery64 = gallery.data.astype(np.float64)
    gallery_ids = gallery.ids
    hits_at = {k: 0 for k in ks}
    for qi in range(queries.count):
        relevant = gt.for_query(queries.records[qi].id)
        scores = gallery64 @ queries.data[qi].astype(np.float64)
        order = _rank_rows(scores)[:kmax]
        found_rank = None
        for rank, row in enumerate(order):
            if gallery_ids[int(row)] in relevant:
                found_rank = rank
                break
        for k in ks:
            if found_rank is not None and found_rank < k:
                hits_at[k] += 1
    return [
        EvalReport(task, "R@k", k, hits_at[k] / queries.count, queries.count)
        for k in ks
    ]


def class_representatives(
    classes: list[tuple[str, np.ndarray]],
    modality: Modality = Modality.TEXT,
) -> EmbeddingStore:
    """Renormalized per-class mean of member embeddings."""
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    names = [name for name, _ in classes]
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    reps = []
    for name, members in classes:
        members = np.asarray(members, dtype=np.float64)
        if members.ndim != 2 or members.shape[0] < 1:
            raise ValueError(f"class {name!r} has no members")
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm <= 1e-12:
            raise ZeroVector(name)
        reps.append(mean / norm)
    records = [
        ItemRecord(ItemId("class", i), modality, caption=name)
        for i, name in enumerate(names)
    ]
    return EmbeddingStore(
        modality, np.asarray(reps, dtype=np.float32), records, normalized=True
    )


def template_representatives(
    classes: list[tuple[str, np.ndarray]],
    modality: Modality = Modality.TEXT,
) -> EmbeddingStore:
    """Identical contract to class_representatives, applied to per-class
    prompt-template embeddings."""
    return class_representatives(classes, modality)


def zeroshot_classify(
    items: EmbeddingStore,
    reps: EmbeddingStore,
    true_class: np.ndarray,
    ks: list[int],
    task: str = "zeroshot",
) -> list[EvalReport]:
    """Top-k accuracy of nearest-representative classification."""
    _require_normalized(items, reps)
    if items.dim != reps.dim:
        raise DimMismatch(f"{items.dim} vs {reps.dim}")
    true_class = np.asarray(true_class, dtype=np.int64)
    if true_class.shape != (items.count,):
        raise ClassCountMismatch(
            f"{len(true_class)} labels for {items.count} items"
        )
    if len(true_class) and (true_class.min() < 0 or true_class.max() >= reps.count):
        raise ClassCountMismatch("label index outside representative range")
    ks = sorted(set(ks))
    kmax = min(max(ks), reps.count)
    sims = items.data.astype(np.float64) @ reps.data.astype(np.float64).T
    hits_at = {k: 0 for k in ks}
    for i in range(items.count):
        order = _rank_rows(sims[i])[:kmax]
        where = np.flatnonzero(order == true_class[i])
        rank = int(where[0]) if len(where) else None
        for k in ks:
            if rank is not None and rank < k:
                hits_at[k] += 1
    return [
        EvalReport(task, "Top-k accuracy", k, hits_at[k] / items.count, items.count)
        for k in ks
    ]


def predict_classes(items: EmbeddingStore, reps: EmbeddingStore) -> np.ndarray:
    """Argmax class per item, ties to the lower class index."""
    _require_normalized(items, reps)
    sims = items.data.astype(np.float64) @ reps.data.astype(np.float64).T
    return np.array([int(_rank_rows(row)[0]) for row in sims], dtype=np.int64)


def map_multilabel(scores: np.ndarray, labels: np.ndarray, task: str = "map") -> EvalReport:
    """Mean over classes of average precision.

    AP per class: rank items by class score descending (ties by item index),
    average the precision at each positive's rank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    n_items, n_classes = scores.shape
    aps = []
    for c in range(n_classes):
        positives = labels[:, c] != 0
        if not positives.any():
            raise EmptyClass(c)
        order = _rank_rows(scores[:, c])
        hits = 0
        precisions = []
        for rank, item in enumerate(order, start=1):
            if positives[item]:
                hits += 1
                precisions.append(hits / rank)
        aps.append(float(np.mean(precisions)))
    return EvalReport(task, "mAP", None, float(np.mean(aps)), n_items)


def eshot_eval(
    audio: EmbeddingStore,
    points: EmbeddingStore,
    audio_classes: list[str],
    points_classes: list[str],
    ks: list[int] = [1, 5],
) -> dict[str, list[EvalReport]]:
    """Bidirectional zero-shot between audio and points.

    Direction 1 classifies points against audio class-mean representatives;
    direction 2 classifies audio against points representatives; the mean of
    the two directions is reported per k.
    """
    _require_normalized(audio, points)
    if len(audio_classes) != audio.count or len(points_classes) != points.count:
        raise ClassCountMismatch("class list length != store count")
    shared = sorted(set(audio_classes) & set(points_classes))
    if len(shared) < 2:
        raise NoSharedClasses(f"only {len(shared)} shared classes")
    class_index = {name: i for i, name in enumerate(shared)}

    def members(store: EmbeddingStore, classes: list[str]) -> list[tuple[str, np.ndarray]]:
        rows: dict[str, list[int]] = {name: [] for name in shared}
        for i, name in enumerate(classes):
            if name in rows:
                rows[name].append(i)
        return [(name, store.data[rows[name]]) for name in shared]

    def restrict(store: EmbeddingStore, classes: list[str]):
        keep = [i for i, name in enumerate(classes) if name in class_index]
        labels = np.array([class_index[classes[i]] for i in keep], dtype=np.int64)
        return store.take(keep), labels

    audio_reps = class_representatives(members(audio, audio_classes), audio.modality)
    points_reps = class_representatives(members(points, points_classes), points.modality)
    points_items, points_labels = restrict(points, points_classes)
    audio_items, audio_labels = restrict(audio, audio_classes)
    d1 = zeroshot_classify(points_items, audio_reps, points_labels, ks, task="points->audio-classes")
    d2 = zeroshot_classify(audio_items, points_reps, audio_labels, ks, task="audio->points-classes")
    mean = [
        EvalReport(
            "eshot-mean",
            "Top-k accuracy",
            a.k,
            (a.value + b.value) / 2.0,
            a.support + b.support,
        )
        for a, b in zip(d1, d2)
    ]
    return {"points_to_audio": d1, "audio_to_points": d2, "mean": mean}
