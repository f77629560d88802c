"""Synthetic multimodal embedding worlds with known ground truth.

Each world has C well-separated concept directions. Every item draws one
latent z = concept + sigma * gaussian, shared by all modalities; modality
stores hold normalize(Q_mod @ z) with one orthogonal transform for the
frozen trio (text/image/video live in one space) and separate transforms for
audio and points. A linear map therefore binds the spaces exactly, which
makes end-to-end training thresholds principled.

Caption-to-pool pairing needs mutually comparable spaces, so the world also
emits a "pairing view" of the caption items per projected pool:
normalize(Q_pool @ z).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    EmbeddingStore,
    ItemId,
    ItemRecord,
    Modality,
    Split,
)
from .curate import Quintuple
from .errors import InfeasibleConcepts

CONCEPT_MAX_SIM = 0.5
_REJECTION_LIMIT = 10_000


@dataclass
class ConceptWorld:
    C: int
    d: int
    sigma: float
    seed: int
    concepts: np.ndarray                      # C x d unit rows
    transforms: dict[Modality, np.ndarray]    # orthogonal d x d each
    assignments: np.ndarray                   # item -> concept index

    def concept_of(self, item_index: int) -> int:
        return int(self.assignments[item_index])


@dataclass
class WorldBundle:
    world: ConceptWorld
    stores: dict[Modality, EmbeddingStore]
    # caption items expressed in each projected pool's space, row-aligned
    # with the text store
    caption_views: dict[Modality, EmbeddingStore]


def _sample_concepts(rng: np.random.Generator, C: int, d: int) -> np.ndarray:
    concepts = np.zeros((C, d))
    placed = 0
    tries = 0
    while placed < C:
        if tries >= _REJECTION_LIMIT:
            raise InfeasibleConcepts(
                f"could not place {C} concepts in {d} dims "
                f"under pairwise similarity < {CONCEPT_MAX_SIM}"
            )
        tries += 1
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        if placed and (concepts[:placed] @ v).max() >= CONCEPT_MAX_SIM:
            continue
        concepts[placed] = v
        placed += 1
    return concepts


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    # fix the QR sign ambiguity so the transform is a deterministic
    # function of the gaussian draw
    q = q * np.sign(np.diag(r))
    return q


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


_DATASET_TAGS = {
    Modality.TEXT: "syn-text",
    Modality.IMAGE: "syn-image",
    Modality.VIDEO: "syn-video",
    Modality.AUDIO: "syn-audio",
    Modality.POINTS: "syn-points",
}


def gen_world(
    C: int,
    d: int,
    items_per_modality: int,
    sigma: float,
    seed: int,
    eval_count: int = 0,
) -> WorldBundle:
    """Generate a world plus one normalized store per modality.

    The last ``eval_count`` items are marked Eval in every modality; the
    leakage rules downstream keep them out of all training pairings.
    """
    if C < 2:
        raise ValueError("need at least 2 concepts")
    if d < max(8, C):
        raise ValueError(f"d must be >= max(8, C) = {max(8, C)}")
    if not 0 <= eval_count <= items_per_modality:
        raise ValueError("eval_count out of range")
    rng = np.random.Generator(np.random.PCG64(seed))
    concepts = _sample_concepts(rng, C, d)
    q_frozen = _orthogonal(rng, d)
    q_audio = _orthogonal(rng, d)
    q_points = _orthogonal(rng, d)
    transforms = {
        Modality.TEXT: q_frozen,
        Modality.IMAGE: q_frozen,
        Modality.VIDEO: q_frozen,
        Modality.AUDIO: q_audio,
        Modality.POINTS: q_points,
    }
    n = items_per_modality
    assignments = rng.integers(0, C, size=n)
    latents = concepts[assignments] + sigma * rng.normal(size=(n, d))
    world = ConceptWorld(C, d, sigma, seed, concepts, transforms, assignments)

    def records_for(mod: Modality) -> list[ItemRecord]:
        tag = _DATASET_TAGS[mod]
        recs = []
        for i in range(n):
            split = (
                frozenset({Split.EVAL})
                if i >= n - eval_count
                else frozenset({Split.TRAIN})
            )
            caption = f"concept {assignments[i]} item {i}" if mod is Modality.TEXT else None
            recs.append(
                ItemRecord(ItemId(tag, i), mod, caption=caption, split_membership=split)
            )
        return recs

    stores = {}
    for mod in Modality:
        data = _normalize_rows(latents @ transforms[mod].T).astype(np.float32)
        stores[mod] = EmbeddingStore(mod, data, records_for(mod), normalized=True)
    caption_views = {}
    for mod in (Modality.AUDIO, Modality.POINTS):
        data = _normalize_rows(latents @ transforms[mod].T).astype(np.float32)
        caption_views[mod] = EmbeddingStore(
            mod, data, records_for(Modality.TEXT), normalized=True
        )
    return WorldBundle(world, stores, caption_views)


@dataclass(frozen=True)
class PairLabel:
    caption_id: ItemId
    candidate_id: ItemId
    p: float


def corrupt_pairs(
    quintuples: list[Quintuple],
    slot: Modality,
    world: ConceptWorld,
    pool: EmbeddingStore,
    fraction: float,
    seed: int,
    partial_fraction: float = 0.0,
    caption_view: EmbeddingStore | None = None,
) -> tuple[list[Quintuple], list[PairLabel]]:
    """Swap a seeded random subset of one slot to wrong-concept pool items.

    Returns the modified quintuples plus labels: corrupted pairs are negative
    (p=0), clean pairs positive (p=1), and optionally a further
    partial_fraction get a same-concept-different-item swap labeled 0.5.
    Swapped pairs record the caption-view similarity to the new item when a
    view is given, else the new item's similarity to the replaced one.
    """
    if not 0.0 <= fraction <= 1.0 or not 0.0 <= partial_fraction <= 1.0:
        raise ValueError("fractions must lie in [0, 1]")
    if fraction + partial_fraction > 1.0:
        raise ValueError("fraction + partial_fraction exceeds 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    pool_concepts = np.array(
        [world.concept_of(rec.id.local_id) for rec in pool.records]
    )
    # never swap in an eval item: replacements must obey the leakage rule
    usable = np.array([not rec.is_eval for rec in pool.records])

    def swap_score(q: Quintuple, row: int) -> float:
        ref = (
            caption_view.data[caption_view.row_of(q.caption_id)]
            if caption_view is not None
            else pool.data[pool.row_of(q.slot(slot))]
        )
        return float(ref.astype(np.float64) @ pool.data[row].astype(np.float64))

    out_q: list[Quintuple] = []
    labels: list[PairLabel] = []
    for q in quintuples:
        current = q.slot(slot)
        concept = world.concept_of(current.local_id)
        u = rng.random()
        if u < fraction:
            wrong_rows = np.flatnonzero((pool_concepts != concept) & usable)
            row = int(wrong_rows[rng.integers(0, len(wrong_rows))])
            item = pool.records[row].id
            out_q.append(q.with_slot(slot, item, swap_score(q, row)))
            labels.append(PairLabel(q.caption_id, item, 0.0))
        elif u < fraction + partial_fraction:
            same_rows = np.flatnonzero((pool_concepts == concept) & usable)
            same_rows = np.array(
                [r for r in same_rows if pool.records[r].id != current], dtype=int
            )
            if len(same_rows) == 0:
                out_q.append(q)
                labels.append(PairLabel(q.caption_id, current, 1.0))
                continue
            row = int(same_rows[rng.integers(0, len(same_rows))])
            item = pool.records[row].id
            out_q.append(q.with_slot(slot, item, swap_score(q, row)))
            labels.append(PairLabel(q.caption_id, item, 0.5))
        else:
            out_q.append(q)
            labels.append(PairLabel(q.caption_id, current, 1.0))
    return out_q, labels


def save_world(bundle: WorldBundle, out_dir: str | Path) -> None:
    """World descriptor JSON + per-modality stores + ground-truth assignments."""
    from .core import save_store

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = bundle.world
    desc = {
        "C": w.C,
        "d": w.d,
        "sigma": w.sigma,
        "seed": w.seed,
        "items": int(len(w.assignments)),
    }
    (out / "world.json").write_text(json.dumps(desc, indent=2) + "\n")
    with open(out / "assignments.jsonl", "w") as f:
        for i, c in enumerate(w.assignments):
            f.write(json.dumps({"item": i, "concept": int(c)}) + "\n")
    np.savez(
        out / "oracle.npz",
        concepts=w.concepts,
        assignments=w.assignments,
        **{f"Q_{m.value}": q for m, q in w.transforms.items()},
    )
    for mod, store in bundle.stores.items():
        save_store(store, out / f"{mod.value}.ebem")
    for mod, view in bundle.caption_views.items():
        save_store(view, out / f"captions_as_{mod.value}.ebem")


def load_world(out_dir: str | Path) -> WorldBundle:
    from .core import load_store

    out = Path(out_dir)
    desc = json.loads((out / "world.json").read_text())
    with np.load(out / "oracle.npz") as blob:
        concepts = blob["concepts"]
        assignments = blob["assignments"]
        transforms = {m: blob[f"Q_{m.value}"] for m in Modality}
    world = ConceptWorld(
        desc["C"], desc["d"], desc["sigma"], desc["seed"],
        concepts, transforms, assignments,
    )
    stores = {m: load_store(out / f"{m.value}.ebem") for m in Modality}
    views = {
        m: load_store(out / f"captions_as_{m.value}.ebem")
        for m in (Modality.AUDIO, Modality.POINTS)
    }
    return WorldBundle(world, stores, views)
