"""Domain types, embedding storage, and normalization/pooling primitives.

The embedding file format is binary, little-endian:

    magic "EBEM" | version u16 = 1 | flags u16 (bit 0 = normalized) |
    modality u8 | 3 reserved bytes | count u64 | dim u32 |
    count * dim float32 payload, row-major

Each file has a JSON-lines sidecar (``<path>.jsonl``) with one object per
row: ``{"dataset", "local_id", "uri", "caption", "splits"}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ZeroVector

MAGIC = b"EBEM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHB3sQI")

NORM_EPS = 1e-12


class Modality(Enum):
    TEXT = "text"
    IMAGE = "image"
    VIDEO = "video"
    AUDIO = "audio"
    POINTS = "points"

    @property
    def is_projected(self) -> bool:
        """Only audio and point clouds pass through trainable projectors."""
        return self in PROJECTED_MODALITIES

    @property
    def is_frozen(self) -> bool:
        return self in FROZEN_MODALITIES

    @property
    def wire_code(self) -> int:
        return _MODALITY_CODES[self]

    @classmethod
    def from_wire_code(cls, code: int) -> "Modality":
        try:
            return _MODALITY_FROM_CODE[code]
        except KeyError:
            raise FormatError(f"unknown modality code {code}") from None


PROJECTED_MODALITIES = frozenset({Modality.AUDIO, Modality.POINTS})
FROZEN_MODALITIES = frozenset({Modality.TEXT, Modality.IMAGE, Modality.VIDEO})

_MODALITY_CODES = {
    Modality.TEXT: 0,
    Modality.IMAGE: 1,
    Modality.VIDEO: 2,
    Modality.AUDIO: 3,
    Modality.POINTS: 4,
}
_MODALITY_FROM_CODE = {v: k for k, v in _MODALITY_CODES.items()}


class Split(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True, order=True)
class ItemId:
    """Dataset-qualified item identity, unique within a workspace."""

    dataset: str
    local_id: int

    def __post_init__(self):
        if not self.dataset or len(self.dataset) > 32 or not self.dataset.isascii():
            raise ValueError(f"bad dataset tag {self.dataset!r}")
        if self.local_id < 0 or self.local_id >= 2**64:
            raise ValueError(f"local_id out of u64 range: {self.local_id}")

    def __str__(self) -> str:
        return f"{self.dataset}/{self.local_id}"

    @classmethod
    def parse(cls, text: str) -> "ItemId":
        dataset, _, local = text.partition("/")
        if not _ or not local.isdigit():
            raise ValueError(f"expected 'dataset/local_id', got {text!r}")
        return cls(dataset, int(local))


@dataclass
class ItemRecord:
    id: ItemId
    modality: Modality
    uri: str | None = None
    caption: str | None = None
    split_membership: frozenset[Split] = frozenset({Split.TRAIN})

    @property
    def is_eval(self) -> bool:
        return Split.EVAL in self.split_membership


@dataclass(frozen=True)
class MatchConfig:
    """Fan-out and multiplicity caps for similarity-prioritized matching."""

    k: int = 8
    n: int = 3
    m_cap: int = 1

    def __post_init__(self):
        if self.k <= 0 or self.n <= 0 or self.m_cap <= 0:
            raise ValueError("k, n, m_cap must be positive")
        if self.k < self.n:
            raise ValueError(f"k ({self.k}) must be >= n ({self.n})")


class EmbeddingStore:
    """Dense row-major float32 embeddings for one modality plus item metadata.

    Immutable after construction; operations return new stores.
    """

    def __init__(
        self,
        modality: Modality,
        data: np.ndarray,
        records: Sequence[ItemRecord],
        normalized: bool = False,
    ):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise ValueError("dim must be positive")
        if not np.isfinite(data).all():
            raise ValueError("embeddings contain NaN/Inf")
        records = list(records)
        if len(records) != data.shape[0]:
            raise ValueError(f"{len(records)} records for {data.shape[0]} rows")
        seen: set[ItemId] = set()
        for rec in records:
            if rec.id in seen:
                raise ValueError(f"duplicate item id {rec.id}")
            seen.add(rec.id)
        if normalized:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            if len(norms) and (np.abs(norms - 1.0) > 1e-4).any():
                bad = int(np.argmax(np.abs(norms - 1.0)))
                raise ValueError(
                    f"normalized flag set but row {bad} has norm {norms[bad]:.6f}"
                )
        self.modality = modality
        self.data = data
        self.data.setflags(write=False)
        self.records = records
        self.normalized = normalized
        self._row_of: dict[ItemId, int] | None = None

    @classmethod
    def from_ids(
        cls,
        modality: Modality,
        data: np.ndarray,
        ids: Sequence[ItemId],
        normalized: bool = False,
    ) -> "EmbeddingStore":
        records = [ItemRecord(id=i, modality=modality) for i in ids]
        return cls(modality, data, records, normalized)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def ids(self) -> list[ItemId]:
        return [rec.id for rec in self.records]

    def row_of(self, item: ItemId) -> int:
        if self._row_of is None:
            self._row_of = {rec.id: i for i, rec in enumerate(self.records)}
        return self._row_of[item]

    def __len__(self) -> int:
        return self.count

    def take(self, rows: Sequence[int]) -> "EmbeddingStore":
        """New store with the given rows, order as given."""
        idx = list(rows)
        return EmbeddingStore(
            self.modality,
            self.data[idx].copy(),
            [self.records[i] for i in idx],
            self.normalized,
        )


def l2_normalize(store: EmbeddingStore) -> EmbeddingStore:
    """Return a copy of ``store`` with unit-norm rows.

    Raises ZeroVector(row) if any row has norm <= 1e-12.
    """
    norms = np.linalg.norm(store.data.astype(np.float64), axis=1)
    if len(norms):
        bad = int(np.argmin(norms))
        if norms[bad] <= NORM_EPS:
            raise ZeroVector(bad)
    data = (store.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingStore(store.modality, data, store.records, normalized=True)


def mean_pool(rows: Iterable[np.ndarray], renormalize: bool = False) -> np.ndarray:
    """Coordinate-wise mean of embedding vectors, optionally renormalized.

    Used to collapse per-frame video embeddings to one vector.
    """
    mat = np.asarray(list(rows), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError("mean_pool needs at least one vector")
    if not np.isfinite(mat).all():
        raise ValueError("mean_pool input contains NaN/Inf")
    mean = mat.mean(axis=0)
    if renormalize:
        norm = float(np.linalg.norm(mean))
        if norm <= NORM_EPS:
            raise ZeroVector("mean_pool")
        mean = mean / norm
    return mean.astype(np.float32)


def _manifest_path(path: Path) -> Path:
    return Path(str(path) + ".jsonl")


def record_to_json(rec: ItemRecord) -> dict:
    return {
        "dataset": rec.id.dataset,
        "local_id": rec.id.local_id,
        "uri": rec.uri,
        "caption": rec.caption,
        "splits": sorted(s.value for s in rec.split_membership),
    }


def record_from_json(obj: dict, modality: Modality) -> ItemRecord:
    return ItemRecord(
        id=ItemId(obj["dataset"], obj["local_id"]),
        modality=modality,
        uri=obj.get("uri"),
        caption=obj.get("caption"),
        split_membership=frozenset(Split(s) for s in obj.get("splits", ["train"])),
    )


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """Write the binary embedding file plus its JSON-lines manifest sidecar."""
    path = Path(path)
    flags = 1 if store.normalized else 0
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        flags,
        store.modality.wire_code,
        b"\x00\x00\x00",
        store.count,
        store.dim,
    )
    payload = np.ascontiguousarray(store.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    with open(_manifest_path(path), "w", encoding="utf-8") as f:
        for rec in store.records:
            f.write(json.dumps(record_to_json(rec), ensure_ascii=False) + "\n")


def load_store(path: str | Path, ensure_normalized: bool = False) -> EmbeddingStore:
    """Load a store saved by :func:`save_store`; bit-exact inverse.

    With ``ensure_normalized`` the rows are normalized after load unless the
    file's flag already marks them unit-norm (breaks bit-exactness for
    unnormalized inputs, so it is opt-in).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, flags, mod_code, _reserved, count, dim = _HEADER.unpack(
        raw[: _HEADER.size]
    )
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    modality = Modality.from_wire_code(mod_code)
    expected = count * dim * 4
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    manifest = _manifest_path(path)
    records = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(record_from_json(json.loads(line), modality))
    if len(records) != count:
        raise FormatError(
            f"{manifest}: {len(records)} manifest rows for count={count}"
        )
    store = EmbeddingStore(modality, data, records, normalized=bool(flags & 1))
    if ensure_normalized and not store.normalized:
        store = l2_normalize(store)
    return store
