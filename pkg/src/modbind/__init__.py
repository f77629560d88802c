"""modbind: bind pre-embedded modalities into one space.

Curates retrieval-paired and human-verified training pairs, trains small MLP
projectors with a graded contrastive loss, and evaluates cross-modal
retrieval and zero-shot classification.
"""

from .core import (
    EmbeddingStore,
    ItemId,
    ItemRecord,
    MatchConfig,
    Modality,
    Split,
    l2_normalize,
    load_store,
    mean_pool,
    save_store,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingStore",
    "ItemId",
    "ItemRecord",
    "MatchConfig",
    "Modality",
    "Split",
    "l2_normalize",
    "load_store",
    "mean_pool",
    "save_store",
    "__version__",
]
