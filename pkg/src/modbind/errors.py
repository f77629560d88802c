"""Exception types shared across the toolkit."""

from __future__ import annotations


class ModbindError(Exception):
    """Base class for all toolkit errors."""


class ZeroVector(ModbindError):
    """A vector that must be normalizable has (near-)zero norm."""

    def __init__(self, where: object = None):
        self.where = where
        super().__init__(f"zero-norm vector at {where!r}")


class FormatError(ModbindError):
    """A persisted artifact is malformed (bad magic, truncation, mismatched counts)."""


class NotNormalized(ModbindError):
    """An operation requires a store with unit-norm rows."""


class DimMismatch(ModbindError):
    """Query/store or parameter dimensions disagree."""


class EmptyPool(ModbindError):
    def __init__(self, modality: object):
        self.modality = modality
        super().__init__(f"candidate pool for {modality} is empty")


class DegenerateBatch(ModbindError):
    """Contrastive losses need at least two rows per batch."""


class UnknownPair(ModbindError):
    """No temperature registered for a (projected, frozen) modality pair."""


class NonFiniteGradient(ModbindError):
    """Optimizer received a NaN/Inf gradient."""


class MissingEmbedding(ModbindError):
    def __init__(self, item: object, modality: object):
        self.item = item
        self.modality = modality
        super().__init__(f"no {modality} embedding for item {item}")


class MissingGroundTruth(ModbindError):
    def __init__(self, query: object):
        self.query = query
        super().__init__(f"no ground-truth entry for query {query}")


class ClassCountMismatch(ModbindError):
    """Label vector and representative store disagree on class count."""


class EmptyClass(ModbindError):
    def __init__(self, cls: object):
        self.cls = cls
        super().__init__(f"class {cls!r} has no positive items")


class NoSharedClasses(ModbindError):
    """The two modalities being cross-classified share fewer than two classes."""


class InfeasibleConcepts(ModbindError):
    """Rejection sampling could not place the requested number of concepts."""


class DuplicateProject(ModbindError):
    pass


class UnknownProject(ModbindError):
    pass


class UnknownTask(ModbindError):
    pass


class ForeignCandidate(ModbindError):
    """A label references a candidate that does not belong to its task."""


class DuplicateLabel(ModbindError):
    pass
