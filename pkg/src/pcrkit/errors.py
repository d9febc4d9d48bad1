"""Exception types shared across the package.

Every error raised on a documented failure path has its own class so
callers can catch precisely; all inherit from PcrError (a ValueError).
"""


class PcrError(ValueError):
    """Base class for all package errors."""


class ZeroVector(PcrError):
    pass


class DimensionMismatch(PcrError):
    pass


class EmptyImage(PcrError):
    pass


class EmptyVideo(PcrError):
    pass


class SequenceTooLong(PcrError):
    def __init__(self, length: int, limit: int):
        super().__init__(f"assembled sequence has {length} positions, limit is {limit}")
        self.length = length
        self.limit = limit


class NonFiniteActivation(PcrError):
    pass


class InvalidTemperature(PcrError):
    pass


class BatchTooLarge(PcrError):
    pass


class EmptyCurriculum(PcrError):
    pass


class ShapeMismatch(PcrError):
    pass


class ModalityMismatch(PcrError):
    pass


class NonFiniteLoss(PcrError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class LengthMismatch(PcrError):
    pass


class InvalidSpec(PcrError):
    pass


class DuplicateId(PcrError):
    pass


class EmptyTruth(PcrError):
    pass


class EmptyClassSet(PcrError):
    pass


class EmptySet(PcrError):
    pass


class DegenerateData(PcrError):
    pass


class InsufficientRecords(PcrError):
    def __init__(self, kind: str, usable: int, needed: int = 1):
        super().__init__(f"task kind {kind!r}: {usable} usable records, need >= {needed}")
        self.kind = kind
        self.usable = usable
        self.needed = needed
