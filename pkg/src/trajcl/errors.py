"""Exception types shared across the package."""


class TrajclError(Exception):
    """Base class for all package-specific errors."""


# --- data ingestion / windowing ---

class MissingColumn(TrajclError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"required column missing: {column!r}")


class NonMonotonicFrames(TrajclError):
    def __init__(self, track_id: int):
        self.track_id = track_id
        super().__init__(f"track {track_id}: frame indices are not strictly increasing")


class EmptyFile(TrajclError):
    pass


class BadRatios(TrajclError):
    pass


class BadSpec(TrajclError):
    pass


# --- model evaluation ---

class ShapeMismatch(TrajclError):
    pass


class EmptyBatch(TrajclError):
    pass


# --- divergence measuring ---

class BadLambda(TrajclError):
    pass


class KTooLarge(TrajclError):
    pass


class InsufficientData(TrajclError):
    def __init__(self, n_cases: int, required: int):
        self.n_cases = n_cases
        self.required = required
        super().__init__(
            f"{n_cases} cases available but at least {required} are required"
        )


class NonFiniteLoss(TrajclError):
    pass


class DimensionMismatch(TrajclError):
    pass


class EmptyConditions(TrajclError):
    pass


class BadWeight(TrajclError):
    pass


# --- memory / allocation ---

class CapacityZero(TrajclError):
    pass


class BadCapacity(TrajclError):
    pass


class UnknownScenario(TrajclError):
    pass


# --- continual training ---

class NonFiniteInput(TrajclError):
    pass


# --- metrics / reporting ---

class Empty(TrajclError):
    pass


class MissingBaseline(TrajclError):
    pass


class NoConflict(TrajclError):
    pass


class MissingArtifacts(TrajclError):
    pass
