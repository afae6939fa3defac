"""Exception hierarchy.

Every error carries the pipeline ``stage`` it was raised from so the CLI can
print stage-tagged diagnostics.
"""


class MGAAError(Exception):
    stage = "unknown"

    def __init__(self, message="", stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class LinalgError(MGAAError):
    stage = "linalg"


class NonSquareError(LinalgError):
    pass


class NotSymmetricError(LinalgError):
    pass


class IndefiniteBeyondToleranceError(LinalgError):
    pass


class ConvergenceFailureError(LinalgError):
    pass


class DimensionMismatchError(LinalgError):
    pass


class NonFiniteError(LinalgError):
    pass


class DecomposeError(MGAAError):
    stage = "decompose"


class RankTooLargeError(DecomposeError):
    pass


class RatioOutOfRangeError(DecomposeError):
    pass


class InsufficientTokensError(DecomposeError):
    pass


class ShapeMismatchError(DecomposeError):
    pass


class AllZeroSpectrumError(DecomposeError):
    pass


class AllocateError(MGAAError):
    stage = "allocate"


class EmptyBatchError(AllocateError):
    pass


class AllDegenerateColumnsError(AllocateError):
    pass


class TooFewSublayersError(AllocateError):
    pass


class HeterogeneousRankCostError(AllocateError):
    pass


class InfeasibleBudgetError(AllocateError):
    pass


class SearchSpaceTooLargeError(AllocateError):
    pass


class InvalidAllocationConfigError(AllocateError):
    pass


class HarnessError(MGAAError):
    stage = "harness"


class InvalidConfigError(HarnessError):
    pass


class TokenOutOfRangeError(HarnessError):
    pass


class EmptyDatasetError(HarnessError):
    pass


class MissingStatsError(HarnessError):
    pass


class PlanModelMismatchError(HarnessError):
    pass


class FormatError(MGAAError):
    """Malformed on-disk file. ``path`` and ``offset`` locate the problem."""

    stage = "io"

    def __init__(self, message, path=None, offset=None):
        if path is not None and offset is not None:
            message = f"{path} at offset {offset}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.offset = offset


class RunConfigError(MGAAError):
    stage = "config"
