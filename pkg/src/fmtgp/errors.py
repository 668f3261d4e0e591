"""Exception hierarchy for fmtgp."""


class FMTGPError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FMTGPError, ValueError):
    pass


class SingularProjectionError(FMTGPError):
    """The basis design matrix is rank deficient on the sample grid."""


class ReducedRankError(FMTGPError):
    """Fewer usable principal directions than requested."""


class InvalidKnotsError(FMTGPError, ValueError):
    pass


class InvalidLevelError(FMTGPError, ValueError):
    pass


class EncodingError(FMTGPError):
    """Inputs do not match the frozen encoding of a fitted model."""


class UnsupportedSmoothnessError(FMTGPError, ValueError):
    pass


class NumericalOverflowError(FMTGPError):
    pass


class NotPositiveDefiniteError(FMTGPError):
    def __init__(self, block, message=None):
        self.block = block
        super().__init__(message or f"covariance block {block!r} is not positive definite "
                                    "even at maximum jitter")


class InvalidFactorError(FMTGPError, ValueError):
    pass


class IndefiniteBlockError(FMTGPError):
    def __init__(self, block, min_eig, max_eig):
        self.block = block
        super().__init__(f"block {block!r} is indefinite: smallest eigenvalue {min_eig:.3e} "
                         f"(largest {max_eig:.3e})")


class SizeGuardError(FMTGPError):
    pass


class InitializationError(FMTGPError):
    pass


class AllRestartsFailedError(FMTGPError):
    def __init__(self, causes):
        self.causes = list(causes)
        lines = "\n".join(f"  restart {i}: {c!r}" for i, c in self.causes)
        super().__init__(f"all {len(self.causes)} restarts failed:\n{lines}")


class DegenerateVarianceError(FMTGPError, ValueError):
    pass


class InsufficientDataError(FMTGPError, ValueError):
    pass


class CompatibilityError(FMTGPError):
    pass


class ConfigError(FMTGPError, ValueError):
    pass
