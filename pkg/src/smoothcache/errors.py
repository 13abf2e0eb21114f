"""Exception hierarchy shared across the package."""


class SmoothCacheError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SmoothCacheError, ValueError):
    pass


class NonFiniteError(SmoothCacheError, ValueError):
    pass


class DegenerateReferenceError(SmoothCacheError, ArithmeticError):
    """The reference tensor of a relative error has zero L1 norm."""


class ConfigError(SmoothCacheError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CacheShapeError(ShapeError):
    pass


class CacheFault(SmoothCacheError, RuntimeError):
    """The runtime cache could not honour a Reuse decision."""


class CoverageError(SmoothCacheError, KeyError):
    def __init__(self, kind: str, step: int, skip: int):
        self.kind, self.step, self.skip = kind, step, skip
        super().__init__(f"error curve for {kind!r} has no cell (s={step}, k={skip})")

    def __str__(self) -> str:
        return self.args[0]


class FormatError(SmoothCacheError, ValueError):
    """A persisted artifact (curves, schedule, SCTD dump) failed validation."""


class VersionError(FormatError):
    pass
