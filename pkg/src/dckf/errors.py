"""Exception hierarchy shared by the filter, models and harness."""


class DckfError(Exception):
    """Base class for every error raised by this package.

    ``batch_index`` lists the failing members when the failure happened
    inside a stacked (batched) computation.
    """

    def __init__(self, *args, batch_index=None):
        super().__init__(*args)
        self.batch_index = batch_index


class DimensionMismatch(DckfError, ValueError):
    pass


class NotPositiveDefinite(DckfError):
    """A covariance failed Cholesky factorization (pivot below tolerance)."""


class SingularFactor(DckfError):
    pass


class SingularSystem(DckfError):
    """The vectorized desensitized-gain operator is numerically singular."""


class NonFiniteState(DckfError):
    pass


class DegenerateCovariance(DckfError):
    pass


class ConfigError(DckfError, ValueError):
    pass


class FilterError(DckfError):
    """Wraps a numerical failure inside a filter step with its location."""

    def __init__(self, cause, step=None, run=None):
        self.cause = cause
        self.step = step
        self.run = run
        where = []
        if run is not None:
            where.append(f"run {run}")
        if step is not None:
            where.append(f"step {step}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(
            f"{prefix}{type(cause).__name__}: {cause}", batch_index=getattr(cause, "batch_index", None)
        )
