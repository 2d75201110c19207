"""Exception and warning types raised across the package."""


class ValidationError(ValueError):
    """Input failed a shape, range or finiteness check."""


class SingularSystemError(ValueError):
    """A triangular system has a (numerically) zero pivot."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""


class NeedsHistoryError(LookupError):
    """An attack needs trace rounds that are not available."""


class InsufficientPopulationError(LookupError):
    """Too few reference clients to model the non-member distribution."""


class DegenerateSpanWarning(UserWarning):
    """The gradient span is empty, so every projection is zero."""
