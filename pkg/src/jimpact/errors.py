"""Exception types raised across the pipeline.

The CLI maps these onto exit codes: usage problems -> 1, data problems -> 2,
endpoint problems -> 3.
"""


class JimpactError(Exception):
    """Base class for all pipeline errors."""


class UsageError(JimpactError):
    """Bad invocation: unknown flags, unreadable config, missing required option."""


class DataError(JimpactError):
    """Input data violates a documented contract."""


class EndpointError(JimpactError):
    """The annotation endpoint could not produce a usable response."""


# --- ingest ---------------------------------------------------------------

class MalformedXml(DataError):
    """Input bytes are not parseable XML."""


class MissingJournalIdentity(DataError):
    """Article carries no ISSN, EISSN, or journal title."""


class RootNotFound(DataError):
    """Corpus root directory does not exist."""


# --- numeric / feature helpers --------------------------------------------

class EmptyInput(DataError):
    """An operation requiring a nonempty collection received an empty one."""


class ZeroDenominator(DataError):
    """Engagement rate requested for a journal-year with zero articles."""


class AllZero(DataError):
    """Equitability requested for a class distribution with zero total count."""


# --- bibliometric join -----------------------------------------------------

class ColumnMappingInvalid(DataError):
    """A declared column map does not match the source file header."""


class LeakageError(DataError):
    """A covariate drawn from the target year (or later) reached a modeling row."""


# --- mixed model -----------------------------------------------------------

class RankDeficientDesign(DataError):
    """Design matrix lost full column rank after preprocessing."""


class SingularGroupStructure(DataError):
    """Group layout cannot separate the group variance from the residual."""


class TooFewClusters(DataError):
    """Cluster-robust errors need at least two clusters."""


# --- agreement -------------------------------------------------------------

class DegenerateMarginals(DataError):
    """Chance agreement equals one and the sequences disagree; kappa undefined."""


class RowSumMismatch(DataError):
    """Rating count matrix rows do not all sum to the declared rater count."""


class GatingViolation(DataError):
    """Score record breaks the relevance gating rule."""


# --- endpoint --------------------------------------------------------------

class EndpointUnavailable(EndpointError):
    """All retry attempts against the chat endpoint failed."""


class UnparseableResponse(EndpointError):
    """Endpoint reply violated the demanded output schema even after a re-ask."""
