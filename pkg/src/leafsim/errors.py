"""Exception hierarchy shared by the whole toolkit.

Everything raised on bad data derives from LeafSimError so the CLI can map
data problems to a single exit code while usage mistakes stay separate.
"""


class LeafSimError(Exception):
    """Base class for all toolkit errors."""


class FormatError(LeafSimError):
    """Binary container violations: bad magic, version, width, size mismatch."""


class ParseError(LeafSimError):
    """Malformed text input (tag tokens, AVClass lines, CSV/JSONL rows)."""


class DuplicateError(LeafSimError):
    """An identity (sha256, row, tag pair) occurred more than once."""


class ValidationError(LeafSimError):
    """A semantic invariant does not hold for otherwise well-formed data."""


class DimensionError(LeafSimError):
    """Vector or matrix shapes do not agree."""


class EmptyIndexError(LeafSimError):
    """A query was issued against an index with no candidate rows."""


class UnknownTagError(LeafSimError):
    """A tag required to be present in a co-occurrence table is missing."""
