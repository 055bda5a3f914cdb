"""Exception taxonomy shared across the package.

Each class maps to one machine-parsable CLI error category (see cli.py).
"""


class ConceptDiffError(Exception):
    """Base class; `category` feeds the CLI's single-line error output."""

    category = "internal"


class ArgumentError(ConceptDiffError, ValueError):
    category = "argument"


class ContractError(ConceptDiffError):
    """A callable violated an interface contract (e.g. non-scalar objective)."""

    category = "contract"


class NumericError(ConceptDiffError, ArithmeticError):
    """NaN/Inf appeared where only finite values are allowed."""

    category = "numeric"


class CorruptionError(ConceptDiffError):
    """On-disk data failed checksum or structural validation."""

    category = "corruption"


class TransportError(ConceptDiffError):
    """HTTP-level failure talking to the concept retrieval endpoint."""

    category = "transport"


class FormatError(ConceptDiffError):
    """A response or file parsed but did not match the expected format."""

    def __init__(self, msg, raw=None):
        super().__init__(msg)
        self.raw = raw

    category = "format"


class ConfigError(ConceptDiffError):
    category = "config"
