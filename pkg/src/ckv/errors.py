"""Exception hierarchy shared across the ckv package."""


class CkvError(Exception):
    """Base class for all ckv-specific errors."""


class FormatError(CkvError):
    """File does not carry the expected magic/version."""


class TruncationError(CkvError):
    """File ended before a declared section was complete."""


class ValidationError(CkvError):
    """A trace invariant is violated; message names the offending field."""


class ParameterError(CkvError):
    """A caller-supplied parameter is outside its documented range."""


class InputError(CkvError):
    """Model input is malformed (e.g. token id outside the vocabulary)."""


class SelectionError(CkvError):
    """A retained-index set is unusable (e.g. empty for some layer)."""


class DataError(CkvError):
    """A dataset or required data section is missing or non-finite."""


class FitError(CkvError):
    """Optimization diverged; message reports the iteration."""


class ConfigError(CkvError):
    """Mutually incompatible configuration options."""


class CoverageError(CkvError):
    """An experience dataset does not cover the required state grid."""


class CompatibilityError(CkvError):
    """Compiled tables and trace disagree on (L, H) or bin geometry."""


class DegenerateHeadError(CkvError):
    """All value norms of a head are zero (strict mode only)."""


class DegenerateRiskError(CkvError):
    """Aggregated attention mass is all-zero; entropy undefined."""


class DegenerateRowError(CkvError):
    """Retained attention mass of a row is too small to renormalize."""
