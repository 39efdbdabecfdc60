"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` that the service layer
maps onto HTTP responses and the CLI maps onto process exit codes:

    io          -> exit 2   (missing/malformed inputs, I/O failures)
    degenerate  -> exit 3   (data that cannot support the requested run)
    shape       -> exit 4   (dimension mismatches between artifacts)
"""


class FsgcdError(Exception):
    """Base class for all package errors."""

    code = "io"


class FeatureFormatError(FsgcdError):
    """Malformed feature file, split manifest, checkpoint, or config file."""

    code = "io"


class DegenerateDataError(FsgcdError):
    """Inputs are structurally valid but cannot support the operation."""

    code = "degenerate"


class DegenerateBatchError(DegenerateDataError):
    """Every anchor of a minibatch had to be skipped by a loss."""


class InfiniteSeparationError(DegenerateDataError):
    """Within-cluster dispersion is exactly zero; the dispersion ratio diverges."""


class ShapeMismatchError(FsgcdError):
    """Tensor/feature dimensions disagree between artifacts."""

    code = "shape"
