"""Exception types shared across the toolkit.

Everything raised on purpose derives from ShiftQuantError so callers (and
the CLI) can distinguish toolkit failures from genuine bugs.
"""


class ShiftQuantError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(ShiftQuantError):
    """Non-finite values or parameters outside their documented domain."""


class ShapeError(ShiftQuantError):
    """Tensor shapes that cannot be combined by the requested operation."""


class IntegerOverflowError(ShiftQuantError):
    """A checked integer intermediate left the 32-bit range."""


class GraphError(ShiftQuantError):
    """Structurally invalid graph (cycles, bad arity, duplicate ids)."""


class UnsupportedOpError(GraphError):
    """A node kind or node arrangement the toolkit does not handle."""


class UnfoldableGraphError(GraphError):
    """Batch-norm nodes that cannot be merged into an adjacent convolution."""


class ModelFormatError(ShiftQuantError):
    """A model or tensor file that violates the documented layout."""


class ManifestParseError(ModelFormatError):
    """Manifest JSON that does not parse; message carries the position."""


class VersionError(ModelFormatError):
    """Unknown magic number or unsupported format version."""


class DanglingRefError(ModelFormatError):
    """A manifest entry referring to a node or tensor that does not exist."""


class BlobFormatError(ModelFormatError):
    """Binary payload problems: bad header, byte-length or range violations."""


class ExportVerificationError(ShiftQuantError):
    """Exported model failed the cross-framework agreement gate."""
