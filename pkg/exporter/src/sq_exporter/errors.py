"""Exporter failure modes, one named class per contract violation."""


class ExporterError(Exception):
    """Base class for everything this package raises on purpose."""


class SpecFormatError(ExporterError):
    """Export spec file is malformed or has an unknown format/version."""


class CompletenessError(ExporterError):
    """A node is missing a required tensor mapping or references an unknown node."""


class MissingTensorError(ExporterError):
    """The spec names a tensor the checkpoint does not contain."""


class ShapeMismatchError(ExporterError):
    """A source tensor's shape does not fit the node it is mapped to."""


class UnknownLayoutError(ExporterError):
    """A weight layout tag is not one of the supported orderings."""


class VerificationError(ExporterError):
    """The cross-framework output check failed or could not run."""
