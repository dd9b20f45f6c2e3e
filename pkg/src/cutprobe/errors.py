"""Exception hierarchy shared across the toolkit."""


class CutprobeError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(CutprobeError):
    """Tensor geometry does not fit the operation.

    Messages always name both the expected and the offending value so the
    failing layer can be identified without a debugger.
    """


class GraphError(CutprobeError):
    """Malformed graph description: parse failure, dangling reference,
    invalid attributes, or shape propagation failure."""


class FormatError(CutprobeError):
    """Binary container violation: bad magic, unsupported version,
    truncation, or checksum failure."""


class DataError(CutprobeError):
    """Dataset-level problem: bad manifest row, undecodable image,
    degenerate split input, empty evaluation set."""


class ConfigError(CutprobeError):
    """Experiment configuration does not validate."""
