"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can map it
onto a stable exit status without string matching.
"""


class PuaeError(Exception):
    code = "error"


class ShapeMismatchError(PuaeError, ValueError):
    code = "shape"


class InvalidAttributeError(PuaeError, ValueError):
    code = "attribute"


class GraphError(PuaeError, RuntimeError):
    code = "graph"


class NonFiniteError(PuaeError, FloatingPointError):
    code = "numeric"


class EmptyPointSetError(PuaeError, ValueError):
    code = "empty"


class OutOfRangeError(PuaeError, ValueError):
    code = "range"


class CardinalityError(PuaeError, ValueError):
    code = "cardinality"


class DegenerateGeometryError(PuaeError, ValueError):
    code = "degenerate"


class LayoutError(PuaeError, ValueError):
    code = "layout"


class LabelMismatchError(PuaeError, ValueError):
    code = "labels"


class DataFormatError(PuaeError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    code = "data"

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class CheckpointError(PuaeError):
    code = "checkpoint"


class IntegrityError(CheckpointError):
    code = "integrity"


class VersionMismatchError(CheckpointError):
    code = "version"


class HashMismatchError(CheckpointError):
    code = "hash"


class ConfigError(PuaeError, ValueError):
    code = "config"
