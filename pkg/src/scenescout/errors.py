"""Exception hierarchy shared by every module."""


class SceneScoutError(Exception):
    """Base class for all scenescout errors."""


class ShapeError(SceneScoutError):
    """Tensor or vector dimensions do not line up."""


class GraphError(SceneScoutError):
    """Scene-graph invariant violated (dangling edge, duplicate id, ...)."""


class TransformError(SceneScoutError):
    """Rigid transform is not a valid rotation + translation."""


class ParseError(SceneScoutError):
    """Malformed scene JSON or invariant violation on load."""


class FormatError(SceneScoutError):
    """Malformed binary file (bad magic, version, or truncation)."""


class ConfigError(SceneScoutError):
    """Invalid configuration value (rates, temperatures, sizes)."""


class QueryError(SceneScoutError):
    """Query cannot be built (e.g. no modality present)."""


class GalleryError(SceneScoutError):
    """Gallery construction problem (duplicate id, incomplete bundle)."""


class RetrievalError(SceneScoutError):
    """Search cannot run (e.g. empty gallery)."""


class TrainingError(SceneScoutError):
    """Numerical failure during optimization (non-finite loss/gradients)."""


class CompositionError(SceneScoutError):
    """Scene composition step failed (unresolvable relation target)."""


class NumericError(SceneScoutError):
    """Degenerate numeric input (e.g. zero-norm vector before normalize)."""
