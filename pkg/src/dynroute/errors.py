"""Exception types shared across the package."""


class DynRouteError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DynRouteError):
    """Tensor shapes are inconsistent with an operation's contract."""


class SizeError(DynRouteError):
    """Requested tensor would exceed the supported element count."""


class GraphError(DynRouteError):
    """The recorded computation graph is malformed (cycle, missing producer)."""


class NumericError(DynRouteError):
    """A computation produced a non-finite value where finiteness is required."""


class LegalityError(DynRouteError):
    """A scale-transform path is illegal at the node where it was requested."""


class SpaceError(DynRouteError):
    """Invalid routing-space construction or node lookup."""


class MaskError(DynRouteError):
    """An architecture mask failed validation or parsing."""


class CostError(DynRouteError):
    """Invalid cost-model query (unknown descriptor, missing coverage)."""


class ConfigError(DynRouteError):
    """Bad CLI / training configuration."""


class DataError(DynRouteError):
    """Invalid training data (e.g. target class out of range)."""
