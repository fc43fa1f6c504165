"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. non-scalar backward root)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class GeometryError(ValueError):
    """Degenerate geometry: gimbal lock, camera behind plane, bad homography."""


class FrameError(ValueError):
    """Missing or invalid coordinate-frame transform."""


class DivergenceError(RuntimeError):
    """Closed-loop error grew past the divergence threshold."""


class OracleInvalidError(RuntimeError):
    """A gradient-check builder re-evaluated to a different value."""


class CheckpointError(RuntimeError):
    """Malformed checkpoint file or config digest mismatch."""
