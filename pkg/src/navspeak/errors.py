"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2, NumericError -> 3.
Everything else is a plain bug and escapes with a traceback.
"""


class NavspeakError(Exception):
    pass


class ValidationError(NavspeakError):
    """Bad configuration, malformed input, or a violated precondition."""


class ShapeError(ValidationError):
    """Tensor shape mismatch; message names both shapes."""


class GenerationError(ValidationError):
    """World generation could not satisfy its invariants (e.g. no path)."""


class NumericError(NavspeakError):
    """Non-finite values where finite ones were required."""


class TrainingError(NumericError):
    """Numeric failure during optimization; message names the parameter/step."""
