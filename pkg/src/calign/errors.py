"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class LengthError(ValueError):
    """A sequence exceeds the model's supported length."""


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class DegenerateSampleError(ValueError):
    """A sample's pooled weight mass is zero, so the weighted loss is undefined."""


class NonFiniteError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""
