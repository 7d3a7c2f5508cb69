"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A model or run configuration violates a structural constraint."""


class MaskError(ValueError):
    """An attention mask leaves some query row with no allowed key."""


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class FormatError(ValueError):
    """A checkpoint, corpus or vocabulary file is malformed."""


class TrainingError(FloatingPointError):
    """Training produced a non-finite loss."""
