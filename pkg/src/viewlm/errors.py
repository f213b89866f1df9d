"""Exception hierarchy shared across the package."""


class ViewLMError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(ViewLMError):
    """Operand shapes or dtypes are incompatible with an operation."""


class ContractError(ViewLMError):
    """An argument violates a documented precondition."""


class CapacityError(ContractError):
    """A packed sequence would exceed the model's maximum length."""


class DegenerateInputError(ViewLMError):
    """Numerically meaningless input, e.g. a zero-norm embedding or a fully masked row."""


class VocabularyError(ViewLMError):
    """A token id falls outside the vocabulary."""


class FormatError(ViewLMError):
    """A file or stream does not match the expected on-disk format."""


class SchemaError(ViewLMError):
    """A configuration document contains unknown or ill-typed fields."""


class DivergenceError(ViewLMError):
    """Training produced a non-finite loss or gradient."""
