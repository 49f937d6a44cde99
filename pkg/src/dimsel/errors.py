"""Exception hierarchy shared by every dimsel module.

Anything derived from :class:`DimselError` is a data error (bad file, bad
shape, degenerate input); the CLI maps it to exit status 1.
"""


class DimselError(Exception):
    """Base class for all data errors raised by the toolkit."""


class EmbeddingFormatError(DimselError):
    """An EMB1 file could not be parsed."""


class HeaderError(EmbeddingFormatError):
    pass


class PayloadSizeError(EmbeddingFormatError):
    pass


class DuplicateIdError(EmbeddingFormatError):
    pass


class NonFiniteError(EmbeddingFormatError):
    pass


class ZeroNormError(DimselError):
    pass


class QrelsParseError(DimselError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DimensionMismatchError(DimselError):
    pass


class NoRelevantDocumentsError(DimselError):
    pass


class NoNegativesError(DimselError):
    pass


class PredictorFormatError(DimselError):
    pass


class AdapterFormatError(DimselError):
    pass


class TrainingError(DimselError):
    pass


class DegenerateCorrelationError(DimselError):
    pass


class ConfigError(DimselError):
    pass
