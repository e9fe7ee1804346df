"""Exception hierarchy shared by every module of the package.

Domain failures derive from :class:`DomainError` (CLI exit code 1); bad inputs
and configuration derive from :class:`UsageError` (CLI exit code 2).
"""


class FDG2SError(Exception):
    code = "FDG2S"


class DomainError(FDG2SError):
    code = "DOMAIN"


class UsageError(FDG2SError):
    code = "USAGE"


# autodiff
class ShapeMismatch(DomainError, ValueError):
    code = "ShapeMismatch"


class DivisionDomain(DomainError, ArithmeticError):
    code = "DivisionDomain"


class NonScalarLoss(DomainError, ValueError):
    code = "NonScalarLoss"


class TapeConsumed(DomainError, RuntimeError):
    code = "TapeConsumed"


class NonFiniteEvaluation(DomainError, FloatingPointError):
    code = "NonFiniteEvaluation"


# data
class IrregularStride(UsageError, ValueError):
    code = "IrregularStride"


class UnknownRegion(UsageError, KeyError):
    code = "UnknownRegion"


class EmptyFile(UsageError, ValueError):
    code = "EmptyFile"


class MissingWeatherCoverage(UsageError, ValueError):
    code = "MissingWeatherCoverage"


class IndexOutOfRange(DomainError, IndexError):
    code = "IndexOutOfRange"


class InvalidConfig(UsageError, ValueError):
    code = "InvalidConfig"


class GapOutOfBounds(DomainError, ValueError):
    code = "GapOutOfBounds"


class GapSpanViolation(DomainError, ValueError):
    code = "GapSpanViolation"


# sampler
class SampleNotFound(DomainError, LookupError):
    code = "SampleNotFound"


class BatchSampleErrors(DomainError, LookupError):
    """Raised by ``build_batch(strict=True)`` with every failing target attached."""

    code = "SampleNotFound"

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__(f"{len(self.failures)} target(s) failed retrieval")


# factor graph
class LengthMismatch(DomainError, ValueError):
    code = "LengthMismatch"


class EmptyValueSet(DomainError, LookupError):
    code = "EmptyValueSet"


class SegmentWidthMismatch(DomainError, ValueError):
    code = "SegmentWidthMismatch"


class MissingBankEntry(DomainError, LookupError):
    code = "MissingBankEntry"


class WidthMismatch(DomainError, ValueError):
    code = "WidthMismatch"


# uq
class InvalidScale(DomainError, ValueError):
    code = "InvalidScale"


class InsufficientSamples(DomainError, ValueError):
    code = "InsufficientSamples"


# trainer / eval / cli
class NoValidTargets(DomainError, RuntimeError):
    code = "NoValidTargets"


class NonFiniteLoss(DomainError, FloatingPointError):
    code = "NonFiniteLoss"

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class NegativeWidth(DomainError, ValueError):
    code = "NegativeWidth"


class NoHistoricalMatch(DomainError, LookupError):
    code = "NoHistoricalMatch"


class ConfigHashMismatch(UsageError, ValueError):
    code = "ConfigHashMismatch"


class MissingExpectedFactors(UsageError, ValueError):
    code = "MissingExpectedFactors"
