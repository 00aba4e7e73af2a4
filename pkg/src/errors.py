"""
Exception hierarchy for DroneFuse

Library code raises these; main.py maps them to exit codes.
"""


class DroneFuseError(Exception):
    """Base class for every error the toolkit raises on purpose"""
    exit_code = 1
    code_name = "error"


class UsageError(DroneFuseError):
    """Bad command-line usage (missing or invalid arguments)"""
    exit_code = 2
    code_name = "usage"


class ConfigError(UsageError):
    """Invalid configuration value, unknown key or violated config invariant"""
    code_name = "config"


class ParseError(DroneFuseError):
    """Input file could not be decoded"""
    exit_code = 3
    code_name = "parse"


class SizeError(ParseError):
    """Byte length of an input does not match its declared layout"""
    code_name = "size"

    def __init__(self, what: str, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected} bytes, got {actual}")


class WavFormatError(ParseError):
    """Malformed or unsupported WAV container"""
    code_name = "wav"


class NumericError(DroneFuseError):
    """Non-finite values reached a layer boundary"""
    exit_code = 4
    code_name = "numeric"


class NumericDivergenceError(NumericError):
    """Training produced a NaN/Inf loss"""
    code_name = "divergence"

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")


class DataIOError(DroneFuseError):
    """Dataset files missing, unreadable or unwritable"""
    exit_code = 5
    code_name = "io"


class GradCheckFailure(DroneFuseError):
    """A gradient check exceeded its tolerance"""
    exit_code = 6
    code_name = "gradcheck"


class DomainError(DroneFuseError):
    """Operation undefined for the given input (zero power, empty batch, ...)"""
    exit_code = 7
    code_name = "domain"


class DimensionError(DomainError):
    """Array shapes do not match what an operation requires"""
    code_name = "dimension"


class SplitError(DomainError):
    """Dataset cannot be split as requested"""
    code_name = "split"


class BalanceError(DomainError):
    """Class balancing impossible (one side is empty)"""
    code_name = "balance"


class SpecError(DomainError):
    """Synthetic scene or class signature violates its invariants"""
    code_name = "spec"
