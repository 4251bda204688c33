"""
Exception types raised by contrastive_nmt. The command line maps them to exit codes.
"""


class ContrastiveNMTError(Exception):
    """
    Base class for every error raised on purpose by the package.
    """
    exit_code = 2


class ShapeError(ContrastiveNMTError, ValueError):
    exit_code = 2


class DataError(ContrastiveNMTError, ValueError):
    """
    Malformed or inconsistent input data: files, corpora, languages, budgets.
    """
    exit_code = 2


class CheckpointError(DataError):
    exit_code = 2


class NumericError(ContrastiveNMTError, ArithmeticError):
    """
    Non-finite losses or gradients and undefined quantities such as the cosine of a zero vector.
    """
    exit_code = 3


class UsageError(ContrastiveNMTError):
    exit_code = 1
