"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the command line layer can map
failure classes to distinct process exit statuses without importing
module internals.
"""
from __future__ import annotations


class MaoError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MaoError):
    """Invalid configuration value, unknown key, or unusable combination."""

    exit_code = 3


class DatasetError(MaoError):
    """Dataset generation or access failed (bad spec, missing images)."""

    exit_code = 4


class DatasetFormatError(DatasetError):
    """A dataset file violates the on-disk format; names the bad section."""

    exit_code = 4


class VocabularyError(MaoError):
    """Class id outside the vocabulary, or incompatible token universes."""

    exit_code = 5


class CandidateSetError(MaoError):
    """Malformed candidate set (duplicates, empty, unknown ids)."""

    exit_code = 5


class ConstraintViolationError(MaoError):
    """Batch expansion request exceeds the class-count constraint."""

    exit_code = 6


class DegenerateInputError(MaoError):
    """Numerically degenerate input (zero norm, too few points)."""

    exit_code = 7


class NumericsError(MaoError):
    """Non-finite values or misuse of the differentiation kernel."""

    exit_code = 7


class TrainingError(MaoError):
    """Tuning aborted (non-finite gradient, bad phase schedule)."""

    exit_code = 8


class EvalError(MaoError):
    """Evaluation could not be carried out on the given inputs."""

    exit_code = 9
