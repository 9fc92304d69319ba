"""Exception hierarchy shared by every stage.

Each class carries a machine-readable ``code`` and the process exit status
used by the command-line front end.
"""


class TwembedError(Exception):
    code = "error"
    exit_status = 2


class ValidationError(TwembedError, ValueError):
    """Bad input data or configuration detected before any work is done."""

    code = "invalid-input"
    exit_status = 1


class TooShortSeriesError(ValidationError):
    code = "too-short-series"


class FormatError(ValidationError):
    """A file on disk does not follow its documented line format."""

    code = "format-error"

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}"
            if lineno is not None:
                where += f":{lineno}"
            where += ": "
        super().__init__(where + message)


class VocabularyError(ValidationError):
    code = "vocabulary-error"


class ConfigError(ValidationError):
    code = "config-error"


class CorpusMismatchError(ValidationError):
    code = "corpus-mismatch"


class LookupFailure(ValidationError, KeyError):
    code = "lookup-error"

    def __str__(self):
        return Exception.__str__(self)


class DegenerateFitError(TwembedError):
    code = "degenerate-fit"
    exit_status = 3


class InfeasibleProtocolError(TwembedError):
    code = "infeasible-protocol"
    exit_status = 3


class UndefinedMetricError(TwembedError):
    code = "undefined-metric"
    exit_status = 3


class TrainingDivergedError(TwembedError):
    """Raised when a loss turns non-finite; ``diagnostics`` holds batch info."""

    code = "non-finite-loss"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StageError(TwembedError):
    """Wraps a failure inside a pipeline stage, naming the stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, "code", "runtime-failure")
        self.exit_status = getattr(cause, "exit_status", 2)
        super().__init__(f"stage '{stage}' failed [{self.code}]: {cause}")
