"""
Exception hierarchy for madiff.

Library code raises these; only the CLI turns them into exit codes and the
``MADIFF-E<code>:`` prefix written to standard error.
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class MadiffError(Exception):
    """Base class for every error raised by the package."""

    exit_code = EXIT_RUNTIME
    code = 100

    def __init__(self, message: str, *, hint: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.hint = hint

    def cli_message(self) -> str:
        """Machine-parseable single line for standard error."""
        text = f"MADIFF-E{self.code}: {self.message}"
        if self.hint:
            text += f" ({self.hint})"
        return text


class ValidationError(MadiffError):
    """A precondition of a public operation was violated."""

    exit_code = EXIT_USAGE
    code = 200


class ShapeError(ValidationError):
    code = 201


class RangeError(ValidationError):
    code = 202


class ConstraintError(ValidationError):
    """Blend-weight or mask constraints do not hold."""

    code = 203


class UnknownConditionError(ValidationError):
    """A domain or tag name is not part of the model vocabulary."""

    code = 204

    def __init__(self, name: str, vocabulary):
        listed = ", ".join(vocabulary)
        super().__init__(
            f"unknown condition '{name}'",
            hint=f"known: nomakeup, makeup, {listed}" if listed else None,
        )
        self.name = name
        self.vocabulary = list(vocabulary)


class GeometryError(ValidationError):
    """Degenerate landmarks, meshes or correspondences."""

    code = 205


class FormatError(ValidationError):
    """Malformed file contents (image headers, model files, JSON schemas)."""

    code = 206

    def __init__(self, message: str, *, offset: Optional[int] = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} [{', '.join(where)}]" if where else message)
        self.offset = offset
        self.path = path


class ManifestError(ValidationError):
    code = 207

    def __init__(self, message: str, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = f"{message}: " + "; ".join(self.problems)
        super().__init__(message)


class ConfigError(ValidationError):
    code = 208


class RuntimeFailure(MadiffError):
    """Numerical failure during a run (non-finite values, diverged training)."""

    exit_code = EXIT_RUNTIME
    code = 300
