"""
Exception hierarchy for the path reasoner.

Every error the engine raises on purpose derives from PathReasonerError so the
CLI and the answer service can turn it into an exit code or an HTTP status.
"""


class PathReasonerError(Exception):
    """Base class for all path reasoner errors."""

    exit_code = 1


class KnowledgeBaseError(PathReasonerError, ValueError):
    """Invalid interning request, fact, or id."""

    exit_code = 6


class InvalidPathError(KnowledgeBaseError):
    """A reasoning path that does not follow facts in the knowledge base."""


class EmptyQuestionError(PathReasonerError, ValueError):
    """A question with no tokens."""

    exit_code = 6


class DataFormatError(PathReasonerError):
    """A KB or dataset file that cannot be read at all."""

    exit_code = 6


class ConfigError(PathReasonerError, ValueError):
    """Malformed config file or invalid configuration values."""

    exit_code = 4


class SyntheticSpecError(ConfigError):
    """A synthetic corpus spec that cannot be realized."""


class AnnotationError(PathReasonerError):
    """Ground-truth path requested for an instance that has none."""

    exit_code = 4


class CheckpointError(PathReasonerError):
    """Unreadable or corrupt checkpoint file."""

    exit_code = 5


class CheckpointMismatchError(CheckpointError):
    """Checkpoint dimensions disagree with the KB or vocabulary in use."""


class TrainingDivergedError(PathReasonerError):
    """Loss or gradient became non-finite."""

    exit_code = 7
