"""Shared exception taxonomy for the engine.

Every module raises subclasses of SparseQAError so the CLI and the HTTP
service can map failures to stable exit codes / status codes.
"""
from __future__ import annotations


class SparseQAError(Exception):
    """Base class for all engine errors."""


# --- document model -------------------------------------------------------

class ParseError(SparseQAError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, col {column})" if line is not None else ""
        super().__init__(message + loc)
        self.line = line
        self.column = column


class IntegrityError(SparseQAError):
    """A structural invariant of the document model was violated."""


class MissingBlobError(SparseQAError):
    """An image reference does not resolve to a stored blob."""


class ExternalToolError(SparseQAError):
    def __init__(self, message: str, exit_status: int, diagnostics: str = ""):
        super().__init__(f"{message} (exit {exit_status})")
        self.exit_status = exit_status
        self.diagnostics = diagnostics


class ConversionError(SparseQAError):
    """External parser output could not be mapped to the canonical model."""


# --- embedding ------------------------------------------------------------

class ProviderError(SparseQAError):
    """Embedding provider unreachable or failing; retryable."""


class ProviderContractError(SparseQAError):
    """Provider returned something that violates its declared contract."""


class DimsError(SparseQAError):
    """Vector dimensionality mismatch."""


class CacheFormatError(SparseQAError):
    """Cache file is corrupt or not a cache file."""


class CacheVersionError(SparseQAError):
    """Cache file written by an incompatible format version."""


class CacheMissError(SparseQAError):
    def __init__(self, missing_chunk_ids: list[str]):
        super().__init__(f"no cached embedding for chunks: {', '.join(missing_chunk_ids)}")
        self.missing_chunk_ids = missing_chunk_ids


# --- training -------------------------------------------------------------

class ConfigError(SparseQAError):
    """Invalid configuration value."""


class DomainError(SparseQAError):
    """Numeric input outside the operation's domain."""


class TrainingDivergedError(SparseQAError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


# --- generation -----------------------------------------------------------

class BackendError(SparseQAError):
    """LLM backend failed persistently."""


class TransientBackendError(BackendError):
    """Single failed attempt; eligible for retry."""


class ContextOverflowError(BackendError):
    def __init__(self, token_estimate: int):
        super().__init__(f"prompt of ~{token_estimate} tokens exceeds backend context")
        self.token_estimate = token_estimate


# --- dataset builder ------------------------------------------------------

class StrategyUnsatisfiableError(SparseQAError):
    """Document lacks the chunks a selection strategy requires."""


class TemplateError(SparseQAError):
    """No template registered for the requested strategy/split/phase."""


class GenerationParseError(SparseQAError):
    """LLM output contained no extractable question/answer pairs."""


class SkipDocumentSignal(Exception):
    """Generator returned the 'quit' sentinel; skip this document.

    Control flow, not an error: deliberately not a SparseQAError.
    """


# --- evaluation / service -------------------------------------------------

class EmptyRunError(SparseQAError):
    """Evaluation requested over zero cases."""


class NotFoundError(SparseQAError):
    """Unknown document / resource id."""
