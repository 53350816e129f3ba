"""Exception hierarchy shared across the package.

Every error raised by this package derives from SchemaBenchError so callers
(and the CLI exit-code mapping) can catch one base class.
"""

from __future__ import annotations


class SchemaBenchError(Exception):
    """Base class for all package errors."""


# --- schema / JSON format ---------------------------------------------------

class MalformedJson(SchemaBenchError):
    pass


class MissingField(SchemaBenchError):
    def __init__(self, aspect: str, field: str):
        super().__init__(f"aspect {aspect!r} is missing required field {field!r}")
        self.aspect = aspect
        self.field = field


class DuplicateAspect(SchemaBenchError):
    def __init__(self, name: str):
        super().__init__(f"duplicate aspect name {name!r}")
        self.name = name


class TooFewAspects(SchemaBenchError):
    pass


# --- chat gateway -----------------------------------------------------------

class GatewayError(SchemaBenchError):
    """Base for provider/transport failures. `retryable` drives the retry loop."""

    retryable = False


class AuthError(GatewayError):
    retryable = False


class RateLimited(GatewayError):
    retryable = True


class TransportError(GatewayError):
    retryable = True


class ProviderError(GatewayError):
    def __init__(self, status: int, body: str):
        super().__init__(f"provider returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body
        self.retryable = 500 <= status < 600


class CacheIoError(SchemaBenchError):
    pass


class NoJsonFound(SchemaBenchError):
    pass


class UnbalancedJson(SchemaBenchError):
    pass


# --- embeddings -------------------------------------------------------------

class BackendError(SchemaBenchError):
    pass


class EmptyText(SchemaBenchError):
    def __init__(self, index: int):
        super().__init__(f"text at index {index} is empty after trimming")
        self.index = index


class DimensionMismatch(SchemaBenchError):
    pass


# --- clustering / numerics --------------------------------------------------

class InvalidParameter(SchemaBenchError):
    pass


class ScorerError(SchemaBenchError):
    pass


class LengthMismatch(SchemaBenchError):
    pass


class TooFewSamples(SchemaBenchError):
    pass


class NotAPermutation(SchemaBenchError):
    pass


class EmptyCorpus(SchemaBenchError):
    pass


# --- pipelines --------------------------------------------------------------

class ParseError(SchemaBenchError):
    """A model completion did not match its JSON output contract."""

    def __init__(self, message: str, completion_text: str | None = None):
        super().__init__(message)
        self.completion_text = completion_text


class GenerationParseError(ParseError):
    pass


class UpdateParseError(ParseError):
    def __init__(self, pass_index: int, batch_index: int, completion_text: str | None = None):
        super().__init__(
            f"schema update failed to parse at pass {pass_index}, batch {batch_index}",
            completion_text,
        )
        self.pass_index = pass_index
        self.batch_index = batch_index


class MissingIntent(SchemaBenchError):
    pass


class MissingCaption(SchemaBenchError):
    pass


class MissingFullText(SchemaBenchError):
    pass


class MissingReference(SchemaBenchError):
    pass


class NoConceptsSurvive(SchemaBenchError):
    pass


class NoNonCollidingAspect(SchemaBenchError):
    pass


class ReferenceLeakError(SchemaBenchError):
    """A reference-free critique prompt contained reference-schema text."""


# --- corpus -----------------------------------------------------------------

class IoError(SchemaBenchError):
    pass


class RecordParseError(SchemaBenchError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InsufficientRecords(SchemaBenchError):
    pass
