"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class PrimeflowError(Exception):
    """Base class for all engine errors."""


class ParseError(PrimeflowError):
    """Raised when a program document cannot be parsed.

    Carries an optional 1-based line number when the failure location is known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PrimeflowError):
    """Raised when a parsed document violates structural invariants.

    ``violations`` lists every problem found, not just the first.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class CycleError(PrimeflowError):
    """Raised when an operation requires an acyclic graph but finds a cycle."""

    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class CapacityError(PrimeflowError):
    """Requested identity depth exceeds the 64-bit capacity for its prime."""


class ForeignFactorError(PrimeflowError):
    """A consensus token contains a factor outside the assigning prime pool."""

    def __init__(self, residue: int):
        self.residue = residue
        super().__init__(f"token has non-pool residue {residue}")


class EvaluationParseError(PrimeflowError):
    """An evaluator response could not be parsed into a structured result."""


class MetricExtractionError(PrimeflowError):
    """No numeric metric value could be extracted from sandbox output."""


class FormulaError(PrimeflowError):
    """A score formula failed to parse or evaluate."""


class SandboxError(PrimeflowError):
    """The sandbox environment is unusable (e.g. interpreter missing)."""


class ProviderError(PrimeflowError):
    """A provider call failed after exhausting its retry budget."""


class RateLimitError(ProviderError):
    """Typed upstream rate-limit signal; never retried, carries no content."""

    def __init__(self, provider: str, reset_hint: str | None = None, snippet: str = ""):
        self.provider = provider
        self.reset_hint = reset_hint
        self.snippet = snippet
        super().__init__(f"rate limit signalled by provider {provider!r}")


class ConfigurationError(PrimeflowError):
    """Invalid or incomplete operator configuration, detected at startup."""


class StoreError(PrimeflowError):
    """Event store I/O failure; fatal to the owning run."""


class IntegrityError(StoreError):
    """Event log corruption away from the trailing line."""

    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NotFoundError(PrimeflowError):
    """A referenced entity (step, event, run) does not exist."""


class UnresumableError(PrimeflowError):
    """The output directory lacks the artifacts needed to resume."""


class FetchRejected(PrimeflowError):
    """Base class for reference-material rejections."""


class SsrfRejected(FetchRejected):
    """URL resolves to a denied address class."""


class SizeRejected(FetchRejected):
    """Content exceeds the configured byte cap."""


class ContentTypeRejected(FetchRejected):
    """Content is binary or carries a disallowed content type."""


class TimeRejected(FetchRejected):
    """Transfer exceeded the configured time budget."""


class SandboxEscapeRejected(FetchRejected):
    """Local path canonicalizes outside the allowed roots."""


class SecretPathRejected(FetchRejected):
    """Local path matches a deny-listed secret-path marker."""
