"""Context-window management: summarize old messages instead of truncating.

Below the budget-minus-reserve line nothing happens. Above it, everything
but the most recent k messages is replaced by a single summary message,
produced by the configured summarizer or, when that fails, by a
deterministic mechanical fallback (first + last sentence of each
message).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

SUMMARY_ROLE = "summary"

DEFAULT_RESERVE = 1024
DEFAULT_KEEP_RECENT = 4

SUMMARIZER_PROMPT = (
    "Summarize the conversation below. Preserve key decisions, important "
    "data points, current task state, and unresolved questions.\n\n"
)


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class CompactionReport:
    compression_ratio: float
    tokens_saved: int
    method: str  # llm | mechanical | none
    tokens_before: int = 0
    tokens_after: int = 0


def estimate_tokens(text: str) -> int:
    """Default heuristic counter: ceil(characters / 4)."""
    return (len(text) + 3) // 4


def _total(messages, counter) -> int:
    return sum(counter(m.content) for m in messages)


_SENTENCE = re.compile(r"[^.!?]*[.!?](?:\s+|$)|[^.!?]+$", re.DOTALL)


def split_sentences(text: str) -> list[str]:
    """Maximal runs ending in terminal punctuation (or end of content)."""
    return [m.group(0).strip() for m in _SENTENCE.finditer(text) if m.group(0).strip()]


def mechanical_fallback(messages: list[Message]) -> str:
    """First + last sentence of each message; single sentences appear once."""
    parts = []
    for m in messages:
        sentences = split_sentences(m.content)
        if not sentences:
            continue
        if len(sentences) == 1:
            parts.append(sentences[0])
        else:
            parts.append(f"{sentences[0]} {sentences[-1]}")
    return "\n".join(parts)


def compact(
    messages: list[Message],
    budget: int,
    reserve: int = DEFAULT_RESERVE,
    keep_recent: int = DEFAULT_KEEP_RECENT,
    summarizer=None,
    counter=estimate_tokens,
) -> tuple[list[Message], CompactionReport]:
    """Compact a message log to fit the token budget.

    ``summarizer`` is a callable(messages) -> summary text; on failure
    (or when absent) the mechanical fallback applies. The most recent
    ``keep_recent`` messages are always preserved byte-identically.
    """
    if budget <= reserve:
        raise ValueError(f"budget {budget} must exceed reserve {reserve}")
    if keep_recent < 0:
        raise ValueError(f"keep_recent must be >= 0, got {keep_recent}")
    before = _total(messages, counter)
    if before < budget - reserve:
        return list(messages), CompactionReport(
            compression_ratio=0.0,
            tokens_saved=0,
            method="none",
            tokens_before=before,
            tokens_after=before,
        )
    old = messages[:-keep_recent] if keep_recent else list(messages)
    recent = messages[-keep_recent:] if keep_recent else []
    method = "mechanical"
    summary_text = None
    if summarizer is not None:
        try:
            summary_text = summarizer(old)
            method = "llm"
        except Exception:
            summary_text = None
    if summary_text is None:
        summary_text = mechanical_fallback(old)
    result = [Message(role=SUMMARY_ROLE, content=summary_text)] + list(recent)
    after = _total(result, counter)
    if after >= before and method == "llm":
        # Summarizer inflated the log; retry with the mechanical fallback.
        result = [Message(role=SUMMARY_ROLE, content=mechanical_fallback(old))] + list(recent)
        after = _total(result, counter)
        method = "mechanical"
    return result, CompactionReport(
        compression_ratio=1.0 - (after / before) if before else 0.0,
        tokens_saved=before - after,
        method=method,
        tokens_before=before,
        tokens_after=after,
    )
