"""Context compaction: budget guard, suffix preservation, fallback, arithmetic."""

import pytest

from primeflow.compaction import (
    SUMMARY_ROLE,
    Message,
    compact,
    estimate_tokens,
    mechanical_fallback,
    split_sentences,
)


def msgs(*contents, role="assistant"):
    return [Message(role=role, content=c) for c in contents]


class TestTokenCounter:
    def test_ceil_division_by_four(self):
        assert estimate_tokens("") == 0
        assert estimate_tokens("a") == 1
        assert estimate_tokens("abcd") == 1
        assert estimate_tokens("abcde") == 2
        assert estimate_tokens("x" * 100) == 25


class TestSentences:
    def test_split_on_terminal_punctuation(self):
        assert split_sentences("First one. Second one! Third one?") == [
            "First one.",
            "Second one!",
            "Third one?",
        ]

    def test_trailing_fragment_kept(self):
        assert split_sentences("Complete sentence. trailing fragment") == [
            "Complete sentence.",
            "trailing fragment",
        ]

    def test_empty(self):
        assert split_sentences("") == []


class TestMechanicalFallback:
    def test_first_and_last_sentence(self):
        text = "Opening statement. Middle detail one. Middle detail two. Closing remark."
        assert mechanical_fallback(msgs(text)) == "Opening statement. Closing remark."

    def test_single_sentence_appears_once(self):
        assert mechanical_fallback(msgs("Only sentence.")) == "Only sentence."

    def test_multiple_messages_one_line_each(self):
        result = mechanical_fallback(msgs("A one. A two.", "B one. B two."))
        assert result == "A one. A two.\nB one. B two."

    def test_deterministic(self):
        messages = msgs("Alpha. Beta. Gamma.", "Delta only.")
        assert mechanical_fallback(messages) == mechanical_fallback(messages)


class TestGuard:
    def test_below_line_no_compaction(self):
        messages = msgs("short", "messages")
        result, report = compact(messages, budget=1000, reserve=100)
        assert result == messages
        assert report.method == "none"
        assert report.tokens_saved == 0
        assert report.compression_ratio == 0.0

    def test_exactly_at_line_compacts(self):
        # total == budget - reserve is not strictly below the line.
        content = "x" * 400  # 100 tokens
        result, report = compact(msgs(content), budget=200, reserve=100, keep_recent=0)
        assert report.method == "mechanical"

    def test_budget_must_exceed_reserve(self):
        with pytest.raises(ValueError):
            compact([], budget=100, reserve=100)


class TestCompact:
    def _history(self, n=10):
        return msgs(
            *(
                f"Message number {i} opening thought. Supporting detail for {i}. "
                f"Final point of message {i}."
                for i in range(n)
            )
        )

    def test_recent_suffix_preserved_exactly(self):
        history = self._history()
        result, report = compact(history, budget=120, reserve=20, keep_recent=4)
        assert result[-4:] == history[-4:]
        assert result[0].role == SUMMARY_ROLE
        assert len(result) == 5

    def test_llm_summarizer_used(self):
        history = self._history()
        result, report = compact(
            history,
            budget=120,
            reserve=20,
            keep_recent=2,
            summarizer=lambda old: "tight summary.",
        )
        assert report.method == "llm"
        assert result[0].content == "tight summary."

    def test_summarizer_failure_falls_back(self):
        def broken(old):
            raise RuntimeError("no")

        history = self._history()
        result, report = compact(
            history, budget=120, reserve=20, keep_recent=2, summarizer=broken
        )
        assert report.method == "mechanical"
        expected = mechanical_fallback(history[:-2])
        assert result[0].content == expected

    def test_inflating_summarizer_replaced_by_fallback(self):
        history = self._history()
        result, report = compact(
            history,
            budget=120,
            reserve=20,
            keep_recent=2,
            summarizer=lambda old: "pad " * 2000,
        )
        assert report.method == "mechanical"

    def test_report_arithmetic_exact(self):
        history = self._history()
        counter = estimate_tokens
        before = sum(counter(m.content) for m in history)
        result, report = compact(history, budget=120, reserve=20, keep_recent=3)
        after = sum(counter(m.content) for m in result)
        assert report.tokens_before == before
        assert report.tokens_after == after
        assert report.tokens_saved == before - after
        assert report.compression_ratio == pytest.approx(1.0 - after / before)

    def test_custom_counter_respected(self):
        words = lambda text: len(text.split())
        history = msgs(*("word " * 30 for _ in range(5)))
        _, report = compact(history, budget=60, reserve=10, keep_recent=1, counter=words)
        assert report.tokens_before == 150

    def test_keep_recent_zero_compacts_everything(self):
        history = self._history(6)
        result, _ = compact(history, budget=60, reserve=10, keep_recent=0)
        assert len(result) == 1
        assert result[0].role == SUMMARY_ROLE
