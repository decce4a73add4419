"""Provider contract: retry/backoff, rate-limit conservatism, ledger, discovery."""

import random

import pytest

from primeflow.errors import ConfigurationError, ProviderError, RateLimitError
from primeflow.providers import (
    CallContext,
    CostLedger,
    LLMResponse,
    MockProvider,
    Provider,
    ProviderConfig,
    RetryConfig,
    ScriptedProvider,
    detect_rate_limit,
    discover_providers,
    map_tools,
)


class FlakyProvider(Provider):
    """Fails a scripted number of times, then succeeds."""

    name = "flaky"

    def __init__(self, failures, error=ConnectionError, **kwargs):
        super().__init__(**kwargs)
        self.failures = failures
        self.error = error
        self.attempts = 0

    def available(self):
        return True

    def _complete_once(self, prompt, model, tools, timeout, context):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise self.error("transient")
        return LLMResponse(
            content="ok",
            input_tokens=10,
            output_tokens=5,
            model=model,
            provider=self.name,
        )


class TestRetry:
    def test_succeeds_after_transient_failures(self):
        sleeps = []
        provider = FlakyProvider(2, sleep=sleeps.append, rng=random.Random(0))
        response = provider.complete("hi")
        assert response.content == "ok"
        assert provider.attempts == 3
        assert len(sleeps) == 2

    def test_exhaustion_raises_provider_error(self):
        provider = FlakyProvider(5, sleep=lambda s: None)
        with pytest.raises(ProviderError, match="after 3 attempts"):
            provider.complete("hi")
        assert provider.attempts == 3

    def test_backoff_is_full_jitter_with_factor_four(self):
        sleeps = []
        provider = FlakyProvider(2, sleep=sleeps.append, rng=random.Random(1))
        provider.complete("hi")
        # Delay t is uniform in [0, base * factor**(attempt-1)] = [0,1], [0,4].
        assert 0 <= sleeps[0] <= 1.0
        assert 0 <= sleeps[1] <= 4.0

    def test_rate_limit_never_retried(self):
        provider = FlakyProvider(
            5,
            error=lambda msg: RateLimitError(provider="flaky", snippet=msg),
            sleep=lambda s: None,
        )
        with pytest.raises(RateLimitError):
            provider.complete("hi")
        assert provider.attempts == 1

    def test_custom_attempt_count(self):
        provider = FlakyProvider(
            4, retry=RetryConfig(max_attempts=5), sleep=lambda s: None
        )
        assert provider.complete("hi").content == "ok"
        assert provider.attempts == 5


class TestRateLimitDetection:
    def test_detects_in_stderr(self):
        signal = detect_rate_limit("", "Error: rate limit exceeded", provider="cli")
        assert signal is not None
        assert signal.provider == "cli"
        assert "rate limit" in signal.snippet

    def test_detects_usage_limit_with_reset_hint(self):
        signal = detect_rate_limit("usage limit reached. resets at 03:00", "")
        assert signal is not None
        assert signal.reset_hint == "03:00"

    def test_long_payload_is_conservative(self):
        # Substantive prose mentioning rate limits must not trigger a pause.
        prose = ("The study of rate limit exceeded thresholds in queueing " * 20)
        assert len(prose) > 500
        assert detect_rate_limit(prose, "") is None

    def test_clean_output_no_signal(self):
        assert detect_rate_limit("all good", "") is None

    def test_429_detected(self):
        assert detect_rate_limit("", "HTTP 429 returned") is not None


class TestLedger:
    def test_accumulates_per_provider_model(self):
        ledger = CostLedger(
            price_table={"mock/m1": {"input_per_1k": 1.0, "output_per_1k": 2.0}}
        )
        for _ in range(3):
            ledger.record(
                LLMResponse(
                    content="x", input_tokens=500, output_tokens=250, model="m1", provider="mock"
                )
            )
        totals = ledger.totals()
        row = totals["mock/m1"]
        assert row["calls"] == 3
        assert row["input_tokens"] == 1500
        assert row["output_tokens"] == 750
        assert row["cost"] == pytest.approx(3 * (0.5 * 1.0 + 0.25 * 2.0))

    def test_unpriced_model_has_null_cost(self):
        ledger = CostLedger()
        ledger.record(
            LLMResponse(content="x", input_tokens=10, output_tokens=5, model="m", provider="p")
        )
        assert ledger.totals()["p/m"]["cost"] is None

    def test_token_conservation_across_calls(self):
        ledger = CostLedger()
        provider = MockProvider(ledger=ledger)
        prompts = ["alpha", "beta gamma", "a longer prompt body here"]
        expected_in = 0
        expected_out = 0
        for p in prompts:
            resp = provider.complete(p)
            expected_in += resp.input_tokens
            expected_out += resp.output_tokens
        row = ledger.totals()["mock/default"]
        assert row["input_tokens"] == expected_in
        assert row["output_tokens"] == expected_out
        assert row["calls"] == len(prompts)


class TestToolMapping:
    def test_resolves_known_names(self):
        assert map_tools(["search"], {"search": "web.search"}) == ["web.search"]

    def test_unknown_name_is_configuration_error(self):
        with pytest.raises(ConfigurationError, match="tool mapping"):
            map_tools(["search", "ghost"], {"search": "web.search"})

    def test_complete_rejects_unmapped_tools(self):
        provider = MockProvider(tool_mapping={"search": "s"})
        with pytest.raises(ConfigurationError):
            provider.complete("hi", tools=("browse",))


class TestMock:
    def test_deterministic_echo(self):
        provider = MockProvider()
        a = provider.complete("same prompt").content
        b = provider.complete("same prompt").content
        assert a == b
        assert a.startswith("mock-response ")

    def test_answers_rubric_prompts(self):
        provider = MockProvider(score=0.9)
        prompt = (
            "Criteria:\n1. One\n2. Two\n\nOutput to evaluate:\nbody\n\n"
            "CRITERIA_MET: ...\n"
        )
        content = provider.complete(prompt).content
        assert "CRITERIA_MET: [1, 2]" in content
        assert "SCORE: 0.9" in content

    def test_always_available(self):
        assert MockProvider().available()


class TestScripted:
    def test_keyed_content(self):
        provider = ScriptedProvider({"s1:1": "scripted body"})
        ctx = CallContext(step_id="s1", iteration=1)
        assert provider.complete("x", context=ctx).content == "scripted body"

    def test_role_suffix_keys(self):
        provider = ScriptedProvider({"s1:1:eval": "SCORE: 0.4"})
        ctx = CallContext(step_id="s1", iteration=1, role="eval")
        assert provider.complete("x", context=ctx).content == "SCORE: 0.4"

    def test_list_directives_consumed_in_order(self):
        provider = ScriptedProvider({"s1:1": ["first", "second"]})
        ctx = CallContext(step_id="s1", iteration=1)
        assert provider.complete("x", context=ctx).content == "first"
        assert provider.complete("x", context=ctx).content == "second"
        # Past the end the last directive repeats.
        assert provider.complete("x", context=ctx).content == "second"

    def test_rate_limit_directive(self):
        provider = ScriptedProvider(
            {"s3:2": {"rate_limit": True, "reset_hint": "12:00", "snippet": "limit"}}
        )
        with pytest.raises(RateLimitError) as exc:
            provider.complete("x", context=CallContext(step_id="s3", iteration=2))
        assert exc.value.reset_hint == "12:00"

    def test_transport_error_directive_retried(self):
        provider = ScriptedProvider(
            {"s1:1": [{"transport_error": True}, "recovered"]},
            sleep=lambda s: None,
        )
        ctx = CallContext(step_id="s1", iteration=1)
        assert provider.complete("x", context=ctx).content == "recovered"

    def test_unmatched_key_falls_back_to_mock(self):
        provider = ScriptedProvider({})
        content = provider.complete(
            "anything", context=CallContext(step_id="zz", iteration=9)
        ).content
        assert content.startswith("mock-response ")

    def test_script_file_loading(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text('{"s1:1": "from file"}')
        provider = ScriptedProvider(str(path))
        ctx = CallContext(step_id="s1", iteration=1)
        assert provider.complete("x", context=ctx).content == "from file"

    def test_unreadable_script(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ScriptedProvider(str(tmp_path / "missing.json"))


class TestDiscovery:
    def test_mock_always_present(self):
        providers = discover_providers(ProviderConfig())
        assert providers[-1].name == "mock"

    def test_scripted_before_mock(self):
        providers = discover_providers(ProviderConfig(script={}))
        names = [p.name for p in providers]
        assert names.index("scripted") < names.index("mock")

    def test_pin_returns_single(self):
        providers = discover_providers(ProviderConfig(pin="mock"))
        assert [p.name for p in providers] == ["mock"]

    def test_pin_unconfigured_rejected(self):
        with pytest.raises(ConfigurationError, match="not configured"):
            discover_providers(ProviderConfig(pin="scripted"))

    def test_shared_ledger(self):
        providers = discover_providers(ProviderConfig(script={}))
        assert providers[0].ledger is providers[-1].ledger


def test_call_context_keys():
    assert CallContext(step_id="s1", iteration=2).key() == "s1:2"
    assert CallContext(step_id="s1", iteration=2, role="eval").key() == "s1:2:eval"
    assert CallContext(step_id="s1", iteration=2, role="feedback").key() == "s1:2:feedback"
