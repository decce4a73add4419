"""Multi-provider LLM abstraction.

A registry probes configured backends in priority order (external CLI,
HTTP chat endpoint, local inference endpoint, scripted, mock); the mock
provider is always available, so discovery never comes back empty. All
providers share one complete() contract: retry transport failures with
full-jitter exponential backoff (3 attempts total), never retry a
detected rate-limit signal, and account every call in a shared cost
ledger.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import shutil
import subprocess
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .errors import ConfigurationError, ProviderError, RateLimitError

DEFAULT_SHORT_PAYLOAD_LIMIT = 500
SNIPPET_CAP = 200

# Placeholder signal patterns; production deployments supply their own
# pattern file since upstream error shapes change over time. A named
# "reset" group, when present, captures the reset hint.
DEFAULT_RATE_LIMIT_PATTERNS = (
    r"rate.?limit(?:ed|\s+(?:reached|exceeded))",
    r"quota\s+exceeded",
    r"too\s+many\s+requests",
    r"usage\s+limit\s+reached(?:.*?resets?\s+at\s+(?P<reset>\S+))?",
    r"\b429\b",
)


@dataclass(frozen=True)
class LLMResponse:
    content: str
    input_tokens: int
    output_tokens: int
    model: str
    provider: str


@dataclass(frozen=True)
class RateLimitSignal:
    provider: str
    reset_hint: str | None
    snippet: str


@dataclass(frozen=True)
class CallContext:
    """Orchestrator-side call metadata, used by scripted providers."""

    step_id: str = ""
    iteration: int = 0
    role: str = "agent"  # agent | eval | feedback | summary

    def key(self) -> str:
        base = f"{self.step_id}:{self.iteration}"
        return base if self.role == "agent" else f"{base}:{self.role}"


class CostLedger:
    """Thread-safe cumulative token and cost accounting per (provider, model)."""

    def __init__(self, price_table: dict | None = None):
        # price_table: {"provider/model": {"input_per_1k": x, "output_per_1k": y}}
        self._lock = threading.Lock()
        self._price_table = price_table or {}
        self._rows: dict[tuple[str, str], dict] = {}

    def record(self, response: LLMResponse) -> None:
        key = (response.provider, response.model)
        prices = self._price_table.get(f"{response.provider}/{response.model}")
        with self._lock:
            row = self._rows.setdefault(
                key, {"input_tokens": 0, "output_tokens": 0, "calls": 0, "cost": None}
            )
            row["input_tokens"] += response.input_tokens
            row["output_tokens"] += response.output_tokens
            row["calls"] += 1
            if prices is not None:
                cost = (
                    response.input_tokens / 1000.0 * prices.get("input_per_1k", 0.0)
                    + response.output_tokens / 1000.0 * prices.get("output_per_1k", 0.0)
                )
                row["cost"] = (row["cost"] or 0.0) + cost

    def totals(self) -> dict:
        with self._lock:
            return {
                f"{prov}/{model}": dict(row)
                for (prov, model), row in sorted(self._rows.items())
            }


def detect_rate_limit(
    stdout: str,
    stderr: str,
    patterns=DEFAULT_RATE_LIMIT_PATTERNS,
    short_payload_limit: int = DEFAULT_SHORT_PAYLOAD_LIMIT,
    provider: str = "",
) -> RateLimitSignal | None:
    """Conservative signal detection across both output channels.

    A signal is honored only when the content payload itself is short,
    so substantive prose that happens to mention rate limits never
    triggers a false pause.
    """
    if len(stdout) > short_payload_limit:
        return None
    for channel in (stdout, stderr):
        if not channel:
            continue
        for pattern in patterns:
            m = re.search(pattern, channel, re.IGNORECASE)
            if m:
                reset = m.groupdict().get("reset") if m.groupdict() else None
                return RateLimitSignal(
                    provider=provider,
                    reset_hint=reset,
                    snippet=channel.strip()[:SNIPPET_CAP],
                )
    return None


def map_tools(tools, mapping: dict[str, str]) -> list[str]:
    """Resolve abstract tool names through the provider's mapping table.

    Unknown names are a startup configuration error, never a mid-run one.
    """
    resolved = []
    for name in tools:
        if name not in mapping:
            raise ConfigurationError(f"no provider tool mapping for {name!r}")
        resolved.append(mapping[name])
    return resolved


@dataclass
class RetryConfig:
    max_attempts: int = 3
    backoff_base: float = 1.0
    backoff_factor: float = 4.0


def _estimate_tokens(text: str) -> int:
    return (len(text) + 3) // 4


class Provider:
    """Common provider interface with retry, backoff, and cost tracking."""

    name = "base"

    def __init__(
        self,
        model: str = "default",
        ledger: CostLedger | None = None,
        retry: RetryConfig | None = None,
        tool_mapping: dict[str, str] | None = None,
        patterns=DEFAULT_RATE_LIMIT_PATTERNS,
        short_payload_limit: int = DEFAULT_SHORT_PAYLOAD_LIMIT,
        rng: random.Random | None = None,
        sleep=time.sleep,
    ):
        self.model = model
        self.ledger = ledger or CostLedger()
        self.retry = retry or RetryConfig()
        self.tool_mapping = tool_mapping or {}
        self.patterns = patterns
        self.short_payload_limit = short_payload_limit
        self._rng = rng or random.Random()
        self._sleep = sleep

    def available(self) -> bool:
        return False

    def complete(
        self,
        prompt: str,
        model: str | None = None,
        tools=(),
        timeout: float | None = None,
        context: CallContext | None = None,
    ) -> LLMResponse:
        model = model or self.model
        provider_tools = map_tools(tools, self.tool_mapping) if tools else []
        last_error: Exception | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            try:
                response = self._complete_once(
                    prompt, model, provider_tools, timeout, context
                )
            except RateLimitError:
                raise  # typed signal: no retry, no content
            except Exception as exc:  # transport-level failure
                last_error = exc
                if attempt < self.retry.max_attempts:
                    delay = self.retry.backoff_base * (
                        self.retry.backoff_factor ** (attempt - 1)
                    )
                    self._sleep(self._rng.uniform(0, delay))
                continue
            self.ledger.record(response)
            return response
        raise ProviderError(
            f"provider {self.name} failed after {self.retry.max_attempts} attempts: "
            f"{last_error}"
        ) from last_error

    def _complete_once(self, prompt, model, tools, timeout, context) -> LLMResponse:
        raise NotImplementedError


class MockProvider(Provider):
    """Deterministic responses for testing; always available.

    Evaluation prompts (recognized by the structured response-format
    marker) get a rubric reply meeting every criterion; everything else
    gets an echo derived from the prompt hash.
    """

    name = "mock"

    def __init__(self, score: float = 0.9, **kwargs):
        super().__init__(**kwargs)
        self.score = score

    def available(self) -> bool:
        return True

    def _complete_once(self, prompt, model, tools, timeout, context) -> LLMResponse:
        content = self._respond(prompt)
        return LLMResponse(
            content=content,
            input_tokens=_estimate_tokens(prompt),
            output_tokens=_estimate_tokens(content),
            model=model,
            provider=self.name,
        )

    def _respond(self, prompt: str) -> str:
        if "CRITERIA_MET:" in prompt:
            # Count only the numbered criteria section, not numbered lines
            # that happen to appear in the evaluated output.
            segment = prompt.split("Criteria:", 1)[-1].split("Output to evaluate:", 1)[0]
            count = len(re.findall(r"^\d+\. ", segment, re.MULTILINE))
            met = ", ".join(str(i) for i in range(1, count + 1))
            return (
                f"CRITERIA_MET: [{met}]\n"
                "CRITERIA_MISSED: []\n"
                f"SCORE: {self.score}\n"
                "FEEDBACK: All criteria satisfied.\n"
            )
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:12]
        return f"mock-response {digest}"


class ScriptedProvider(Provider):
    """Deterministic fault-injection double driven by a JSON script.

    The script maps "step_id:iteration" (with an optional ":eval",
    ":feedback", or ":summary" role suffix) to a directive: a content
    payload, a rate-limit directive, or a transport-error directive. A
    value may be a list of directives consumed one per call. Unmatched
    keys fall through to the mock echo behavior.
    """

    name = "scripted"

    def __init__(self, script: dict | str, **kwargs):
        super().__init__(**kwargs)
        if isinstance(script, str):
            try:
                with open(script, encoding="utf-8") as fh:
                    script = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"unreadable provider script: {exc}") from exc
        self.script = dict(script)
        self._calls: dict[str, int] = {}
        self._lock = threading.Lock()
        self._fallback = MockProvider(ledger=self.ledger)

    def available(self) -> bool:
        return True

    def _directive_for(self, key: str):
        entry = self.script.get(key)
        if entry is None:
            return None
        if isinstance(entry, list):
            with self._lock:
                n = self._calls.get(key, 0)
                self._calls[key] = n + 1
            return entry[min(n, len(entry) - 1)]
        return entry

    def _complete_once(self, prompt, model, tools, timeout, context) -> LLMResponse:
        key = context.key() if context is not None else ""
        directive = self._directive_for(key)
        if directive is None:
            content = self._fallback._respond(prompt)
            return LLMResponse(
                content=content,
                input_tokens=_estimate_tokens(prompt),
                output_tokens=_estimate_tokens(content),
                model=model,
                provider=self.name,
            )
        if isinstance(directive, str):
            directive = {"content": directive}
        if directive.get("rate_limit"):
            raise RateLimitError(
                provider=self.name,
                reset_hint=directive.get("reset_hint"),
                snippet=str(directive.get("snippet", "usage limit reached"))[:SNIPPET_CAP],
            )
        if directive.get("transport_error"):
            raise ConnectionError(directive.get("message", "scripted transport error"))
        content = str(directive.get("content", ""))
        return LLMResponse(
            content=content,
            input_tokens=int(directive.get("input_tokens", _estimate_tokens(prompt))),
            output_tokens=int(directive.get("output_tokens", _estimate_tokens(content))),
            model=model,
            provider=self.name,
        )


class CliProvider(Provider):
    """Invokes an external CLI with the prompt on standard input."""

    name = "cli"

    def __init__(self, command=("claude", "-p"), serialize: bool = True, **kwargs):
        super().__init__(**kwargs)
        self.command = tuple(command)
        # Some CLI tools are not concurrency-safe; serialize by default.
        self._proc_lock = threading.Lock() if serialize else None

    def available(self) -> bool:
        return bool(self.command) and shutil.which(self.command[0]) is not None

    def _complete_once(self, prompt, model, tools, timeout, context) -> LLMResponse:
        def invoke():
            return subprocess.run(
                list(self.command),
                input=prompt,
                capture_output=True,
                text=True,
                timeout=timeout,
            )

        if self._proc_lock is not None:
            with self._proc_lock:
                proc = invoke()
        else:
            proc = invoke()
        signal = detect_rate_limit(
            proc.stdout,
            proc.stderr,
            patterns=self.patterns,
            short_payload_limit=self.short_payload_limit,
            provider=self.name,
        )
        if signal is not None:
            raise RateLimitError(
                provider=self.name, reset_hint=signal.reset_hint, snippet=signal.snippet
            )
        if proc.returncode != 0:
            raise ProviderError(
                f"CLI provider exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        content = proc.stdout
        return LLMResponse(
            content=content,
            input_tokens=_estimate_tokens(prompt),
            output_tokens=_estimate_tokens(content),
            model=model,
            provider=self.name,
        )


class HttpProvider(Provider):
    """Chat-completion endpoint over a configured base URL."""

    name = "http"

    def __init__(self, base_url: str = "", api_key: str = "", **kwargs):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key

    def available(self) -> bool:
        if not self.base_url:
            return False
        try:
            req = urllib.request.Request(self.base_url, method="HEAD")
            urllib.request.urlopen(req, timeout=2)
            return True
        except urllib.error.HTTPError:
            return True  # reachable, just unhappy about HEAD
        except OSError:
            return False

    def _complete_once(self, prompt, model, tools, timeout, context) -> LLMResponse:
        payload = {
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
        }
        if tools:
            payload["tools"] = list(tools)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=json.dumps(payload).encode("utf-8"),
            headers=headers,
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout or 120) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", errors="replace")[:500]
            if exc.code == 429:
                raise RateLimitError(
                    provider=self.name,
                    reset_hint=exc.headers.get("Retry-After"),
                    snippet=detail[:SNIPPET_CAP],
                ) from exc
            raise ProviderError(f"HTTP {exc.code}: {detail[:200]}") from exc
        content = body["choices"][0]["message"]["content"]
        usage = body.get("usage", {})
        return LLMResponse(
            content=content,
            input_tokens=int(usage.get("prompt_tokens", _estimate_tokens(prompt))),
            output_tokens=int(usage.get("completion_tokens", _estimate_tokens(content))),
            model=model,
            provider=self.name,
        )


class LocalEndpointProvider(HttpProvider):
    """Local inference server speaking the same chat-completion shape."""

    name = "local"

    def __init__(self, base_url: str = "http://localhost:11434/v1", **kwargs):
        super().__init__(base_url=base_url, **kwargs)


@dataclass
class ProviderConfig:
    pin: str | None = None
    model: str = "default"
    cli_command: tuple[str, ...] = ()
    http_base_url: str = ""
    http_api_key: str = ""
    local_base_url: str = ""
    script: dict | str | None = None
    price_table: dict = field(default_factory=dict)
    tool_mapping: dict = field(default_factory=dict)
    patterns: tuple[str, ...] = DEFAULT_RATE_LIMIT_PATTERNS
    short_payload_limit: int = DEFAULT_SHORT_PAYLOAD_LIMIT
    retry: RetryConfig = field(default_factory=RetryConfig)


def discover_providers(config: ProviderConfig | None = None) -> list[Provider]:
    """Probe backends in priority order; mock is always last and available."""
    config = config or ProviderConfig()
    ledger = CostLedger(price_table=config.price_table)
    common = dict(
        model=config.model,
        ledger=ledger,
        retry=config.retry,
        tool_mapping=config.tool_mapping,
        patterns=config.patterns,
        short_payload_limit=config.short_payload_limit,
    )
    candidates: list[Provider] = []
    if config.cli_command:
        candidates.append(CliProvider(command=config.cli_command, **common))
    if config.http_base_url:
        candidates.append(
            HttpProvider(base_url=config.http_base_url, api_key=config.http_api_key, **common)
        )
    if config.local_base_url:
        candidates.append(LocalEndpointProvider(base_url=config.local_base_url, **common))
    if config.script is not None:
        candidates.append(ScriptedProvider(script=config.script, **common))
    candidates.append(MockProvider(**common))

    if config.pin is not None:
        pinned = [p for p in candidates if p.name == config.pin]
        if not pinned:
            raise ConfigurationError(f"pinned provider {config.pin!r} not configured")
        if not pinned[0].available():
            raise ConfigurationError(f"pinned provider {config.pin!r} unavailable")
        return pinned[:1]
    return [p for p in candidates if p.available()]
