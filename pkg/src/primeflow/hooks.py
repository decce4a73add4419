"""Priority-ordered interceptor pipeline over the execution lifecycle.

Hooks register against fixed lifecycle points and run in priority order
(lower number first, registration order on ties). Each hook may replace
the payload, which chains into the next hook; the first hook returning
proceed=False aborts the intercepted operation. Hook exceptions fail
open: the error is reported through the registry's error callback and
the chain continues.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigurationError


class HookPoint(enum.Enum):
    BEFORE_PARSE = "before_parse"
    AFTER_PARSE = "after_parse"
    BEFORE_REGISTER = "before_register"
    AFTER_REGISTER = "after_register"
    BEFORE_STEP = "before_step"
    AFTER_STEP = "after_step"
    BEFORE_ITERATION = "before_iteration"
    AFTER_ITERATION = "after_iteration"
    BEFORE_LLM_CALL = "before_llm_call"
    AFTER_LLM_CALL = "after_llm_call"
    BEFORE_SCORE = "before_score"
    AFTER_SCORE = "after_score"
    BEFORE_FEEDBACK = "before_feedback"
    AFTER_FEEDBACK = "after_feedback"
    BEFORE_ASSEMBLE = "before_assemble"
    AFTER_ASSEMBLE = "after_assemble"
    BEFORE_CONTEXT_INJECT = "before_context_inject"
    CONTEXT_OVERFLOW = "context_overflow"


@dataclass
class HookContext:
    point: HookPoint
    payload: Any
    run_id: str = ""
    step_id: str = ""
    iteration: int = 0


@dataclass(frozen=True)
class HookResult:
    proceed: bool = True
    modified_data: Any = None


Hook = Callable[[HookContext], "HookResult | None"]


@dataclass(frozen=True)
class Registration:
    point: HookPoint
    priority: int
    seq: int


class HookRegistry:
    def __init__(self, on_error: Callable[[HookPoint, Exception], None] | None = None):
        self._hooks: dict[HookPoint, list[tuple[int, int, Hook]]] = {}
        self._seq = 0
        self.on_error = on_error

    def register(self, point: HookPoint | str, hook: Hook, priority: int = 100) -> Registration:
        if isinstance(point, str):
            try:
                point = HookPoint(point)
            except ValueError:
                raise ConfigurationError(f"unknown hook point {point!r}") from None
        self._seq += 1
        entry = (priority, self._seq, hook)
        self._hooks.setdefault(point, []).append(entry)
        self._hooks[point].sort(key=lambda e: (e[0], e[1]))
        return Registration(point=point, priority=priority, seq=self._seq)

    def dispatch(self, point: HookPoint, context: HookContext) -> tuple[bool, Any]:
        """Run the chain; returns (proceed, final payload)."""
        payload = context.payload
        for _prio, _seq, hook in self._hooks.get(point, ()):
            context.payload = payload
            try:
                result = hook(context)
            except Exception as exc:  # fail open, report, continue
                if self.on_error is not None:
                    self.on_error(point, exc)
                continue
            if result is None:
                continue
            if result.modified_data is not None:
                payload = result.modified_data
            if not result.proceed:
                return False, payload
        return True, payload

    def run(self, point: HookPoint, payload: Any = None, **ids) -> tuple[bool, Any]:
        return self.dispatch(point, HookContext(point=point, payload=payload, **ids))


# ---------------------------------------------------------------------------
# Built-in hook factories


def logging_hook(log: Callable[[str], None]) -> Hook:
    """Pure observer; never alters the payload and always proceeds."""

    def hook(context: HookContext) -> HookResult:
        log(f"{context.point.value} step={context.step_id} iter={context.iteration}")
        return HookResult(proceed=True)

    return hook


def score_threshold_hook(minimum: float) -> Hook:
    """Aborts after_score when the score falls below a hard floor."""
    if not 0.0 <= minimum <= 1.0:
        raise ConfigurationError(f"minimum must be in [0,1], got {minimum}")

    def hook(context: HookContext) -> HookResult | None:
        if context.point is not HookPoint.AFTER_SCORE:
            return None
        score = context.payload.get("score") if isinstance(context.payload, dict) else None
        if score is not None and score < minimum:
            return HookResult(proceed=False)
        return HookResult(proceed=True)

    return hook


def timeout_hook(limit_seconds: float, clock=time.monotonic) -> Hook:
    """Aborts before_iteration once the wall-clock budget is spent.

    The budget starts on the hook's first dispatch.
    """
    if limit_seconds <= 0:
        raise ConfigurationError(f"limit_seconds must be > 0, got {limit_seconds}")
    state = {"start": None}

    def hook(context: HookContext) -> HookResult | None:
        if context.point is not HookPoint.BEFORE_ITERATION:
            return None
        if state["start"] is None:
            state["start"] = clock()
        if clock() - state["start"] > limit_seconds:
            return HookResult(proceed=False)
        return HookResult(proceed=True)

    return hook


def max_iterations_hook(cap: int) -> Hook:
    """Aborts before_iteration past the iteration cap."""
    if cap < 1:
        raise ConfigurationError(f"cap must be >= 1, got {cap}")

    def hook(context: HookContext) -> HookResult | None:
        if context.point is not HookPoint.BEFORE_ITERATION:
            return None
        if context.iteration > cap:
            return HookResult(proceed=False)
        return HookResult(proceed=True)

    return hook


REDACTION_MARKER = "[REDACTED]"

_LLM_POINTS = (HookPoint.BEFORE_LLM_CALL, HookPoint.AFTER_LLM_CALL)


def data_redaction_hook(fields: list[str], marker: str = REDACTION_MARKER) -> Hook:
    """Replaces listed fields with a marker in LLM-call payloads."""
    if not fields:
        raise ConfigurationError("fields must be non-empty")
    targets = set(fields)

    def redact(value):
        if isinstance(value, dict):
            return {
                k: (marker if k in targets else redact(v)) for k, v in value.items()
            }
        if isinstance(value, list):
            return [redact(v) for v in value]
        return value

    def hook(context: HookContext) -> HookResult | None:
        if context.point not in _LLM_POINTS:
            return None
        if isinstance(context.payload, dict):
            return HookResult(proceed=True, modified_data=redact(context.payload))
        return HookResult(proceed=True)

    return hook


def builtin_factories() -> dict[str, Callable]:
    return {
        "logging": logging_hook,
        "score_threshold": score_threshold_hook,
        "timeout": timeout_hook,
        "max_iterations": max_iterations_hook,
        "data_redaction": data_redaction_hook,
    }
