"""Hook registry semantics and built-in hook factories."""

import pytest

from primeflow.errors import ConfigurationError
from primeflow.hooks import (
    REDACTION_MARKER,
    HookContext,
    HookPoint,
    HookRegistry,
    HookResult,
    builtin_factories,
    data_redaction_hook,
    logging_hook,
    max_iterations_hook,
    score_threshold_hook,
    timeout_hook,
)


class TestRegistry:
    def test_priority_ordering_lower_first(self):
        order = []
        registry = HookRegistry()
        registry.register(
            HookPoint.BEFORE_STEP, lambda c: order.append("late"), priority=200
        )
        registry.register(
            HookPoint.BEFORE_STEP, lambda c: order.append("early"), priority=10
        )
        registry.run(HookPoint.BEFORE_STEP, {})
        assert order == ["early", "late"]

    def test_registration_order_breaks_ties(self):
        order = []
        registry = HookRegistry()
        registry.register(HookPoint.BEFORE_STEP, lambda c: order.append("first"))
        registry.register(HookPoint.BEFORE_STEP, lambda c: order.append("second"))
        registry.run(HookPoint.BEFORE_STEP, {})
        assert order == ["first", "second"]

    def test_abort_short_circuits(self):
        seen = []

        def aborts(c):
            seen.append("abort")
            return HookResult(proceed=False)

        def never(c):
            seen.append("never")

        registry = HookRegistry()
        registry.register(HookPoint.BEFORE_STEP, aborts, priority=1)
        registry.register(HookPoint.BEFORE_STEP, never, priority=2)
        proceed, _ = registry.run(HookPoint.BEFORE_STEP, {})
        assert not proceed
        assert seen == ["abort"]

    def test_modification_chains(self):
        registry = HookRegistry()
        registry.register(
            HookPoint.BEFORE_LLM_CALL,
            lambda c: HookResult(modified_data={**c.payload, "a": 1}),
            priority=1,
        )
        registry.register(
            HookPoint.BEFORE_LLM_CALL,
            lambda c: HookResult(modified_data={**c.payload, "b": c.payload["a"] + 1}),
            priority=2,
        )
        proceed, payload = registry.run(HookPoint.BEFORE_LLM_CALL, {})
        assert proceed
        assert payload == {"a": 1, "b": 2}

    def test_none_result_means_pass_through(self):
        registry = HookRegistry()
        registry.register(HookPoint.BEFORE_STEP, lambda c: None)
        proceed, payload = registry.run(HookPoint.BEFORE_STEP, {"x": 1})
        assert proceed
        assert payload == {"x": 1}

    def test_exceptions_fail_open_and_report(self):
        errors = []
        registry = HookRegistry(on_error=lambda point, exc: errors.append((point, exc)))

        def broken(c):
            raise RuntimeError("boom")

        ran = []
        registry.register(HookPoint.BEFORE_STEP, broken, priority=1)
        registry.register(HookPoint.BEFORE_STEP, lambda c: ran.append(True), priority=2)
        proceed, _ = registry.run(HookPoint.BEFORE_STEP, {})
        assert proceed
        assert ran == [True]
        assert errors[0][0] is HookPoint.BEFORE_STEP
        assert str(errors[0][1]) == "boom"

    def test_string_point_names_accepted(self):
        registry = HookRegistry()
        ran = []
        registry.register("before_step", lambda c: ran.append(True))
        registry.run(HookPoint.BEFORE_STEP, {})
        assert ran == [True]

    def test_unknown_point_name_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown hook point"):
            HookRegistry().register("before_lunch", lambda c: None)

    def test_point_isolation(self):
        registry = HookRegistry()
        ran = []
        registry.register(HookPoint.BEFORE_STEP, lambda c: ran.append(True))
        registry.run(HookPoint.AFTER_STEP, {})
        assert ran == []

    def test_eighteen_lifecycle_points(self):
        assert len(HookPoint) == 18


class TestBuiltins:
    def test_factories_table(self):
        factories = builtin_factories()
        assert set(factories) == {
            "logging",
            "score_threshold",
            "timeout",
            "max_iterations",
            "data_redaction",
        }

    def test_logging_hook_observes_without_altering(self):
        lines = []
        hook = logging_hook(lines.append)
        context = HookContext(
            point=HookPoint.BEFORE_STEP, payload={"x": 1}, step_id="s1", iteration=2
        )
        result = hook(context)
        assert result.proceed
        assert result.modified_data is None
        assert lines == ["before_step step=s1 iter=2"]

    def test_score_threshold_aborts_below_floor(self):
        hook = score_threshold_hook(0.5)
        low = HookContext(point=HookPoint.AFTER_SCORE, payload={"score": 0.4})
        high = HookContext(point=HookPoint.AFTER_SCORE, payload={"score": 0.6})
        assert hook(low).proceed is False
        assert hook(high).proceed is True

    def test_score_threshold_ignores_other_points(self):
        hook = score_threshold_hook(0.5)
        other = HookContext(point=HookPoint.BEFORE_STEP, payload={"score": 0.0})
        assert hook(other) is None

    def test_timeout_hook_starts_on_first_dispatch(self):
        clock = {"now": 100.0}
        hook = timeout_hook(10.0, clock=lambda: clock["now"])
        ctx = lambda: HookContext(point=HookPoint.BEFORE_ITERATION, payload={})
        assert hook(ctx()).proceed  # first dispatch starts the budget
        clock["now"] = 109.0
        assert hook(ctx()).proceed
        clock["now"] = 111.0
        assert hook(ctx()).proceed is False

    def test_max_iterations_hook(self):
        hook = max_iterations_hook(2)
        within = HookContext(point=HookPoint.BEFORE_ITERATION, payload={}, iteration=2)
        beyond = HookContext(point=HookPoint.BEFORE_ITERATION, payload={}, iteration=3)
        assert hook(within).proceed
        assert hook(beyond).proceed is False

    def test_redaction_hook_masks_fields(self):
        hook = data_redaction_hook(["api_key"])
        context = HookContext(
            point=HookPoint.BEFORE_LLM_CALL,
            payload={"prompt": "x", "api_key": "hunter2", "nested": {"api_key": "n"}},
        )
        result = hook(context)
        assert result.modified_data["api_key"] == REDACTION_MARKER
        assert result.modified_data["nested"]["api_key"] == REDACTION_MARKER
        assert result.modified_data["prompt"] == "x"

    def test_redaction_only_on_llm_points(self):
        hook = data_redaction_hook(["api_key"])
        other = HookContext(point=HookPoint.BEFORE_STEP, payload={"api_key": "x"})
        assert hook(other) is None

    def test_factory_argument_validation(self):
        with pytest.raises(ConfigurationError):
            score_threshold_hook(1.5)
        with pytest.raises(ConfigurationError):
            timeout_hook(0)
        with pytest.raises(ConfigurationError):
            max_iterations_hook(0)
        with pytest.raises(ConfigurationError):
            data_redaction_hook([])
