"""Dual-metric scoring: rubric parsing, sandboxed metric execution, and
hybrid combination.

Rubric scoring asks an LLM evaluator to judge output against the step's
acceptance criteria and parses its structured reply. Metric scoring runs
agent-emitted code in a subprocess sandbox, extracts a numeric value, and
maps it through the minimize/maximize/target formula. Hybrid combines
both with the configured metric weight.
"""

from __future__ import annotations

import ast
import json
import math
import operator
import os
import re
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

from .errors import (
    EvaluationParseError,
    FormulaError,
    MetricExtractionError,
    SandboxError,
)
from .program import ConvergenceConfig, MetricConfig, StepSpec


@dataclass(frozen=True)
class EvalResult:
    score: float
    method: str  # rubric | metric | hybrid
    criteria_met: tuple[str, ...] = ()
    criteria_missed: tuple[str, ...] = ()
    metric_value: float | None = None
    feedback: str = ""

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "method": self.method,
            "criteria_met": list(self.criteria_met),
            "criteria_missed": list(self.criteria_missed),
            "metric_value": self.metric_value,
            "feedback": self.feedback,
        }


@dataclass(frozen=True)
class SandboxReport:
    stdout: str
    exit_status: int
    wall_time: float
    timed_out: bool


@dataclass(frozen=True)
class SandboxConfig:
    interpreter: tuple[str, ...] = (sys.executable,)
    language_tag: str = "python"
    timeout: float = 30.0
    env_allowlist: tuple[str, ...] = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR")


DEFAULT_RUBRIC_TEMPLATE = """\
You are evaluating a research output against acceptance criteria.

Criteria:
{criteria}

Output to evaluate:
{output}

Respond in exactly this format:
CRITERIA_MET: [comma-separated 1-based indices]
CRITERIA_MISSED: [indices]
SCORE: <number between 0 and 1>
FEEDBACK: <assessment>
"""


def render_rubric_prompt(
    output: str, criteria: tuple[str, ...], template: str = DEFAULT_RUBRIC_TEMPLATE
) -> str:
    numbered = "\n".join(f"{i}. {c}" for i, c in enumerate(criteria, start=1))
    return template.format(criteria=numbered, output=output)


_INDEX_LIST = re.compile(r"^\s*CRITERIA_(MET|MISSED)\s*:\s*\[([^\]]*)\]", re.MULTILINE)
_SCORE_LINE = re.compile(r"^\s*SCORE\s*:\s*([-+0-9.eE]+)", re.MULTILINE)
_FEEDBACK_LINE = re.compile(r"^\s*FEEDBACK\s*:\s*(.*)", re.MULTILINE | re.DOTALL)


def parse_rubric_response(text: str, criteria: tuple[str, ...]) -> EvalResult:
    """Parse the evaluator's structured reply into an EvalResult.

    Indices are 1-based positions into the criteria list.
    """
    lists = {"MET": [], "MISSED": []}
    for m in _INDEX_LIST.finditer(text):
        raw = m.group(2).strip()
        if raw:
            try:
                lists[m.group(1)] = [int(x.strip()) for x in raw.split(",")]
            except ValueError as exc:
                raise EvaluationParseError(f"bad criteria index list: {raw!r}") from exc
    score_m = _SCORE_LINE.search(text)
    if score_m is None:
        raise EvaluationParseError("response has no SCORE line")
    try:
        score = float(score_m.group(1))
    except ValueError as exc:
        raise EvaluationParseError(f"bad SCORE value: {score_m.group(1)!r}") from exc
    for idx in lists["MET"] + lists["MISSED"]:
        if not 1 <= idx <= len(criteria):
            raise EvaluationParseError(
                f"criteria index {idx} out of range 1..{len(criteria)}"
            )
    overlap = set(lists["MET"]) & set(lists["MISSED"])
    if overlap:
        raise EvaluationParseError(f"criteria listed as both met and missed: {sorted(overlap)}")
    fb = _FEEDBACK_LINE.search(text)
    return EvalResult(
        score=max(0.0, min(1.0, score)),
        method="rubric",
        criteria_met=tuple(criteria[i - 1] for i in lists["MET"]),
        criteria_missed=tuple(criteria[i - 1] for i in lists["MISSED"]),
        feedback=fb.group(1).strip() if fb else "",
    )


def render_rubric_response(result: EvalResult, criteria: tuple[str, ...]) -> str:
    """Inverse of parse_rubric_response, used for round-trip testing."""
    met = [criteria.index(c) + 1 for c in result.criteria_met]
    missed = [criteria.index(c) + 1 for c in result.criteria_missed]
    return (
        f"CRITERIA_MET: [{', '.join(map(str, met))}]\n"
        f"CRITERIA_MISSED: [{', '.join(map(str, missed))}]\n"
        f"SCORE: {result.score}\n"
        f"FEEDBACK: {result.feedback}\n"
    )


# ---------------------------------------------------------------------------
# Sandbox


def extract_code_blocks(output: str, language_tag: str = "python") -> list[str]:
    """Fenced code blocks whose tag matches the execution language, in order."""
    blocks = []
    in_fence = False
    matched = False
    buf: list[str] = []
    for line in output.split("\n"):
        stripped = line.strip()
        if stripped.startswith("```"):
            if in_fence:
                if matched:
                    blocks.append("\n".join(buf))
                buf = []
                in_fence = False
            else:
                in_fence = True
                matched = stripped[3:].strip() == language_tag
        elif in_fence:
            buf.append(line)
    return blocks


def run_sandbox(
    code: str,
    timeout: float,
    config: SandboxConfig | None = None,
    scratch_dir: str | None = None,
) -> SandboxReport:
    """Execute code in a separate OS process with a wall-clock kill.

    The child's environment is scrubbed to an allow-list and its working
    directory set to a scratch directory.
    """
    if not code:
        raise ValueError("code must be non-empty")
    if timeout <= 0:
        raise ValueError("timeout must be > 0")
    cfg = config or SandboxConfig()
    env = {k: v for k, v in os.environ.items() if k in cfg.env_allowlist}
    own_scratch = scratch_dir is None
    if own_scratch:
        scratch_dir = tempfile.mkdtemp(prefix="primeflow-sandbox-")
    script = os.path.join(scratch_dir, "_metric_script.py")
    with open(script, "w", encoding="utf-8") as fh:
        fh.write(code)
    start = time.monotonic()
    try:
        proc = subprocess.run(
            list(cfg.interpreter) + [script],
            capture_output=True,
            text=True,
            timeout=timeout,
            cwd=scratch_dir,
            env=env,
        )
    except subprocess.TimeoutExpired as exc:
        wall = time.monotonic() - start
        stdout = exc.stdout or ""
        if isinstance(stdout, bytes):
            stdout = stdout.decode("utf-8", errors="replace")
        return SandboxReport(
            stdout=stdout, exit_status=-1, wall_time=max(wall, timeout), timed_out=True
        )
    except FileNotFoundError as exc:
        raise SandboxError(f"interpreter not found: {cfg.interpreter[0]}") from exc
    return SandboxReport(
        stdout=proc.stdout,
        exit_status=proc.returncode,
        wall_time=time.monotonic() - start,
        timed_out=False,
    )


_NUMBER = r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?"


def extract_metric_value(stdout: str, key: str) -> float:
    """Pull the metric value from sandbox stdout.

    Strategies, in order: JSON object on the last line (then the whole
    stdout), a key/value scan, and finally the last numeric token.
    """
    lines = [ln for ln in stdout.strip().split("\n") if ln.strip()]
    for candidate in ([lines[-1]] if lines else []) + [stdout]:
        try:
            data = json.loads(candidate)
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(data, dict) and key in data:
            try:
                return float(data[key])
            except (TypeError, ValueError):
                pass
    kv = re.search(rf"{re.escape(key)}\s*[:=]\s*({_NUMBER})", stdout)
    if kv:
        return float(kv.group(1))
    numbers = re.findall(_NUMBER, stdout)
    if numbers:
        return float(numbers[-1])
    raise MetricExtractionError(f"no value for key {key!r} in sandbox output")


# ---------------------------------------------------------------------------
# Formulas and scores

_BIN_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
    ast.Mod: operator.mod,
}
_UNARY_OPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCTIONS = {"abs": abs, "min": min, "max": max, "log": math.log}
_VARIABLES = ("v", "b", "t")


def _eval_node(node: ast.AST, env: dict[str, float]) -> float:
    if isinstance(node, ast.Expression):
        return _eval_node(node.body, env)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise FormulaError(f"unknown identifier {node.id!r}")
        return env[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BIN_OPS:
        return _BIN_OPS[type(node.op)](
            _eval_node(node.left, env), _eval_node(node.right, env)
        )
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY_OPS:
        return _UNARY_OPS[type(node.op)](_eval_node(node.operand, env))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        if node.func.id not in _FUNCTIONS or node.keywords:
            raise FormulaError(f"unknown function {node.func.id!r}")
        return _FUNCTIONS[node.func.id](*(_eval_node(a, env) for a in node.args))
    raise FormulaError(f"disallowed syntax: {ast.dump(node)}")


def eval_formula(expression: str, v: float, b: float, t: float) -> float:
    """Evaluate a restricted arithmetic expression over {v, b, t}."""
    try:
        tree = ast.parse(expression, mode="eval")
    except SyntaxError as exc:
        raise FormulaError(f"formula syntax error: {exc}") from exc
    env = {"v": float(v), "b": float(b), "t": float(t)}
    try:
        return float(_eval_node(tree, env))
    except ZeroDivisionError as exc:
        raise FormulaError("division by zero") from exc
    except (ValueError, OverflowError) as exc:
        raise FormulaError(str(exc)) from exc


def _clamp(x: float) -> float:
    return max(0.0, min(1.0, x))


def metric_score(v: float, config: MetricConfig) -> float:
    """Map an extracted value to [0,1] per the configured objective type.

    minimize: 1 - (v-t)/(b-t); maximize: (v-b)/(t-b);
    target: 1 - |v-t|/|b-t|. A custom score_formula overrides the
    defaults. The result is clamped to [0,1].
    """
    b, t = config.baseline, config.target
    if config.score_formula:
        return _clamp(eval_formula(config.score_formula, v, b, t))
    if b == t:
        # Degenerate configuration: exact match or nothing.
        return 1.0 if v == t else 0.0
    if config.type == "minimize":
        raw = 1.0 - (v - t) / (b - t)
    elif config.type == "maximize":
        raw = (v - b) / (t - b)
    elif config.type == "target":
        raw = 1.0 - abs(v - t) / abs(b - t)
    else:
        raise ValueError(f"unknown metric type {config.type!r}")
    return _clamp(raw)


def hybrid_score(s_m: float, s_r: float, alpha: float) -> float:
    """Convex combination alpha*s_m + (1-alpha)*s_r."""
    for name, x in (("s_m", s_m), ("s_r", s_r), ("alpha", alpha)):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"{name} must be in [0,1], got {x}")
    return alpha * s_m + (1.0 - alpha) * s_r


def resolve_method(step: StepSpec, configured: str = "auto") -> str:
    """Which scoring method applies to a step."""
    if configured != "auto":
        return configured
    has_criteria = bool(step.accept_criteria)
    has_metric = step.metric is not None
    if has_criteria and has_metric:
        return "hybrid"
    if has_metric:
        return "metric"
    return "rubric"


def score_step(
    output: str,
    step: StepSpec,
    convergence: ConvergenceConfig,
    evaluator=None,
    sandbox_config: SandboxConfig | None = None,
    scratch_dir: str | None = None,
    rubric_template: str = DEFAULT_RUBRIC_TEMPLATE,
) -> EvalResult:
    """Score one iteration's output.

    ``evaluator`` is a callable(prompt) -> response text, used only on
    the rubric path (exactly one call); the metric path makes zero
    evaluator calls.
    """
    method = resolve_method(step, convergence.scoring_method)

    rubric_result = None
    if method in ("rubric", "hybrid"):
        if evaluator is None:
            raise ValueError("rubric scoring requires an evaluator")
        prompt = render_rubric_prompt(output, step.accept_criteria, rubric_template)
        rubric_result = parse_rubric_response(evaluator(prompt), step.accept_criteria)

    metric_value = None
    m_score = None
    if method in ("metric", "hybrid"):
        if step.metric is None:
            raise ValueError(f"step {step.id} has no metric configuration")
        cfg = sandbox_config or SandboxConfig()
        blocks = extract_code_blocks(output, cfg.language_tag)
        if not blocks:
            raise MetricExtractionError(
                f"no {cfg.language_tag} code blocks in step {step.id} output"
            )
        report = run_sandbox(
            "\n\n".join(blocks), cfg.timeout, config=cfg, scratch_dir=scratch_dir
        )
        if report.timed_out:
            raise MetricExtractionError(f"sandbox timed out after {cfg.timeout}s")
        metric_value = extract_metric_value(report.stdout, step.metric.extract)
        m_score = metric_score(metric_value, step.metric)

    if method == "rubric":
        return rubric_result
    if method == "metric":
        return EvalResult(score=m_score, method="metric", metric_value=metric_value)
    combined = hybrid_score(m_score, rubric_result.score, convergence.metric_weight)
    return EvalResult(
        score=combined,
        method="hybrid",
        criteria_met=rubric_result.criteria_met,
        criteria_missed=rubric_result.criteria_missed,
        metric_value=metric_value,
        feedback=rubric_result.feedback,
    )
