"""program.md research protocols: typed model, parser, and serializer.

A program document is markdown with:

* YAML frontmatter between ``---`` fences (lineage metadata),
* a ``## Problem`` section of free text,
* ``## Convergence``, ``## Dependencies``, ``## Output`` sections each
  holding one fenced YAML block,
* a ``## Steps`` section with one level-3 heading per step, each holding
  a fenced YAML block.

Parsing is total: a document either yields a fully validated
ResearchProgram or raises ParseError / ValidationError (the latter
listing every violation found). Programs are immutable after
construction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import yaml

from . import dag
from .errors import ParseError, ValidationError

SCORING_METHODS = ("rubric", "metric", "hybrid", "auto")
FEEDBACK_STYLES = ("directive", "socratic", "score_only")
METRIC_TYPES = ("minimize", "maximize", "target")
EXECUTION_MODES = ("phased", "sequential", "eager")

DEFAULT_METRIC_WEIGHT = 0.7


@dataclass(frozen=True)
class Frontmatter:
    title: str = ""
    author: str = ""
    tags: tuple[str, ...] = ()
    area: str = ""
    version: int = 1
    parent_version: int | None = None
    generation_score: float | None = None
    mutation_log: tuple[str, ...] = ()
    cluster_prime: int | None = None


@dataclass(frozen=True)
class ConvergenceConfig:
    global_threshold: float = 0.8
    max_iterations: int = 5
    scoring_method: str = "auto"
    metric_weight: float = DEFAULT_METRIC_WEIGHT
    feedback_style: str = "directive"
    timeout: float = 600.0
    early_stop: bool = False
    retry_on_failure: int = 0


@dataclass(frozen=True)
class MetricConfig:
    type: str
    extract: str
    baseline: float
    target: float
    score_formula: str | None = None


@dataclass(frozen=True)
class StepSpec:
    id: str
    name: str
    goal: str
    depth: int = 1
    accept_criteria: tuple[str, ...] = ()
    metric: MetricConfig | None = None
    depends_on: tuple[str, ...] = ()
    context_from: tuple[str, ...] = ()
    output_format: str = "markdown"
    threshold_override: float | None = None
    tools: tuple[str, ...] = ()


@dataclass(frozen=True)
class OutputConfig:
    format: str = "markdown"
    include_audit_trail: bool = False
    export_formats: tuple[str, ...] = ()


@dataclass(frozen=True)
class ResearchProgram:
    frontmatter: Frontmatter
    problem: str
    convergence: ConvergenceConfig
    steps: tuple[StepSpec, ...]
    dependencies: dag.DependencyGraph
    output: OutputConfig = field(default_factory=OutputConfig)
    warnings: tuple[str, ...] = ()

    def step(self, step_id: str) -> StepSpec:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise KeyError(step_id)

    def step_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.steps)


def effective_threshold(program: ResearchProgram, step_id: str) -> float:
    """Step threshold_override if present, else the global threshold."""
    step = program.step(step_id)  # KeyError -> caller's NotFound handling
    if step.threshold_override is not None:
        return step.threshold_override
    return program.convergence.global_threshold


# ---------------------------------------------------------------------------
# Parsing


def _load_yaml(text: str, base_line: int) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = base_line
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = base_line + mark.line
        raise ParseError(f"malformed YAML: {exc}", line=line) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError("expected a YAML mapping", line=base_line)
    return data


def _split_frontmatter(lines: list[str]) -> tuple[dict, int]:
    if not lines or lines[0].strip() != "---":
        raise ParseError("missing required section: frontmatter", line=1)
    for i in range(1, len(lines)):
        if lines[i].strip() == "---":
            return _load_yaml("\n".join(lines[1:i]), base_line=2), i + 1
    raise ParseError("unterminated frontmatter fence", line=1)


def _split_sections(lines: list[str], start: int) -> dict[str, tuple[int, list[str]]]:
    """Map level-2 heading name -> (1-based start line, body lines)."""
    sections: dict[str, tuple[int, list[str]]] = {}
    current: str | None = None
    body: list[str] = []
    body_start = start
    for i in range(start, len(lines)):
        line = lines[i]
        if line.startswith("## ") and not line.startswith("###"):
            if current is not None:
                sections[current] = (body_start, body)
            current = line[3:].strip()
            body = []
            body_start = i + 2
        elif current is not None:
            body.append(line)
    if current is not None:
        sections[current] = (body_start, body)
    return sections


def _fenced_blocks(body: list[str], base_line: int) -> list[tuple[int, str]]:
    """All fenced code blocks in a section, as (1-based start line, text)."""
    blocks = []
    in_fence = False
    buf: list[str] = []
    fence_start = 0
    for offset, line in enumerate(body):
        if line.strip().startswith("```"):
            if in_fence:
                blocks.append((fence_start, "\n".join(buf)))
                buf = []
                in_fence = False
            else:
                in_fence = True
                fence_start = base_line + offset + 1
        elif in_fence:
            buf.append(line)
    if in_fence:
        raise ParseError("unterminated code fence", line=fence_start)
    return blocks


def _section_yaml(sections, name: str, required: bool = True) -> dict:
    if name not in sections:
        if required:
            raise ParseError(f"missing required section: {name}")
        return {}
    base, body = sections[name]
    blocks = _fenced_blocks(body, base)
    if not blocks:
        if required:
            raise ParseError(f"section {name} has no configuration block", line=base)
        return {}
    return _load_yaml(blocks[0][1], base_line=blocks[0][0])


def _parse_frontmatter(data: dict) -> Frontmatter:
    return Frontmatter(
        title=str(data.get("title", "")),
        author=str(data.get("author", "")),
        tags=tuple(str(t) for t in data.get("tags") or ()),
        area=str(data.get("area", "")),
        version=int(data.get("version", 1)),
        parent_version=(
            int(data["parent_version"]) if data.get("parent_version") is not None else None
        ),
        generation_score=(
            float(data["generation_score"])
            if data.get("generation_score") is not None
            else None
        ),
        mutation_log=tuple(str(m) for m in data.get("mutation_log") or ()),
        cluster_prime=(
            int(data["cluster_prime"]) if data.get("cluster_prime") is not None else None
        ),
    )


def _parse_convergence(data: dict) -> ConvergenceConfig:
    defaults = ConvergenceConfig()
    return ConvergenceConfig(
        global_threshold=float(data.get("global_threshold", defaults.global_threshold)),
        max_iterations=int(data.get("max_iterations", defaults.max_iterations)),
        scoring_method=str(data.get("scoring_method", defaults.scoring_method)),
        metric_weight=float(data.get("metric_weight", defaults.metric_weight)),
        feedback_style=str(data.get("feedback_style", defaults.feedback_style)),
        timeout=float(data.get("timeout", defaults.timeout)),
        early_stop=bool(data.get("early_stop", defaults.early_stop)),
        retry_on_failure=int(data.get("retry_on_failure", defaults.retry_on_failure)),
    )


def _parse_metric(data: dict, step_id: str, violations: list[str]) -> MetricConfig | None:
    if not data:
        return None
    mtype = str(data.get("type", ""))
    if mtype not in METRIC_TYPES:
        violations.append(f"step {step_id}: metric type must be one of {METRIC_TYPES}")
        mtype = "minimize"
    return MetricConfig(
        type=mtype,
        extract=str(data.get("extract", "")),
        baseline=float(data.get("baseline", 0.0)),
        target=float(data.get("target", 0.0)),
        score_formula=(
            str(data["score_formula"]) if data.get("score_formula") is not None else None
        ),
    )


def _parse_step(data: dict, violations: list[str], warnings: list[str]) -> StepSpec:
    step_id = str(data.get("id", ""))
    metric = _parse_metric(data.get("metric") or {}, step_id, violations)
    if metric is not None and metric.baseline == metric.target and not metric.score_formula:
        warnings.append(
            f"step {step_id}: degenerate metric (baseline == target); "
            "score is 1 on exact match, else 0"
        )
    override = data.get("threshold_override")
    return StepSpec(
        id=step_id,
        name=str(data.get("name", step_id)),
        goal=str(data.get("goal", "")),
        depth=int(data.get("depth", 1)),
        accept_criteria=tuple(str(c) for c in data.get("accept_criteria") or ()),
        metric=metric,
        depends_on=tuple(str(d) for d in data.get("depends_on") or ()),
        context_from=tuple(str(c) for c in data.get("context_from") or ()),
        output_format=str(data.get("output_format", "markdown")),
        threshold_override=float(override) if override is not None else None,
        tools=tuple(str(t) for t in data.get("tools") or ()),
    )


def _validate(
    fm: Frontmatter,
    conv: ConvergenceConfig,
    steps: tuple[StepSpec, ...],
    graph: dag.DependencyGraph,
    violations: list[str],
) -> None:
    if fm.parent_version is not None and fm.parent_version >= fm.version:
        violations.append(
            f"parent_version {fm.parent_version} must be < version {fm.version}"
        )
    if not 0.0 <= conv.global_threshold <= 1.0:
        violations.append(f"global_threshold {conv.global_threshold} outside [0,1]")
    if not 0.0 <= conv.metric_weight <= 1.0:
        violations.append(f"metric_weight {conv.metric_weight} outside [0,1]")
    if conv.max_iterations < 1:
        violations.append("max_iterations must be >= 1")
    if conv.scoring_method not in SCORING_METHODS:
        violations.append(f"scoring_method must be one of {SCORING_METHODS}")
    if conv.feedback_style not in FEEDBACK_STYLES:
        violations.append(f"feedback_style must be one of {FEEDBACK_STYLES}")

    ids = [s.id for s in steps]
    seen = set()
    for sid in ids:
        if sid in seen:
            violations.append(f"duplicate step id: {sid}")
        seen.add(sid)
    known = set(ids)
    for s in steps:
        if not s.id:
            violations.append("step missing id")
        if not s.accept_criteria and s.metric is None:
            violations.append(f"step {s.id}: needs accept_criteria or a metric")
        if s.depth < 1:
            violations.append(f"step {s.id}: depth must be >= 1")
        if s.threshold_override is not None and not 0.0 <= s.threshold_override <= 1.0:
            violations.append(f"step {s.id}: threshold_override outside [0,1]")
        for dep in s.depends_on:
            if dep not in known:
                violations.append(f"step {s.id}: depends_on unknown step {dep}")
        for src in s.context_from:
            if src == s.id:
                violations.append(f"step {s.id}: context_from references itself")
            elif src not in known:
                violations.append(f"step {s.id}: context_from unknown step {src}")

    if graph.execution_mode not in EXECUTION_MODES:
        violations.append(f"execution_mode must be one of {EXECUTION_MODES}")
    report = dag.validate_dag(graph)
    if not report.acyclic:
        violations.append("dependency cycle: " + " -> ".join(report.cycle))
    elif graph.parallel_groups:
        try:
            dag.compute_phases(graph)
        except ValidationError as exc:
            violations.extend(exc.violations)


def parse_program(document: str) -> ResearchProgram:
    """Parse and fully validate a program.md document."""
    lines = document.split("\n")
    fm_data, body_start = _split_frontmatter(lines)
    sections = _split_sections(lines, body_start)

    if "Problem" not in sections:
        raise ParseError("missing required section: Problem")
    if "Steps" not in sections:
        raise ParseError("missing required section: Steps")

    violations: list[str] = []
    warnings: list[str] = []

    fm = _parse_frontmatter(fm_data)
    problem = "\n".join(sections["Problem"][1]).strip()
    conv = _parse_convergence(_section_yaml(sections, "Convergence"))

    steps_base, steps_body = sections["Steps"]
    step_blocks = _fenced_blocks(steps_body, steps_base)
    if not step_blocks:
        raise ParseError("section Steps has no step blocks", line=steps_base)
    steps = tuple(
        _parse_step(_load_yaml(text, base_line=start), violations, warnings)
        for start, text in step_blocks
    )

    deps_data = _section_yaml(sections, "Dependencies", required=False)
    extra_edges = []
    for entry in deps_data.get("edges") or ():
        parts = [p.strip() for p in str(entry).split("->")]
        if len(parts) != 2 or not all(parts):
            violations.append(f"malformed dependency edge: {entry!r}")
        else:
            extra_edges.append((parts[0], parts[1]))
    graph = dag.build_graph(
        steps,
        extra_edges=extra_edges,
        parallel_groups=tuple(
            frozenset(str(s) for s in group)
            for group in deps_data.get("parallel_groups") or ()
        ),
        execution_mode=str(deps_data.get("execution_mode", "phased")),
    )

    out_data = _section_yaml(sections, "Output", required=False)
    output = OutputConfig(
        format=str(out_data.get("format", "markdown")),
        include_audit_trail=bool(out_data.get("include_audit_trail", False)),
        export_formats=tuple(str(f) for f in out_data.get("export_formats") or ()),
    )

    _validate(fm, conv, steps, graph, violations)
    if violations:
        raise ValidationError(violations)

    return ResearchProgram(
        frontmatter=fm,
        problem=problem,
        convergence=conv,
        steps=steps,
        dependencies=graph,
        output=output,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Serialization


def _dump_yaml(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True).rstrip("\n")


def _clean(data: dict) -> dict:
    return {k: v for k, v in data.items() if v not in (None, [], (), "")}


def serialize_program(program: ResearchProgram) -> str:
    """Emit canonical program.md text; parse(serialize(p)) == p structurally."""
    fm = program.frontmatter
    out = io.StringIO()
    out.write("---\n")
    fm_data = _clean(
        {
            "title": fm.title,
            "author": fm.author,
            "tags": list(fm.tags),
            "area": fm.area,
            "version": fm.version,
            "parent_version": fm.parent_version,
            "generation_score": fm.generation_score,
            "cluster_prime": fm.cluster_prime,
        }
    )
    fm_data["mutation_log"] = list(fm.mutation_log)
    out.write(_dump_yaml(fm_data))
    out.write("\n---\n\n## Problem\n\n")
    out.write(program.problem)
    out.write("\n\n## Convergence\n\n```yaml\n")
    c = program.convergence
    out.write(
        _dump_yaml(
            {
                "global_threshold": c.global_threshold,
                "max_iterations": c.max_iterations,
                "scoring_method": c.scoring_method,
                "metric_weight": c.metric_weight,
                "feedback_style": c.feedback_style,
                "timeout": c.timeout,
                "early_stop": c.early_stop,
                "retry_on_failure": c.retry_on_failure,
            }
        )
    )
    out.write("\n```\n\n## Steps\n")
    for s in program.steps:
        out.write(f"\n### {s.id}: {s.name}\n\n```yaml\n")
        data = _clean(
            {
                "id": s.id,
                "name": s.name,
                "depth": s.depth,
                "goal": s.goal,
                "accept_criteria": list(s.accept_criteria),
                "depends_on": list(s.depends_on),
                "context_from": list(s.context_from),
                "output_format": s.output_format,
                "threshold_override": s.threshold_override,
                "tools": list(s.tools),
            }
        )
        if s.metric is not None:
            data["metric"] = _clean(
                {
                    "type": s.metric.type,
                    "extract": s.metric.extract,
                    "baseline": s.metric.baseline,
                    "target": s.metric.target,
                    "score_formula": s.metric.score_formula,
                }
            )
        out.write(_dump_yaml(data))
        out.write("\n```\n")
    out.write("\n## Dependencies\n\n```yaml\n")
    graph = program.dependencies
    derived = set(dag.derived_edges(program.steps))
    deps_data: dict = {"execution_mode": graph.execution_mode}
    extra = [f"{u} -> {v}" for (u, v) in graph.edges if (u, v) not in derived]
    if extra:
        deps_data["edges"] = extra
    if graph.parallel_groups:
        deps_data["parallel_groups"] = [sorted(g) for g in graph.parallel_groups]
    out.write(_dump_yaml(deps_data))
    out.write("\n```\n\n## Output\n\n```yaml\n")
    o = program.output
    out.write(
        _dump_yaml(
            {
                "format": o.format,
                "include_audit_trail": o.include_audit_trail,
                "export_formats": list(o.export_formats),
            }
        )
    )
    out.write("\n```\n")
    return out.getvalue()


def with_frontmatter(program: ResearchProgram, **changes) -> ResearchProgram:
    """Copy of the program with updated frontmatter fields."""
    return replace(program, frontmatter=replace(program.frontmatter, **changes))
