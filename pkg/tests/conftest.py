"""Shared builders for program documents and provider doubles."""

import textwrap

import pytest

from primeflow.program import parse_program


def program_text(
    steps,
    threshold=0.8,
    max_iterations=5,
    scoring_method="rubric",
    execution_mode="sequential",
    extra_frontmatter="",
    feedback_style="directive",
    include_audit_trail=False,
):
    """Render a minimal valid program document.

    ``steps`` is a list of dicts; each needs at least an ``id``. YAML for
    each step block is generated field by field so tests stay readable.
    """
    lines = [
        "---",
        "title: Test program",
        "version: 1",
    ]
    if extra_frontmatter:
        lines.append(extra_frontmatter.strip())
    lines += [
        "---",
        "",
        "## Problem",
        "",
        "A synthetic research question used by the test suite.",
        "",
        "## Convergence",
        "",
        "```yaml",
        f"global_threshold: {threshold}",
        f"max_iterations: {max_iterations}",
        f"scoring_method: {scoring_method}",
        f"feedback_style: {feedback_style}",
        "```",
        "",
        "## Steps",
    ]
    for s in steps:
        sid = s["id"]
        name = s.get("name", f"step {sid}")
        lines += ["", f"### {sid}: {name}", "", "```yaml", f"id: {sid}", f"name: {name}"]
        lines.append(f"goal: {s.get('goal', 'Do the work for ' + sid)}")
        criteria = s.get("accept_criteria", ["Is complete", "Is correct"])
        if criteria:
            lines.append("accept_criteria:")
            lines += [f"  - {c}" for c in criteria]
        for key in ("depends_on", "context_from", "tools"):
            if s.get(key):
                lines.append(f"{key}: [{', '.join(s[key])}]")
        if s.get("threshold_override") is not None:
            lines.append(f"threshold_override: {s['threshold_override']}")
        if s.get("metric"):
            m = s["metric"]
            lines.append("metric:")
            for k, v in m.items():
                lines.append(f"  {k}: {v}")
        lines += ["```"]
    lines += [
        "",
        "## Dependencies",
        "",
        "```yaml",
        f"execution_mode: {execution_mode}",
        "```",
        "",
        "## Output",
        "",
        "```yaml",
        "format: markdown",
        f"include_audit_trail: {'true' if include_audit_trail else 'false'}",
        "```",
        "",
    ]
    return "\n".join(lines)


def make_program(steps, **kwargs):
    return parse_program(program_text(steps, **kwargs))


# Substantive step content: long enough to pass the resume loader's
# minimum-substance gate and free of error-shape phrasing.
SUBSTANTIVE = textwrap.dedent(
    """\
    Findings for this step. The survey covered three distinct families of
    approaches, compared their assumptions side by side, and identified
    which constraints dominate in practice. Sources are cited inline and
    the summary table makes the trade-offs explicit for the next step.
    """
)

assert len(SUBSTANTIVE) >= 200


@pytest.fixture
def two_step_program():
    return make_program(
        [
            {"id": "s1"},
            {"id": "s2", "depends_on": ["s1"], "context_from": ["s1"]},
        ]
    )
