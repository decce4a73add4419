"""Outer-loop meta-optimization: analyze a run's convergence report,
classify steps, and emit a mutated next-generation program with lineage
frontmatter. The seed program is copied aside once and never rewritten,
so every optimization trajectory stays reproducible from generation 1.

The analyzer here is deterministic and rule-based; an LLM may propose
mutations through the same interface, but any proposal that fails full
program validation is rejected.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace

from .program import (
    ResearchProgram,
    StepSpec,
    effective_threshold,
    parse_program,
    serialize_program,
    with_frontmatter,
)
from . import dag
from .resilience import write_json

ITERATION_PENALTY = 0.1  # weight on mean iterations in the overall score


@dataclass(frozen=True)
class StepReport:
    step_id: str
    final_score: float
    iterations: int
    status: str  # converged | force_accepted


@dataclass(frozen=True)
class ConvergenceReport:
    steps: tuple[StepReport, ...]

    @property
    def mean_score(self) -> float:
        if not self.steps:
            return 0.0
        return sum(s.final_score for s in self.steps) / len(self.steps)

    @property
    def mean_iterations(self) -> float:
        if not self.steps:
            return 0.0
        return sum(s.iterations for s in self.steps) / len(self.steps)


def report_from_run(run_state) -> ConvergenceReport:
    rows = []
    for sid, rec in run_state.steps.items():
        if rec.state in ("converged", "force_accepted"):
            iterations = len(rec.iterations)
            if not iterations and rec.identity is not None:
                iterations = rec.identity.depth  # loaded on resume
            rows.append(
                StepReport(
                    step_id=sid,
                    final_score=rec.final_score,
                    iterations=iterations,
                    status=rec.state,
                )
            )
    return ConvergenceReport(steps=tuple(rows))


def overall_score(report: ConvergenceReport) -> float:
    """Efficiency-weighted score: mean score damped by mean iterations.

    Strictly decreasing in mean iterations, so a program cannot game the
    metric by iterating its way to high raw scores.
    """
    return report.mean_score / (1.0 + ITERATION_PENALTY * report.mean_iterations)


@dataclass(frozen=True)
class DiagnosisThresholds:
    slow_fraction: float = 0.8  # iterations >= fraction of max_iterations


@dataclass(frozen=True)
class StepDiagnosis:
    step_id: str
    klass: str  # slow_converging | over_easy | force_accepted | nominal
    suggested: str  # split | refine_criteria | add_context_from | raise_threshold | relax_criteria | restructure


def diagnose(
    report: ConvergenceReport,
    max_iterations: int,
    thresholds: DiagnosisThresholds | None = None,
) -> list[StepDiagnosis]:
    th = thresholds or DiagnosisThresholds()
    out = []
    for row in report.steps:
        if row.status == "force_accepted":
            out.append(StepDiagnosis(row.step_id, "force_accepted", "relax_criteria"))
        elif row.iterations >= th.slow_fraction * max_iterations:
            out.append(StepDiagnosis(row.step_id, "slow_converging", "split"))
        elif row.iterations <= 1:
            out.append(StepDiagnosis(row.step_id, "over_easy", "raise_threshold"))
        else:
            out.append(StepDiagnosis(row.step_id, "nominal", "refine_criteria"))
    return out


@dataclass(frozen=True)
class MutationPolicy:
    threshold_increment: float = 0.1
    threshold_decrement: float = 0.1
    threshold_floor_margin: float = 0.2  # floor = global threshold - margin


def _raise_threshold(program: ResearchProgram, step: StepSpec, policy: MutationPolicy):
    current = effective_threshold(program, step.id)
    new = min(1.0, round(current + policy.threshold_increment, 6))
    mutated = replace(step, threshold_override=new)
    return mutated, f"Raised threshold for {step.id} to {new:.2f}"


def _lower_threshold(program: ResearchProgram, step: StepSpec, policy: MutationPolicy):
    floor = max(0.0, program.convergence.global_threshold - policy.threshold_floor_margin)
    current = effective_threshold(program, step.id)
    new = max(floor, round(current - policy.threshold_decrement, 6))
    mutated = replace(step, threshold_override=new)
    return mutated, f"Lowered threshold for {step.id} to {new:.2f}"


def _split_step(step: StepSpec) -> tuple[list[StepSpec], str]:
    half = (len(step.accept_criteria) + 1) // 2
    first = replace(
        step,
        id=f"{step.id}a",
        name=f"{step.name} (part 1)",
        accept_criteria=step.accept_criteria[:half],
    )
    second = replace(
        step,
        id=f"{step.id}b",
        name=f"{step.name} (part 2)",
        accept_criteria=step.accept_criteria[half:],
        depends_on=(first.id,),
        context_from=(first.id,),
    )
    return [first, second], f"Split {step.id} into sub-steps"


def _rewire_after_split(steps: list[StepSpec], old_id: str, new_last: str) -> list[StepSpec]:
    rewired = []
    for s in steps:
        depends = tuple(new_last if d == old_id else d for d in s.depends_on)
        ctx = tuple(new_last if c == old_id else c for c in s.context_from)
        rewired.append(replace(s, depends_on=depends, context_from=ctx))
    return rewired


def _add_context(program: ResearchProgram, step: StepSpec):
    # Pull context from the dependencies of this step's dependencies.
    grandparents = []
    for dep in step.depends_on:
        grandparents.extend(program.step(dep).depends_on)
    fresh = [g for g in grandparents if g not in step.context_from and g != step.id]
    if not fresh:
        return None
    mutated = replace(step, context_from=step.context_from + (fresh[0],))
    return mutated, f"Added context_from: {fresh[0]} to {step.id}"


def mutate_program(
    program: ResearchProgram,
    diagnoses: list[StepDiagnosis],
    policy: MutationPolicy | None = None,
    generation_score: float | None = None,
) -> ResearchProgram:
    """Apply structural mutations per diagnosis and bump the lineage.

    Mutations that would produce an invalid program are rejected, and
    the next policy option is tried. With no actionable diagnoses the
    program is returned unchanged (no version bump).
    """
    policy = policy or MutationPolicy()
    steps = list(program.steps)
    log: list[str] = []

    for diag in diagnoses:
        if diag.klass == "nominal":
            continue
        try:
            idx = next(i for i, s in enumerate(steps) if s.id == diag.step_id)
        except StopIteration:
            continue
        step = steps[idx]
        options = []
        if diag.klass == "over_easy":
            mutated_step, entry = _raise_threshold(program, step, policy)
            options.append(([mutated_step], entry))
        elif diag.klass == "slow_converging":
            added = _add_context(program, step)
            if added is not None:
                options.append(([added[0]], added[1]))
            if len(step.accept_criteria) >= 2:
                options.append(_split_step(step))
        elif diag.klass == "force_accepted":
            mutated_step, entry = _lower_threshold(program, step, policy)
            options.append(([mutated_step], entry))
        for replacement, entry in options:
            candidate = steps[:idx] + replacement + steps[idx + 1 :]
            if len(replacement) > 1:
                candidate = _rewire_after_split(candidate, step.id, replacement[-1].id)
            trial = _rebuild(program, candidate, program.frontmatter.mutation_log)
            try:
                parse_program(serialize_program(trial))
            except Exception:
                continue  # invalid mutation: rejected, try the next option
            steps = candidate
            log.append(entry)
            break

    if not log:
        return program

    mutated = _rebuild(program, steps, program.frontmatter.mutation_log + tuple(log))
    mutated = with_frontmatter(
        mutated,
        version=program.frontmatter.version + 1,
        parent_version=program.frontmatter.version,
        generation_score=generation_score,
    )
    # Re-validation through the full parser is the acceptance gate for
    # any mutation batch.
    return parse_program(serialize_program(mutated))


def _rebuild(program: ResearchProgram, steps: list[StepSpec], mutation_log) -> ResearchProgram:
    graph = dag.build_graph(
        steps,
        execution_mode=program.dependencies.execution_mode,
    )
    return replace(
        with_frontmatter(program, mutation_log=tuple(mutation_log)),
        steps=tuple(steps),
        dependencies=graph,
        warnings=(),
    )


@dataclass
class GenerationResult:
    version: int
    program: ResearchProgram
    report: ConvergenceReport
    score: float


SEED_FILENAME = "program_v1_seed.md"


def run_generations(
    seed: ResearchProgram,
    generations: int,
    runner,
    out_dir: str,
    policy: MutationPolicy | None = None,
    thresholds: DiagnosisThresholds | None = None,
) -> list[GenerationResult]:
    """Run the outer generation cycle: execute, analyze, mutate, repeat.

    ``runner`` is a callable(program, generation_index) -> ConvergenceReport.
    Each program version lands beside the untouched seed copy.
    """
    if generations < 1:
        raise ValueError(f"generations must be >= 1, got {generations}")
    os.makedirs(out_dir, exist_ok=True)
    seed_path = os.path.join(out_dir, SEED_FILENAME)
    if not os.path.exists(seed_path):
        with open(seed_path, "w", encoding="utf-8") as fh:
            fh.write(serialize_program(seed))

    lineage: list[GenerationResult] = []
    program = seed
    for gen in range(1, generations + 1):
        version = program.frontmatter.version
        with open(
            os.path.join(out_dir, f"program_v{version}.md"), "w", encoding="utf-8"
        ) as fh:
            fh.write(serialize_program(program))
        report = runner(program, gen)
        score = overall_score(report)
        lineage.append(
            GenerationResult(version=version, program=program, report=report, score=score)
        )
        if gen < generations:
            diagnoses = diagnose(
                report, program.convergence.max_iterations, thresholds
            )
            mutated = mutate_program(
                program, diagnoses, policy, generation_score=round(score, 6)
            )
            if mutated is program:
                # Nothing to mutate; keep running the same version.
                continue
            program = mutated

    write_json(
        os.path.join(out_dir, "lineage.json"),
        {
            "generations": [
                {
                    "version": g.version,
                    "overall_score": g.score,
                    "mean_score": g.report.mean_score,
                    "mean_iterations": g.report.mean_iterations,
                }
                for g in lineage
            ]
        },
    )
    return lineage


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
