"""Multi-agent research orchestration with prime-power identities,
convergence loops, dual-metric scoring, event sourcing, and durable
pause/resume."""

__version__ = "0.1.0"

from .identity import (
    assign_identity,
    consensus_token,
    factorize_token,
    generate_pool,
    k_max,
    verify_identity,
)
from .program import ResearchProgram, parse_program, serialize_program
from .orchestrator import Orchestrator, RunState, run_program
from .resilience import query_status, resume_run

__all__ = [
    "Orchestrator",
    "ResearchProgram",
    "RunState",
    "assign_identity",
    "consensus_token",
    "factorize_token",
    "generate_pool",
    "k_max",
    "parse_program",
    "query_status",
    "resume_run",
    "run_program",
    "serialize_program",
    "verify_identity",
]
