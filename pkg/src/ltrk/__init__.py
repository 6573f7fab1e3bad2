"""Desk-scale multimodal diagnosis sandbox with verifiable syllogistic reasoning."""

from .logic import (
    And,
    Atom,
    Implies,
    LogicTree,
    Not,
    Proposition,
    ReasoningTrace,
    Triad,
    build_tree,
    parse_proposition,
    parse_rollout,
    render,
    render_rollout,
)
from .verifier import VerifierScore, entails, is_contradictory, logic_loss, verify_triad

__version__ = "0.1.0"

__all__ = [
    "And",
    "Atom",
    "Implies",
    "LogicTree",
    "Not",
    "Proposition",
    "ReasoningTrace",
    "Triad",
    "VerifierScore",
    "build_tree",
    "entails",
    "is_contradictory",
    "logic_loss",
    "parse_proposition",
    "parse_rollout",
    "render",
    "render_rollout",
    "verify_triad",
    "__version__",
]
