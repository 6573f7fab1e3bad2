"""Rule-based triad verification backed by exact truth-table entailment.

Truth tables are packed into Python integers: bit j of a table is the value of
the formula under assignment j, where bit i of j is the value of atom i. This
keeps enumeration over all 2^n assignments exact and fast up to MAX_ATOMS.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable

from .logic import And, Atom, Implies, Not, Proposition, ReasoningTrace, Triad, atoms

MAX_ATOMS = 20


class TooManyAtomsError(ValueError):
    def __init__(self, count: int):
        super().__init__(f"{count} distinct atoms exceed the {MAX_ATOMS}-atom enumeration limit")
        self.count = count


class InferenceRule(Enum):
    MODUS_PONENS = "modus_ponens"
    MODUS_TOLLENS = "modus_tollens"
    DIRECT_ENTAILMENT = "direct_entailment"
    WEAK_INFERENCE = "weak_inference"
    CONTRADICTION = "contradiction"
    NON_SEQUITUR = "non_sequitur"


_SCORE_BY_RULE = {
    InferenceRule.MODUS_PONENS: 1.0,
    InferenceRule.MODUS_TOLLENS: 1.0,
    InferenceRule.DIRECT_ENTAILMENT: 1.0,
    InferenceRule.WEAK_INFERENCE: 0.5,
    InferenceRule.CONTRADICTION: 0.0,
    InferenceRule.NON_SEQUITUR: 0.0,
}


@dataclass(frozen=True)
class VerifierScore:
    value: float
    rule_fired: InferenceRule

    def __post_init__(self):
        if _SCORE_BY_RULE[self.rule_fired] != self.value:
            raise ValueError(f"{self.rule_fired} must score {_SCORE_BY_RULE[self.rule_fired]}")


@lru_cache(maxsize=None)
def _atom_column(i: int, n: int) -> int:
    """Truth column of atom i over all 2^n assignments, packed into an int."""
    block = (1 << (1 << i)) - 1
    col = block << (1 << i)
    width = 1 << (i + 1)
    total = 1 << n
    while width < total:
        col |= col << width
        width *= 2
    return col


def _table(prop: Proposition, index: dict[str, int], n: int, full: int) -> int:
    if isinstance(prop, Atom):
        return _atom_column(index[prop.name], n)
    if isinstance(prop, Not):
        return full ^ _table(prop.inner, index, n, full)
    if isinstance(prop, And):
        return _table(prop.left, index, n, full) & _table(prop.right, index, n, full)
    if isinstance(prop, Implies):
        a = _table(prop.antecedent, index, n, full)
        c = _table(prop.consequent, index, n, full)
        return (full ^ a) | c
    raise TypeError(f"not a proposition: {prop!r}")


def _atom_index(props: Iterable[Proposition]) -> tuple[dict[str, int], int, int]:
    names = sorted(set().union(*(atoms(p) for p in props)) if props else set())
    if len(names) > MAX_ATOMS:
        raise TooManyAtomsError(len(names))
    n = max(len(names), 1)
    full = (1 << (1 << n)) - 1
    return {name: i for i, name in enumerate(names)}, n, full


def entails(premises: Iterable[Proposition], conclusion: Proposition) -> bool:
    """True iff every assignment satisfying all premises satisfies the conclusion."""
    premises = tuple(premises)
    index, n, full = _atom_index(premises + (conclusion,))
    sat = full
    for p in premises:
        sat &= _table(p, index, n, full)
    return sat & (full ^ _table(conclusion, index, n, full)) == 0


def is_contradictory(props: Iterable[Proposition]) -> bool:
    """True iff no assignment satisfies all propositions simultaneously."""
    props = tuple(props)
    if not props:
        return False
    index, n, full = _atom_index(props)
    sat = full
    for p in props:
        sat &= _table(p, index, n, full)
    return sat == 0


def _matches_modus_ponens(x: Proposition, y: Proposition, conclusion: Proposition) -> bool:
    return isinstance(x, Implies) and y == x.antecedent and conclusion == x.consequent


def _matches_modus_tollens(x: Proposition, y: Proposition, conclusion: Proposition) -> bool:
    return isinstance(x, Implies) and y == Not(x.consequent) and conclusion == Not(x.antecedent)


def _matches_affirmed_consequent(x: Proposition, y: Proposition, conclusion: Proposition) -> bool:
    return isinstance(x, Implies) and y == x.consequent and conclusion == x.antecedent


def _matches_denied_antecedent(x: Proposition, y: Proposition, conclusion: Proposition) -> bool:
    return isinstance(x, Implies) and y == Not(x.antecedent) and conclusion == Not(x.consequent)


def _either_order(pattern, major, minor, conclusion) -> bool:
    return pattern(major, minor, conclusion) or pattern(minor, major, conclusion)


def verify_triad(triad: Triad) -> VerifierScore:
    """Classify one reasoning step.

    Order of checks (first match wins): contradictory premises or a conclusion
    contradicting them score 0; entailed conclusions score 1 with the inference
    pattern named when one matches; consistent-but-unentailed conclusions score
    0.5 when they fit a recognized defeasible pattern or share an atom with
    each premise; anything else is a non sequitur at 0. The classification is
    symmetric in the two premises.
    """
    major, minor, conclusion = triad.major, triad.minor, triad.conclusion
    premises = (major, minor)
    if is_contradictory(premises) or is_contradictory(premises + (conclusion,)):
        return VerifierScore(0.0, InferenceRule.CONTRADICTION)
    if entails(premises, conclusion):
        if _either_order(_matches_modus_ponens, major, minor, conclusion):
            return VerifierScore(1.0, InferenceRule.MODUS_PONENS)
        if _either_order(_matches_modus_tollens, major, minor, conclusion):
            return VerifierScore(1.0, InferenceRule.MODUS_TOLLENS)
        return VerifierScore(1.0, InferenceRule.DIRECT_ENTAILMENT)
    defeasible = _either_order(_matches_affirmed_consequent, major, minor, conclusion) or _either_order(
        _matches_denied_antecedent, major, minor, conclusion
    )
    concl_atoms = atoms(conclusion)
    shares_both = bool(concl_atoms & atoms(major)) and bool(concl_atoms & atoms(minor))
    if defeasible or shares_both:
        return VerifierScore(0.5, InferenceRule.WEAK_INFERENCE)
    return VerifierScore(0.0, InferenceRule.NON_SEQUITUR)


def logic_loss(trace: ReasoningTrace) -> float:
    """Mean shortfall from a perfect verifier score, in [0, 1]."""
    scores = [verify_triad(t).value for t in trace.triads]
    return sum(1.0 - s for s in scores) / len(scores)
