"""Syllogistic reasoning data model: propositions, triads, rollout traces, logic trees.

Proposition grammar (keywords case-insensitive; parentheses may abut other tokens):

    expr  := "if" expr "then" expr | conj
    conj  := unary { "and" unary }
    unary := "not" unary | "(" expr ")" | atom
    atom  := [a-z0-9_]+

"if .. then" binds loosest, "and" tighter, "not" tightest; "and" associates to
the left and an "if" consequent extends as far right as possible.

Rollout traces use a line-oriented tagged format, one STEP line per triad:

    CASE: <id>                                                     (optional)
    STEP <k>: MAJOR: <expr> ; MINOR: <expr> ; CONCLUSION: <expr>
    ...
    ANSWER: <text>
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping

MAX_NESTING = 16

_ATOM_RE = re.compile(r"[a-z0-9_]+\Z")
_KEYWORDS = frozenset({"if", "then", "not", "and"})
_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


class ParseError(ValueError):
    """Malformed proposition or rollout text."""

    def __init__(self, message: str, *, position: int | None = None, line: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif position is not None:
            loc = f" (at character {position})"
        super().__init__(message + loc)
        self.position = position
        self.line = line


class DepthError(ParseError):
    """Nesting beyond the MAX_NESTING parser limit."""


class DanglingPremiseError(ValueError):
    def __init__(self, premise: "Proposition", step_index: int):
        super().__init__(
            f"premise '{render(premise)}' of step {step_index} is neither an "
            f"input fact nor an earlier conclusion"
        )
        self.premise = premise
        self.step_index = step_index


class CycleError(ValueError):
    """A conclusion syntactically equals one of its own transitive premises."""


class DuplicateConclusionError(ValueError):
    """A triad re-derives a proposition that is already a node of the tree."""


# ---------------------------------------------------------------------------
# Propositions
# ---------------------------------------------------------------------------


class Proposition:
    """Base class for propositional formulas. Instances are immutable and hashable."""

    __slots__ = ()


@dataclass(frozen=True)
class Atom(Proposition):
    name: str

    def __post_init__(self):
        if not _ATOM_RE.fullmatch(self.name):
            raise ValueError(f"atom name must match [a-z0-9_]+, got {self.name!r}")


@dataclass(frozen=True)
class Not(Proposition):
    inner: Proposition


@dataclass(frozen=True)
class Implies(Proposition):
    antecedent: Proposition
    consequent: Proposition


@dataclass(frozen=True)
class And(Proposition):
    left: Proposition
    right: Proposition


def atoms(prop: Proposition) -> frozenset[str]:
    """Set of atom names occurring in a proposition."""
    if isinstance(prop, Atom):
        return frozenset((prop.name,))
    if isinstance(prop, Not):
        return atoms(prop.inner)
    if isinstance(prop, Implies):
        return atoms(prop.antecedent) | atoms(prop.consequent)
    if isinstance(prop, And):
        return atoms(prop.left) | atoms(prop.right)
    raise TypeError(f"not a proposition: {prop!r}")


def depth(prop: Proposition) -> int:
    """Operator nesting depth; an atom has depth 1."""
    if isinstance(prop, Atom):
        return 1
    if isinstance(prop, Not):
        return 1 + depth(prop.inner)
    if isinstance(prop, Implies):
        return 1 + max(depth(prop.antecedent), depth(prop.consequent))
    if isinstance(prop, And):
        return 1 + max(depth(prop.left), depth(prop.right))
    raise TypeError(f"not a proposition: {prop!r}")


# Precedence levels used when rendering: higher binds tighter.
_LVL_IMPLIES, _LVL_AND, _LVL_UNARY = 0, 1, 2


def _level(prop: Proposition) -> int:
    if isinstance(prop, Implies):
        return _LVL_IMPLIES
    if isinstance(prop, And):
        return _LVL_AND
    return _LVL_UNARY


def render(prop: Proposition) -> str:
    """Canonical text for a proposition; parse_proposition(render(p)) == p."""
    if isinstance(prop, Atom):
        return prop.name
    if isinstance(prop, Not):
        inner = render(prop.inner)
        if _level(prop.inner) < _LVL_UNARY:
            inner = f"( {inner} )"
        return f"not {inner}"
    if isinstance(prop, And):
        left = render(prop.left)
        if _level(prop.left) < _LVL_AND:
            left = f"( {left} )"
        right = render(prop.right)
        # the parser associates "and" to the left, so a right And needs parens
        if _level(prop.right) <= _LVL_AND:
            right = f"( {right} )"
        return f"{left} and {right}"
    if isinstance(prop, Implies):
        return f"if {render(prop.antecedent)} then {render(prop.consequent)}"
    raise TypeError(f"not a proposition: {prop!r}")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = [(m.group(0), m.start()) for m in _TOKEN_RE.finditer(text)]
        self.pos = 0

    def peek(self) -> str | None:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos][0].lower()
        return None

    def next_position(self) -> int:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos][1]
        return len(self.text)

    def advance(self) -> str:
        tok = self.tokens[self.pos][0]
        self.pos += 1
        return tok

    def expect(self, keyword: str) -> None:
        got = self.peek()
        if got != keyword:
            found = "end of input" if got is None else f"'{got}'"
            raise ParseError(f"expected '{keyword}', found {found}", position=self.next_position())
        self.advance()

    def _check_depth(self, d: int) -> None:
        if d > MAX_NESTING:
            raise DepthError(f"nesting deeper than {MAX_NESTING}", position=self.next_position())

    def expr(self, d: int) -> Proposition:
        self._check_depth(d)
        if self.peek() == "if":
            self.advance()
            antecedent = self.expr(d + 1)
            self.expect("then")
            consequent = self.expr(d + 1)
            return Implies(antecedent, consequent)
        return self.conj(d)

    def conj(self, d: int) -> Proposition:
        left = self.unary(d)
        while self.peek() == "and":
            self.advance()
            d += 1
            self._check_depth(d)
            left = And(left, self.unary(d + 1))
        return left

    def unary(self, d: int) -> Proposition:
        self._check_depth(d)
        tok = self.peek()
        if tok == "not":
            self.advance()
            return Not(self.unary(d + 1))
        if tok == "(":
            self.advance()
            inner = self.expr(d + 1)
            self.expect(")")
            return inner
        if tok is None:
            raise ParseError("unexpected end of input, expected an atom, 'not', or '('",
                             position=self.next_position())
        if tok in _KEYWORDS or tok == ")":
            raise ParseError(f"expected an atom, 'not', or '(', found '{tok}'",
                             position=self.next_position())
        name = self.advance().lower()
        if not _ATOM_RE.fullmatch(name):
            raise ParseError(f"invalid atom {name!r}, atoms match [a-z0-9_]+",
                             position=self.tokens[self.pos - 1][1])
        return Atom(name)


def parse_proposition(text: str) -> Proposition:
    parser = _Parser(text)
    prop = parser.expr(1)
    if parser.peek() is not None:
        raise ParseError(f"unexpected trailing token '{parser.peek()}'",
                         position=parser.next_position())
    return prop


# ---------------------------------------------------------------------------
# Triads and rollout traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Triad:
    major: Proposition
    minor: Proposition
    conclusion: Proposition
    step_index: int

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError(f"step_index must be >= 0, got {self.step_index}")


@dataclass(frozen=True)
class ReasoningTrace:
    case_id: str
    triads: tuple[Triad, ...]
    final_answer: str

    def __post_init__(self):
        if len(self.triads) < 1:
            raise ValueError("a trace needs at least one triad")
        steps = [t.step_index for t in self.triads]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"step indices must be strictly increasing, got {steps}")
        if self.case_id != self.case_id.strip() or any(c.isspace() for c in self.case_id):
            raise ValueError(f"case_id may not contain whitespace: {self.case_id!r}")
        if "\n" in self.final_answer or self.final_answer != self.final_answer.strip():
            raise ValueError("final_answer must be a single stripped line")


_CASE_RE = re.compile(r"CASE:\s*(\S+)\s*\Z")
_STEP_RE = re.compile(r"STEP\s+(\d+)\s*:\s*MAJOR:([^;]*);\s*MINOR:([^;]*);\s*CONCLUSION:(.*)\Z")
_ANSWER_RE = re.compile(r"ANSWER:(.*)\Z")


def render_rollout(trace: ReasoningTrace) -> str:
    lines = []
    if trace.case_id:
        lines.append(f"CASE: {trace.case_id}")
    for t in trace.triads:
        lines.append(
            f"STEP {t.step_index}: MAJOR: {render(t.major)} ; "
            f"MINOR: {render(t.minor)} ; CONCLUSION: {render(t.conclusion)}"
        )
    lines.append(f"ANSWER: {trace.final_answer}")
    return "\n".join(lines) + "\n"


def _parse_one_rollout(lines: list[tuple[int, str]]) -> ReasoningTrace:
    case_id = ""
    i = 0
    if lines and _CASE_RE.fullmatch(lines[0][1]):
        case_id = _CASE_RE.fullmatch(lines[0][1]).group(1)
        i = 1
    triads: list[Triad] = []
    answer: str | None = None
    for lineno, text in lines[i:]:
        m = _ANSWER_RE.fullmatch(text)
        if m is not None:
            answer = m.group(1).strip()
            break
        m = _STEP_RE.fullmatch(text)
        if m is None:
            expected = "a 'STEP <k>: MAJOR: .. ; MINOR: .. ; CONCLUSION: ..' or 'ANSWER:' line"
            raise ParseError(f"expected {expected}, got {text!r}", line=lineno)
        step = int(m.group(1))
        if triads and step <= triads[-1].step_index:
            raise ParseError(
                f"step numbers must increase, got {step} after {triads[-1].step_index}",
                line=lineno,
            )
        try:
            triads.append(
                Triad(
                    major=parse_proposition(m.group(2)),
                    minor=parse_proposition(m.group(3)),
                    conclusion=parse_proposition(m.group(4)),
                    step_index=step,
                )
            )
        except ParseError as exc:
            raise ParseError(f"in step {step}: {exc}", line=lineno) from exc
    if answer is None:
        raise ParseError("rollout is missing its ANSWER line", line=lines[-1][0] if lines else 1)
    if not triads:
        raise ParseError("rollout has an ANSWER but no STEP blocks", line=lines[i][0] if lines[i:] else 1)
    return ReasoningTrace(case_id=case_id, triads=tuple(triads), final_answer=answer)


def _numbered_nonblank(text: str) -> list[tuple[int, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped:
            out.append((lineno, stripped))
    return out


def parse_rollout(text: str) -> ReasoningTrace:
    """Parse exactly one rollout; trailing non-blank content is an error."""
    lines = _numbered_nonblank(text)
    if not lines:
        raise ParseError("empty rollout text", line=1)
    answer_at = next((k for k, (_, t) in enumerate(lines) if _ANSWER_RE.fullmatch(t)), None)
    if answer_at is not None and answer_at + 1 < len(lines):
        raise ParseError("unexpected content after ANSWER line", line=lines[answer_at + 1][0])
    return _parse_one_rollout(lines)


def parse_rollout_stream(text: str) -> list[ReasoningTrace]:
    """Parse a concatenation of rollouts, each terminated by its ANSWER line."""
    lines = _numbered_nonblank(text)
    if not lines:
        raise ParseError("empty rollout text", line=1)
    traces = []
    block: list[tuple[int, str]] = []
    for item in lines:
        block.append(item)
        if _ANSWER_RE.fullmatch(item[1]):
            traces.append(_parse_one_rollout(block))
            block = []
    if block:
        raise ParseError("trailing rollout is missing its ANSWER line", line=block[-1][0])
    return traces


# ---------------------------------------------------------------------------
# Logic trees
# ---------------------------------------------------------------------------


class NodeKind(str, Enum):
    INPUT_FACT = "input_fact"
    DERIVED = "derived"
    ROOT = "root"


@dataclass(frozen=True)
class TreeEdge:
    step_index: int
    major: Proposition
    minor: Proposition
    conclusion: Proposition


@dataclass(frozen=True)
class LogicTree:
    nodes: tuple[tuple[Proposition, NodeKind], ...]
    edges: tuple[TreeEdge, ...]
    root: Proposition

    def kind_of(self, prop: Proposition) -> NodeKind:
        for node, kind in self.nodes:
            if node == prop:
                return kind
        raise KeyError(render(prop))


def build_tree(trace: ReasoningTrace, input_facts: Iterable[Proposition]) -> LogicTree:
    """Assemble a trace into a logic tree, checking premise provenance.

    Nodes are the propositions the trace actually touches: referenced input
    facts, plus one derived node per triad. Unused input facts are not nodes.
    """
    facts = frozenset(input_facts)
    order: list[Proposition] = []
    kinds: dict[Proposition, NodeKind] = {}
    closure: dict[Proposition, frozenset[Proposition]] = {}
    edges: list[TreeEdge] = []

    for triad in trace.triads:
        for premise in (triad.major, triad.minor):
            if premise in kinds:
                continue
            if premise not in facts:
                raise DanglingPremiseError(premise, triad.step_index)
            order.append(premise)
            kinds[premise] = NodeKind.INPUT_FACT
            closure[premise] = frozenset()
        above = (
            frozenset((triad.major, triad.minor))
            | closure[triad.major]
            | closure[triad.minor]
        )
        if triad.conclusion in above:
            raise CycleError(
                f"step {triad.step_index} concludes '{render(triad.conclusion)}', "
                f"which is one of its own transitive premises"
            )
        if triad.conclusion in kinds or triad.conclusion in facts:
            raise DuplicateConclusionError(
                f"step {triad.step_index} re-derives '{render(triad.conclusion)}'"
            )
        order.append(triad.conclusion)
        kinds[triad.conclusion] = NodeKind.DERIVED
        closure[triad.conclusion] = above
        edges.append(TreeEdge(triad.step_index, triad.major, triad.minor, triad.conclusion))

    root = trace.triads[-1].conclusion
    kinds[root] = NodeKind.ROOT
    nodes = tuple((p, kinds[p]) for p in order)
    return LogicTree(nodes=nodes, edges=tuple(edges), root=root)


# ---------------------------------------------------------------------------
# JSON and DOT serialization
# ---------------------------------------------------------------------------


def prop_to_json(prop: Proposition) -> dict:
    if isinstance(prop, Atom):
        return {"op": "atom", "name": prop.name}
    if isinstance(prop, Not):
        return {"op": "not", "inner": prop_to_json(prop.inner)}
    if isinstance(prop, Implies):
        return {
            "op": "implies",
            "antecedent": prop_to_json(prop.antecedent),
            "consequent": prop_to_json(prop.consequent),
        }
    if isinstance(prop, And):
        return {"op": "and", "left": prop_to_json(prop.left), "right": prop_to_json(prop.right)}
    raise TypeError(f"not a proposition: {prop!r}")


def prop_from_json(obj: Mapping) -> Proposition:
    op = obj["op"]
    if op == "atom":
        return Atom(obj["name"])
    if op == "not":
        return Not(prop_from_json(obj["inner"]))
    if op == "implies":
        return Implies(prop_from_json(obj["antecedent"]), prop_from_json(obj["consequent"]))
    if op == "and":
        return And(prop_from_json(obj["left"]), prop_from_json(obj["right"]))
    raise ValueError(f"unknown proposition op {op!r}")


def triad_to_json(triad: Triad) -> dict:
    return {
        "major": prop_to_json(triad.major),
        "minor": prop_to_json(triad.minor),
        "conclusion": prop_to_json(triad.conclusion),
        "step_index": triad.step_index,
    }


def triad_from_json(obj: Mapping) -> Triad:
    return Triad(
        major=prop_from_json(obj["major"]),
        minor=prop_from_json(obj["minor"]),
        conclusion=prop_from_json(obj["conclusion"]),
        step_index=int(obj["step_index"]),
    )


def trace_to_json(trace: ReasoningTrace) -> dict:
    return {
        "case_id": trace.case_id,
        "triads": [triad_to_json(t) for t in trace.triads],
        "final_answer": trace.final_answer,
    }


def trace_from_json(obj: Mapping) -> ReasoningTrace:
    return ReasoningTrace(
        case_id=obj["case_id"],
        triads=tuple(triad_from_json(t) for t in obj["triads"]),
        final_answer=obj["final_answer"],
    )


def tree_to_json(tree: LogicTree) -> dict:
    return {
        "nodes": [{"prop": prop_to_json(p), "kind": k.value} for p, k in tree.nodes],
        "edges": [
            {
                "step_index": e.step_index,
                "major": prop_to_json(e.major),
                "minor": prop_to_json(e.minor),
                "conclusion": prop_to_json(e.conclusion),
            }
            for e in tree.edges
        ],
        "root": prop_to_json(tree.root),
    }


def tree_from_json(obj: Mapping) -> LogicTree:
    nodes = tuple((prop_from_json(n["prop"]), NodeKind(n["kind"])) for n in obj["nodes"])
    edges = tuple(
        TreeEdge(
            step_index=int(e["step_index"]),
            major=prop_from_json(e["major"]),
            minor=prop_from_json(e["minor"]),
            conclusion=prop_from_json(e["conclusion"]),
        )
        for e in obj["edges"]
    )
    return LogicTree(nodes=nodes, edges=edges, root=prop_from_json(obj["root"]))


_DOT_SHAPES = {
    NodeKind.INPUT_FACT: "box",
    NodeKind.DERIVED: "ellipse",
    NodeKind.ROOT: "doublecircle",
}


def tree_to_dot(tree: LogicTree, scores: Mapping[int, float] | None = None) -> str:
    """Graphviz rendering: input facts as boxes, derived nodes as ellipses,
    the root double-circled, edges labeled with step index and score."""
    ids = {prop: f"n{i}" for i, (prop, _) in enumerate(tree.nodes)}
    lines = ["digraph logic_tree {"]
    for prop, kind in tree.nodes:
        label = render(prop).replace('"', '\\"')
        lines.append(f'  {ids[prop]} [label="{label}", shape={_DOT_SHAPES[kind]}];')
    for edge in tree.edges:
        label = f"step {edge.step_index}"
        if scores is not None and edge.step_index in scores:
            label += f" ({scores[edge.step_index]:g})"
        for premise in (edge.major, edge.minor):
            lines.append(f'  {ids[premise]} -> {ids[edge.conclusion]} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def dumps_json(obj: Mapping) -> str:
    """Stable JSON encoding used by every artifact this package writes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
