"""Proposition grammar, rollout format, and logic tree construction."""

import pytest
from hypothesis import given, settings, strategies as st

from ltrk.logic import (
    And,
    Atom,
    CycleError,
    DanglingPremiseError,
    DepthError,
    DuplicateConclusionError,
    Implies,
    NodeKind,
    Not,
    ParseError,
    ReasoningTrace,
    Triad,
    atoms,
    build_tree,
    depth,
    parse_proposition,
    parse_rollout,
    parse_rollout_stream,
    prop_from_json,
    prop_to_json,
    render,
    render_rollout,
    trace_from_json,
    trace_to_json,
    tree_from_json,
    tree_to_dot,
    tree_to_json,
)

A, B, C = Atom("a"), Atom("b"), Atom("c")


# --- proposition parsing -----------------------------------------------------


def test_parse_implication():
    assert parse_proposition("if lesion then tumor") == Implies(Atom("lesion"), Atom("tumor"))


def test_parse_negation():
    assert parse_proposition("not a") == Not(A)


def test_and_binds_tighter_than_if_then():
    assert parse_proposition("if a and b then c") == Implies(And(A, B), C)
    assert parse_proposition("if a then b and c") == Implies(A, And(B, C))


def test_not_binds_tightest():
    assert parse_proposition("not a and b") == And(Not(A), B)
    assert parse_proposition("not not a") == Not(Not(A))


def test_and_associates_left():
    assert parse_proposition("a and b and c") == And(And(A, B), C)


def test_parentheses_override_precedence():
    assert parse_proposition("a and ( b and c )") == And(A, And(B, C))
    assert parse_proposition("not (a and b)") == Not(And(A, B))
    assert parse_proposition("(if a then b) and c") == And(Implies(A, B), C)


def test_nested_if_then():
    assert parse_proposition("if if a then b then c") == Implies(Implies(A, B), C)
    assert parse_proposition("if a then if b then c") == Implies(A, Implies(B, C))


def test_keywords_case_insensitive_and_atoms_lowercased():
    assert parse_proposition("IF Lesion THEN Tumor") == Implies(Atom("lesion"), Atom("tumor"))


def test_syntax_errors_carry_position():
    with pytest.raises(ParseError) as exc:
        parse_proposition("if a then")
    assert "then" not in str(exc.value) or "end of input" in str(exc.value)
    with pytest.raises(ParseError):
        parse_proposition("a b")
    with pytest.raises(ParseError):
        parse_proposition("and a")
    with pytest.raises(ParseError):
        parse_proposition("a and")
    with pytest.raises(ParseError):
        parse_proposition("( a")
    with pytest.raises(ParseError):
        parse_proposition("")
    with pytest.raises(ParseError):
        parse_proposition("le-sion")


def test_depth_limit():
    assert depth(parse_proposition("not " * 15 + "a")) == 16
    with pytest.raises(DepthError):
        parse_proposition("not " * 16 + "a")
    with pytest.raises(DepthError):
        parse_proposition(" and ".join(["a"] * 40))


def test_atom_constructor_rejects_bad_names():
    with pytest.raises(ValueError):
        Atom("")
    with pytest.raises(ValueError):
        Atom("Upper")
    with pytest.raises(ValueError):
        Atom("sp ace")


# --- property: render/parse round trip ---------------------------------------

_names = st.from_regex(r"[a-z0-9_]{1,6}", fullmatch=True)
_props = st.recursive(
    _names.map(Atom),
    lambda inner: st.one_of(
        inner.map(Not),
        st.tuples(inner, inner).map(lambda t: And(*t)),
        st.tuples(inner, inner).map(lambda t: Implies(*t)),
    ),
    max_leaves=12,
).filter(lambda p: depth(p) <= 16)


@given(_props)
def test_render_parse_round_trip(prop):
    assert parse_proposition(render(prop)) == prop


@given(_props)
def test_prop_json_round_trip(prop):
    assert prop_from_json(prop_to_json(prop)) == prop


# --- rollout format -----------------------------------------------------------

ROLLOUT_ONE = """\
STEP 0: MAJOR: if a then b ; MINOR: a ; CONCLUSION: b
ANSWER: flu
"""

ROLLOUT_TWO = """\
CASE: c42
STEP 1: MAJOR: a ; MINOR: b ; CONCLUSION: a and b
STEP 2: MAJOR: if a and b then c ; MINOR: a and b ; CONCLUSION: c
ANSWER: c
"""


def test_parse_rollout_single_step():
    trace = parse_rollout(ROLLOUT_ONE)
    assert len(trace.triads) == 1
    assert trace.triads[0] == Triad(Implies(A, B), A, B, 0)
    assert trace.final_answer == "flu"
    assert trace.case_id == ""


def test_parse_rollout_two_steps_ordered():
    trace = parse_rollout(ROLLOUT_TWO)
    assert trace.case_id == "c42"
    assert [t.step_index for t in trace.triads] == [1, 2]
    assert trace.triads[1].conclusion == C


def test_rollout_without_steps_is_error():
    with pytest.raises(ParseError):
        parse_rollout("ANSWER: yes\n")


def test_rollout_missing_answer_is_error():
    with pytest.raises(ParseError):
        parse_rollout("STEP 0: MAJOR: a ; MINOR: b ; CONCLUSION: a and b\n")


def test_rollout_missing_tag_is_error():
    with pytest.raises(ParseError) as exc:
        parse_rollout("STEP 0: MAJOR: a ; CONCLUSION: b\nANSWER: x\n")
    assert "line 1" in str(exc.value)


def test_rollout_non_monotone_steps_is_error():
    text = (
        "STEP 2: MAJOR: a ; MINOR: b ; CONCLUSION: a and b\n"
        "STEP 1: MAJOR: a ; MINOR: b ; CONCLUSION: b and a\n"
        "ANSWER: x\n"
    )
    with pytest.raises(ParseError):
        parse_rollout(text)


def test_rollout_trailing_content_is_error():
    with pytest.raises(ParseError):
        parse_rollout(ROLLOUT_ONE + "STEP 1: MAJOR: a ; MINOR: b ; CONCLUSION: a and b\n")


def test_parse_rollout_stream_splits_on_answer():
    traces = parse_rollout_stream(ROLLOUT_ONE + "\n" + ROLLOUT_TWO)
    assert len(traces) == 2
    assert traces[1].case_id == "c42"


_triads_for_trace = st.lists(st.tuples(_props, _props, _props), min_size=1, max_size=4)


@st.composite
def _traces(draw):
    triples = draw(_triads_for_trace)
    start = draw(st.integers(min_value=0, max_value=3))
    triads = []
    k = start
    for major, minor, concl in triples:
        triads.append(Triad(major, minor, concl, k))
        k += draw(st.integers(min_value=1, max_value=2))
    answer = draw(st.from_regex(r"[a-z0-9_ ]{0,12}", fullmatch=True)).strip()
    case_id = draw(st.one_of(st.just(""), st.from_regex(r"[a-z0-9_]{1,8}", fullmatch=True)))
    return ReasoningTrace(case_id=case_id, triads=tuple(triads), final_answer=answer)


@given(_traces())
@settings(max_examples=60)
def test_rollout_round_trip(trace):
    assert parse_rollout(render_rollout(trace)) == trace


@given(_traces())
@settings(max_examples=30)
def test_trace_json_round_trip(trace):
    assert trace_from_json(trace_to_json(trace)) == trace


def test_trace_requires_strictly_increasing_steps():
    with pytest.raises(ValueError):
        ReasoningTrace("x", (Triad(A, B, C, 1), Triad(A, B, C, 1)), "y")
    with pytest.raises(ValueError):
        ReasoningTrace("x", (), "y")


# --- logic trees ---------------------------------------------------------------


def test_smallest_legal_tree():
    trace = ReasoningTrace("t", (Triad(Implies(A, B), A, B, 0),), "b")
    tree = build_tree(trace, {Implies(A, B), A})
    kinds = dict(tree.nodes)
    assert kinds[Implies(A, B)] is NodeKind.INPUT_FACT
    assert kinds[A] is NodeKind.INPUT_FACT
    assert kinds[B] is NodeKind.ROOT
    assert len(tree.nodes) == 3
    assert len(tree.edges) == 1
    assert tree.root == B


def test_chained_tree_depth_two():
    t0 = Triad(A, B, And(A, B), 0)
    t1 = Triad(Implies(And(A, B), C), And(A, B), C, 1)
    trace = ReasoningTrace("t", (t0, t1), "c")
    tree = build_tree(trace, {A, B, Implies(And(A, B), C)})
    kinds = dict(tree.nodes)
    assert kinds[And(A, B)] is NodeKind.DERIVED
    assert tree.root == C
    assert kinds[C] is NodeKind.ROOT


def test_dangling_premise_raises():
    trace = ReasoningTrace("t", (Triad(Implies(A, B), A, B, 0),), "b")
    with pytest.raises(DanglingPremiseError) as exc:
        build_tree(trace, {A})
    assert exc.value.step_index == 0
    assert exc.value.premise == Implies(A, B)


def test_cycle_raises():
    t0 = Triad(Implies(A, B), A, B, 0)
    t1 = Triad(Implies(B, A), B, A, 1)
    trace = ReasoningTrace("t", (t0, t1), "a")
    with pytest.raises(CycleError):
        build_tree(trace, {Implies(A, B), A, Implies(B, A)})


def test_duplicate_conclusion_raises():
    t0 = Triad(Implies(A, B), A, B, 0)
    t1 = Triad(Implies(C, B), C, B, 1)
    trace = ReasoningTrace("t", (t0, t1), "b")
    with pytest.raises(DuplicateConclusionError):
        build_tree(trace, {Implies(A, B), A, Implies(C, B), C})


def test_unused_facts_are_not_nodes():
    trace = ReasoningTrace("t", (Triad(Implies(A, B), A, B, 0),), "b")
    tree = build_tree(trace, {Implies(A, B), A, C, Atom("unused")})
    assert all(prop != C for prop, _ in tree.nodes)


@st.composite
def _valid_chains(draw):
    """Random traces where every premise is a fact or an earlier conclusion."""
    n_facts = draw(st.integers(min_value=2, max_value=4))
    facts = [Atom(f"f{i}") for i in range(n_facts)]
    available = list(facts)
    triads = []
    n_steps = draw(st.integers(min_value=1, max_value=4))
    for k in range(n_steps):
        major = draw(st.sampled_from(available))
        minor = draw(st.sampled_from(available))
        conclusion = Atom(f"d{k}")
        triads.append(Triad(major, minor, conclusion, k))
        available.append(conclusion)
    return ReasoningTrace("t", tuple(triads), "x"), frozenset(facts)


@given(_valid_chains())
@settings(max_examples=60)
def test_tree_invariants_on_random_valid_traces(case):
    trace, facts = case
    tree = build_tree(trace, facts)
    derived = [p for p, k in tree.nodes if k in (NodeKind.DERIVED, NodeKind.ROOT)]
    assert len(derived) == len(trace.triads)
    assert len(set(derived)) == len(derived)
    # each derived node is the conclusion of exactly one triad
    for prop in derived:
        assert sum(1 for e in tree.edges if e.conclusion == prop) == 1
    assert tree.root == trace.triads[-1].conclusion
    # acyclic: conclusions only reference strictly earlier nodes
    seen = set(p for p, k in tree.nodes if k is NodeKind.INPUT_FACT)
    for edge in tree.edges:
        assert edge.major in seen and edge.minor in seen
        seen.add(edge.conclusion)


def test_tree_json_round_trip():
    trace = parse_rollout(ROLLOUT_TWO)
    tree = build_tree(trace, {A, B, Implies(And(A, B), C)})
    assert tree_from_json(tree_to_json(tree)) == tree


def test_dot_export_shapes_and_labels():
    trace = parse_rollout(ROLLOUT_ONE)
    tree = build_tree(trace, {Implies(A, B), A})
    dot = tree_to_dot(tree, scores={0: 1.0})
    assert dot.startswith("digraph")
    assert "shape=box" in dot
    assert "shape=doublecircle" in dot
    assert "step 0 (1)" in dot
    assert dot.count("->") == 2


def test_atoms_and_depth_helpers():
    prop = Implies(And(A, Not(B)), C)
    assert atoms(prop) == frozenset({"a", "b", "c"})
    assert depth(prop) == 4
    assert depth(A) == 1
