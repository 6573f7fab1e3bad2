"""Synthetic diagnostic world: a hidden rule base over findings and diagnoses.

Each diagnosis owns one exclusive visual finding; diagnoses are paired to share
a text finding, so telling paired diagnoses apart requires the visual channel.
A diagnosis is reached either directly (vis and txt -> dx) or through one
intermediate (vis and txt -> mid -> dx). Distractor rules concluding inert
intermediates pad the rule base. Cases back-chain from a uniformly drawn
target diagnosis; slices are finding prototypes plus Gaussian noise, tokens
are the text findings' token ids, and the gold trace is the forward-chaining
derivation rendered as triads.

With a tight atom budget (n_atoms < n_classes + ceil(n_classes/2)) the world
degrades to one exclusive finding per diagnosis with alternating modality, and
cases pad the missing modality with a background slice or the reserved token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .logic import (
    And,
    Atom,
    Implies,
    Proposition,
    ReasoningTrace,
    Triad,
    parse_proposition,
    render,
    trace_from_json,
    trace_to_json,
)
from .model import CaseInput

NONE_TOKEN = 0
_RETRY_BUDGET = 5


class UnsatisfiableWorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class GoldChain:
    findings: tuple[str, ...]
    rule_indices: tuple[int, ...]


@dataclass
class SyntheticWorld:
    atoms: tuple[str, ...]
    rules: tuple[Implies, ...]
    diagnoses: tuple[str, ...]
    finding_to_visual: dict[str, np.ndarray]
    finding_to_tokens: dict[str, tuple[int, ...]]
    noise_sigma: float
    atom_tokens: dict[str, int]
    gold: dict[str, GoldChain]
    seed: int

    @property
    def vocab_size(self) -> int:
        return 1 + len(self.atom_tokens)

    @property
    def visual_dim(self) -> int:
        return next(iter(self.finding_to_visual.values())).shape[0]

    def rule_props(self) -> frozenset[Proposition]:
        return frozenset(self.rules)


@dataclass(frozen=True)
class SyntheticCase:
    case_id: str
    input: CaseInput
    active_findings: frozenset[Proposition]
    label: int
    gold_trace: ReasoningTrace


def _conjunction(names: Sequence[str]) -> Proposition:
    prop: Proposition = Atom(names[0])
    for name in names[1:]:
        prop = And(prop, Atom(name))
    return prop


def _conj_atoms(prop: Proposition) -> frozenset[str] | None:
    """Atom names of a pure conjunction of atoms, None for anything else."""
    if isinstance(prop, Atom):
        return frozenset((prop.name,))
    if isinstance(prop, And):
        left, right = _conj_atoms(prop.left), _conj_atoms(prop.right)
        if left is None or right is None:
            return None
        return left | right
    return None


def apply_rules(world: SyntheticWorld, findings: Iterable[Proposition]) -> frozenset[str]:
    """Forward-chain the rule base to a fixed point; return derivable diagnoses."""
    known: set[str] = set()
    for prop in findings:
        names = _conj_atoms(prop)
        if names:
            known.update(names)
    changed = True
    while changed:
        changed = False
        for rule in world.rules:
            ante = _conj_atoms(rule.antecedent)
            if ante is None or not ante <= known:
                continue
            cons = _conj_atoms(rule.consequent)
            if cons and not cons <= known:
                known.update(cons)
                changed = True
    return frozenset(name for name in world.diagnoses if name in known)


def _rule_graph_acyclic(rules: Sequence[Implies]) -> bool:
    edges: dict[str, set[str]] = {}
    for rule in rules:
        ante = _conj_atoms(rule.antecedent) or frozenset()
        cons = _conj_atoms(rule.consequent) or frozenset()
        for a in ante:
            edges.setdefault(a, set()).update(cons)
    state: dict[str, int] = {}

    def visit(node: str) -> bool:
        mark = state.get(node)
        if mark == 1:
            return True
        if mark == 0:
            return False
        state[node] = 0
        ok = all(visit(nxt) for nxt in edges.get(node, ()))
        state[node] = 1
        return ok

    return all(visit(node) for node in list(edges))


def generate_world(seed: int, n_atoms: int = 12, n_rules: int = 8, n_classes: int = 4,
                   visual_dim: int = 16, noise_sigma: float = 0.1) -> SyntheticWorld:
    """Deterministically build a world; resample on the (unexpected) event that
    validation fails, up to a small retry budget."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 diagnoses, got {n_classes}")
    if n_atoms < n_classes:
        raise ConfigError(f"n_atoms {n_atoms} must be >= n_classes {n_classes}")
    if n_rules < n_classes:
        raise ConfigError(f"n_rules {n_rules} must be >= n_classes {n_classes}")
    if visual_dim < 1:
        raise ConfigError("visual_dim must be >= 1")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")

    last_error = "no attempt made"
    for attempt in range(_RETRY_BUDGET):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(0x7081, attempt)))
        world = _build_world(rng, seed, n_atoms, n_rules, n_classes, visual_dim, noise_sigma)
        problems = _validate_world(world)
        if not problems:
            return world
        last_error = "; ".join(problems)
    raise UnsatisfiableWorldError(f"world generation failed after {_RETRY_BUDGET} attempts: {last_error}")


def _build_world(rng: np.random.Generator, seed: int, n_atoms: int, n_rules: int,
                 n_classes: int, visual_dim: int, noise_sigma: float) -> SyntheticWorld:
    diagnoses = tuple(f"dx{i}" for i in range(n_classes))
    shared_text = math.ceil(n_classes / 2)
    rich = n_atoms >= n_classes + shared_text

    visual_findings: list[str] = []
    text_findings: list[str] = []
    gold_findings: dict[str, tuple[str, ...]] = {}

    if rich:
        vis = [f"vis{i}" for i in range(n_classes)]
        txt = [f"txt{j}" for j in range(shared_text)]
        visual_findings.extend(vis)
        text_findings.extend(txt)
        for i, dx in enumerate(diagnoses):
            gold_findings[dx] = (vis[i], txt[i // 2])
        for k in range(n_atoms - n_classes - shared_text):
            name = f"obs{k}"
            (visual_findings if k % 2 == 0 else text_findings).append(name)
    else:
        for i, dx in enumerate(diagnoses):
            name = f"vis{i}" if i % 2 == 0 else f"txt{i}"
            (visual_findings if i % 2 == 0 else text_findings).append(name)
            gold_findings[dx] = (name,)
        for k in range(n_atoms - n_classes):
            name = f"obs{k}"
            (visual_findings if k % 2 == 0 else text_findings).append(name)

    findings = tuple(visual_findings + text_findings)

    rules: list[Implies] = []
    gold: dict[str, GoldChain] = {}
    chain_budget = n_rules - n_classes
    mids = 0
    for i, dx in enumerate(diagnoses):
        ante = _conjunction(gold_findings[dx])
        if rich and i % 2 == 0 and chain_budget > 0:
            mid = f"mid{mids}"
            mids += 1
            chain_budget -= 1
            rules.append(Implies(ante, Atom(mid)))
            rules.append(Implies(Atom(mid), Atom(dx)))
            gold[dx] = GoldChain(gold_findings[dx], (len(rules) - 2, len(rules) - 1))
        else:
            rules.append(Implies(ante, Atom(dx)))
            gold[dx] = GoldChain(gold_findings[dx], (len(rules) - 1,))
    while len(rules) < n_rules:
        size = min(int(rng.integers(1, 3)), len(findings))
        picked = sorted(rng.choice(len(findings), size=size, replace=False))
        mid = f"mid{mids}"
        mids += 1
        rules.append(Implies(_conjunction([findings[p] for p in picked]), Atom(mid)))

    intermediates = tuple(f"mid{i}" for i in range(mids))
    atom_tokens = {
        name: idx
        for idx, name in enumerate([*findings, *intermediates, *diagnoses], start=1)
    }
    finding_to_visual = {name: rng.normal(size=visual_dim) for name in visual_findings}
    finding_to_tokens = {name: (atom_tokens[name],) for name in text_findings}

    return SyntheticWorld(
        atoms=findings,
        rules=tuple(rules),
        diagnoses=diagnoses,
        finding_to_visual=finding_to_visual,
        finding_to_tokens=finding_to_tokens,
        noise_sigma=noise_sigma,
        atom_tokens=atom_tokens,
        gold=gold,
        seed=seed,
    )


def _validate_world(world: SyntheticWorld) -> list[str]:
    problems = []
    if not _rule_graph_acyclic(world.rules):
        problems.append("rule graph has a cycle")
    for dx in world.diagnoses:
        facts = frozenset(Atom(f) for f in world.gold[dx].findings)
        if dx not in apply_rules(world, facts):
            problems.append(f"{dx} not derivable from its gold findings")
    return problems


def _exclusive_findings(world: SyntheticWorld) -> frozenset[str]:
    counts: dict[str, int] = {}
    for chain in world.gold.values():
        for f in chain.findings:
            counts[f] = counts.get(f, 0) + 1
    return frozenset(f for f, n in counts.items() if n == 1)


def generate_case(world: SyntheticWorld, rng: np.random.Generator) -> SyntheticCase:
    """Back-chain a uniformly drawn diagnosis into a case with a gold trace."""
    target = int(rng.integers(len(world.diagnoses)))
    dx = world.diagnoses[target]
    chain = world.gold[dx]
    exclusive = _exclusive_findings(world)
    pool = sorted(set(world.atoms) - set(chain.findings) - exclusive)
    n_extra = int(rng.integers(0, 3))
    extras: list[str] = []
    if pool and n_extra:
        picked = rng.choice(len(pool), size=min(n_extra, len(pool)), replace=False)
        extras = [pool[i] for i in sorted(picked)]
    case_id = f"c{int(rng.integers(1 << 32)):08x}"

    findings = sorted({*chain.findings, *extras})
    visual = [f for f in findings if f in world.finding_to_visual]
    textual = [f for f in findings if f in world.finding_to_tokens]

    dim = world.visual_dim
    if visual:
        slices = np.stack([
            world.finding_to_visual[f] + rng.normal(0.0, world.noise_sigma, size=dim)
            for f in visual
        ])
    else:
        slices = rng.normal(0.0, world.noise_sigma, size=(1, dim))
    tokens: tuple[int, ...] = tuple(
        t for f in textual for t in world.finding_to_tokens[f]
    ) or (NONE_TOKEN,)

    triads: list[Triad] = []
    step = 0
    for idx in chain.rule_indices:
        rule = world.rules[idx]
        ante = rule.antecedent
        if isinstance(ante, And):
            triads.append(Triad(ante.left, ante.right, ante, step))
            step += 1
        triads.append(Triad(rule, ante, rule.consequent, step))
        step += 1

    gold_trace = ReasoningTrace(case_id=case_id, triads=tuple(triads), final_answer=dx)
    return SyntheticCase(
        case_id=case_id,
        input=CaseInput(slices=slices, tokens=tokens),
        active_findings=frozenset(Atom(f) for f in findings),
        label=target,
        gold_trace=gold_trace,
    )


def input_facts_for(world: SyntheticWorld, case: SyntheticCase) -> frozenset[Proposition]:
    """The premise pool a reasoner may draw from: the case's findings plus the rule base."""
    return case.active_findings | world.rule_props()


def case_stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x0ca5, *key)))


# --- serialization -----------------------------------------------------------------


def world_to_json(world: SyntheticWorld) -> dict:
    return {
        "seed": world.seed,
        "atoms": list(world.atoms),
        "rules": [render(r) for r in world.rules],
        "diagnoses": list(world.diagnoses),
        "noise_sigma": world.noise_sigma,
        "atom_tokens": dict(world.atom_tokens),
        "finding_to_visual": {k: v.tolist() for k, v in world.finding_to_visual.items()},
        "finding_to_tokens": {k: list(v) for k, v in world.finding_to_tokens.items()},
        "gold": {
            dx: {"findings": list(c.findings), "rule_indices": list(c.rule_indices)}
            for dx, c in world.gold.items()
        },
    }


def world_from_json(obj: Mapping) -> SyntheticWorld:
    return SyntheticWorld(
        atoms=tuple(obj["atoms"]),
        rules=tuple(parse_proposition(r) for r in obj["rules"]),
        diagnoses=tuple(obj["diagnoses"]),
        finding_to_visual={k: np.asarray(v, dtype=np.float64)
                           for k, v in obj["finding_to_visual"].items()},
        finding_to_tokens={k: tuple(v) for k, v in obj["finding_to_tokens"].items()},
        noise_sigma=float(obj["noise_sigma"]),
        atom_tokens={k: int(v) for k, v in obj["atom_tokens"].items()},
        gold={
            dx: GoldChain(tuple(c["findings"]), tuple(c["rule_indices"]))
            for dx, c in obj["gold"].items()
        },
        seed=int(obj["seed"]),
    )


def case_to_json(case: SyntheticCase) -> dict:
    return {
        "case_id": case.case_id,
        "slices": case.input.slices.tolist(),
        "tokens": list(case.input.tokens),
        "active_findings": sorted(render(p) for p in case.active_findings),
        "label": case.label,
        "gold_trace": trace_to_json(case.gold_trace),
    }


def case_from_json(obj: Mapping) -> SyntheticCase:
    return SyntheticCase(
        case_id=obj["case_id"],
        input=CaseInput(slices=np.asarray(obj["slices"], dtype=np.float64),
                        tokens=tuple(obj["tokens"])),
        active_findings=frozenset(parse_proposition(p) for p in obj["active_findings"]),
        label=int(obj["label"]),
        gold_trace=trace_from_json(obj["gold_trace"]),
    )
