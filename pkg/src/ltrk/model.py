"""The tiny multimodal policy.

Synthetic "images" are stacks of slice feature vectors; text is a short token
id sequence. Slices are projected into the hidden space, fused with one
multi-head self-attention block (no positional encoding, so fusion is
permutation invariant), and pooled. Diagnosis logits come from a linear head
over the mean of the pooled visual and text embeddings.

Rollouts are template constrained: at each step the policy scores candidate
triads built from the available propositions (input facts plus conclusions
derived so far) under five templates - conjunction introduction, modus ponens,
modus tollens, weak completion (affirming the consequent), and a distractor
that jumps to an underived atom. Scores are a bilinear match between the case
embedding and the candidate conclusion's atom embeddings plus a per-template
bias, so every draw has a differentiable log-probability. The final answer is
a draw over the diagnosis labels from the classifier logits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nm
from .logic import And, Atom, Implies, Not, Proposition, ReasoningTrace, Triad, atoms, render
from .numerics import Tensor


class EmptyFactSetError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    visual_dim: int
    hidden_dim: int
    n_heads: int
    n_classes: int

    def __post_init__(self):
        if min(self.vocab_size, self.visual_dim, self.hidden_dim, self.n_heads, self.n_classes) < 1:
            raise ValueError("all policy dimensions must be >= 1")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.n_heads} heads")


class TriadTemplate(IntEnum):
    CONJUNCTION = 0
    MODUS_PONENS = 1
    MODUS_TOLLENS = 2
    WEAK_COMPLETION = 3
    DISTRACTOR = 4


N_TEMPLATES = len(TriadTemplate)

PARAM_NAMES = (
    "token_embeddings",
    "visual_proj",
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_o",
    "score_bilinear",
    "template_bias",
    "classifier_w",
    "classifier_b",
)


@dataclass
class TinyPolicy:
    cfg: PolicyConfig
    label_names: tuple[str, ...]
    atom_tokens: dict[str, int]
    params: dict[str, Tensor]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def _param_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    return {
        "token_embeddings": (cfg.vocab_size, d),
        "visual_proj": (d, cfg.visual_dim),
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_o": (d, d),
        "score_bilinear": (d, d),
        "template_bias": (N_TEMPLATES,),
        "classifier_w": (d, cfg.n_classes),
        "classifier_b": (cfg.n_classes,),
    }


def init_policy(cfg: PolicyConfig, label_names: Sequence[str], atom_tokens: Mapping[str, int],
                seed: int) -> TinyPolicy:
    if len(label_names) != cfg.n_classes:
        raise ValueError(f"{len(label_names)} label names for {cfg.n_classes} classes")
    if atom_tokens and max(atom_tokens.values()) >= cfg.vocab_size:
        raise ValueError("atom token id exceeds vocab size")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x1717,)))
    scale = {
        "token_embeddings": 0.5,
        "visual_proj": 1.0 / np.sqrt(cfg.visual_dim),
        "attn_q": 1.0 / np.sqrt(cfg.hidden_dim),
        "attn_k": 1.0 / np.sqrt(cfg.hidden_dim),
        "attn_v": 1.0 / np.sqrt(cfg.hidden_dim),
        "attn_o": 1.0 / np.sqrt(cfg.hidden_dim),
        "score_bilinear": 0.0,
        "template_bias": 0.0,
        "classifier_w": 0.1,
        "classifier_b": 0.0,
    }
    params = {
        name: Tensor(rng.normal(size=shape) * scale[name], requires_grad=True)
        for name, shape in _param_shapes(cfg).items()
    }
    return TinyPolicy(cfg=cfg, label_names=tuple(label_names),
                      atom_tokens=dict(atom_tokens), params=params)


def apply_tensors(policy: TinyPolicy, tensors: Mapping[str, np.ndarray]) -> None:
    """Load checkpoint arrays into the policy, reporting any dimension clash."""
    expected = _param_shapes(policy.cfg)
    problems = []
    for name, shape in expected.items():
        if name not in tensors:
            problems.append(f"missing tensor {name!r} (expected {shape})")
        elif tuple(tensors[name].shape) != shape:
            problems.append(f"{name}: checkpoint has {tuple(tensors[name].shape)}, model needs {shape}")
    for name in tensors:
        if name not in expected:
            problems.append(f"unexpected tensor {name!r}")
    if problems:
        raise nm.ShapeMismatchError("; ".join(problems))
    for name, arr in tensors.items():
        policy.params[name] = Tensor(arr, requires_grad=True)


@dataclass(frozen=True)
class CaseInput:
    slices: np.ndarray  # M x d_v
    tokens: tuple[int, ...]

    def __post_init__(self):
        arr = np.asarray(self.slices, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise nm.ShapeMismatchError("slices must be an M x d_v matrix with M >= 1")
        if len(self.tokens) < 1 or min(self.tokens) < 0:
            raise ValueError("tokens must be a non-empty sequence of non-negative ids")
        object.__setattr__(self, "slices", arr)


def project_visual(v, proj) -> Tensor:
    """Project one visual feature vector into the hidden space."""
    v, proj = nm.as_tensor(v), nm.as_tensor(proj)
    if proj.data.ndim != 2 or v.data.ndim != 1 or proj.shape[1] != v.shape[0]:
        raise nm.ShapeMismatchError(f"projection {proj.shape} does not accept vector {v.shape}")
    return nm.matmul(proj, v)


def fuse_slices(slice_feats, policy: TinyPolicy) -> Tensor:
    """Multi-head self-attention over slice features, mean-pooled.

    No positional encoding: permuting the slices permutes rows of every
    intermediate, and the mean pool erases the order.
    """
    x = nm.as_tensor(slice_feats)
    d = policy.cfg.hidden_dim
    if x.data.ndim != 2 or x.shape[1] != d:
        raise nm.ShapeMismatchError(f"fuse_slices needs M x {d} features, got {x.shape}")
    heads = policy.cfg.n_heads
    dk = d // heads
    q = nm.matmul(x, policy.params["attn_q"])
    k = nm.matmul(x, policy.params["attn_k"])
    v = nm.matmul(x, policy.params["attn_v"])
    outs = []
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        qh, kh, vh = nm.col_slice(q, lo, hi), nm.col_slice(k, lo, hi), nm.col_slice(v, lo, hi)
        scores = nm.mul(nm.matmul(qh, nm.transpose(kh)), 1.0 / np.sqrt(dk))
        weights = nm.softmax(scores, axis=1)
        outs.append(nm.matmul(weights, vh))
    fused = nm.matmul(nm.concat_cols(outs), policy.params["attn_o"])
    return nm.mean_axis(fused, axis=0)


def forward(policy: TinyPolicy, case: CaseInput) -> tuple[Tensor, Tensor, Tensor]:
    """Return (diagnosis logits, pooled visual embedding, pooled text embedding)."""
    cfg = policy.cfg
    if case.slices.shape[1] != cfg.visual_dim:
        raise nm.ShapeMismatchError(
            f"case slices have dim {case.slices.shape[1]}, model expects {cfg.visual_dim}")
    if max(case.tokens) >= cfg.vocab_size:
        raise nm.ShapeMismatchError(
            f"token id {max(case.tokens)} out of range for vocab {cfg.vocab_size}")
    projected = nm.matmul(nm.as_tensor(case.slices), nm.transpose(policy.params["visual_proj"]))
    z_visual = fuse_slices(projected, policy)
    z_text = nm.mean_axis(nm.gather_rows(policy.params["token_embeddings"], case.tokens), axis=0)
    joint = nm.mul(nm.add(z_visual, z_text), 0.5)
    logits = nm.add(nm.matmul(joint, policy.params["classifier_w"]), policy.params["classifier_b"])
    return logits, z_visual, z_text


# --- template-constrained rollouts -------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    triad: Triad
    template: TriadTemplate


@dataclass(frozen=True)
class StepRecord:
    candidates: tuple[Candidate, ...]
    feature_rows: np.ndarray  # n_candidates x vocab averaging weights
    template_ids: np.ndarray
    chosen: int
    probs: np.ndarray


@dataclass(frozen=True)
class RolloutRecord:
    trace: ReasoningTrace
    steps: tuple[StepRecord, ...]
    answer_index: int
    answer_probs: np.ndarray
    logp: float
    temperature: float


@dataclass(frozen=True)
class RolloutSet:
    case_id: str
    records: tuple[RolloutRecord, ...]

    @property
    def traces(self) -> tuple[ReasoningTrace, ...]:
        return tuple(r.trace for r in self.records)


def _canonical_order(props: Iterable[Proposition]) -> list[Proposition]:
    return sorted(props, key=render)


def _is_ground(prop: Proposition) -> bool:
    return not isinstance(prop, Implies)


def enumerate_candidates(available: Sequence[Proposition], step_index: int,
                         aux_counter: int) -> tuple[list[Candidate], int]:
    """Deterministic candidate triads for one step.

    Conclusions are always fresh (not already available), which guarantees the
    resulting trace builds a legal tree. Returns the candidates and the next
    auxiliary-atom counter for the no-candidate fallback.
    """
    aset = set(available)
    ground = [p for p in available if _is_ground(p)]
    rules = [p for p in available if isinstance(p, Implies)]
    out: list[Candidate] = []

    for i, p in enumerate(ground):
        for j, q in enumerate(ground):
            if i == j:
                continue
            concl = And(p, q)
            if concl not in aset:
                out.append(Candidate(Triad(p, q, concl, step_index), TriadTemplate.CONJUNCTION))
    for rule in rules:
        if rule.antecedent in aset and rule.consequent not in aset:
            out.append(Candidate(Triad(rule, rule.antecedent, rule.consequent, step_index),
                                 TriadTemplate.MODUS_PONENS))
        if Not(rule.consequent) in aset and Not(rule.antecedent) not in aset:
            out.append(Candidate(
                Triad(rule, Not(rule.consequent), Not(rule.antecedent), step_index),
                TriadTemplate.MODUS_TOLLENS))
        if rule.consequent in aset and rule.antecedent not in aset:
            out.append(Candidate(Triad(rule, rule.consequent, rule.antecedent, step_index),
                                 TriadTemplate.WEAK_COMPLETION))

    standing = {p.name for p in available if isinstance(p, Atom)}
    mentioned = sorted(set().union(*(atoms(p) for p in available)))
    fresh = [name for name in mentioned if name not in standing and Atom(name) not in aset]
    for name in fresh:
        premises = [p for p in available if name not in atoms(p)][:2]
        while len(premises) < 2:
            premises.append(available[0])
        out.append(Candidate(Triad(premises[0], premises[1], Atom(name), step_index),
                             TriadTemplate.DISTRACTOR))

    seen: set[Triad] = set()
    unique = []
    for cand in out:
        if cand.triad not in seen:
            seen.add(cand.triad)
            unique.append(cand)
    if not unique:
        # degenerate fact sets still need K draws; invent an inert conclusion
        name = f"aux{aux_counter}"
        aux_counter += 1
        fallback = [available[0], available[-1]]
        unique.append(Candidate(Triad(fallback[0], fallback[1], Atom(name), step_index),
                                TriadTemplate.DISTRACTOR))
    return unique, aux_counter


def _conclusion_feature_rows(candidates: Sequence[Candidate],
                             atom_tokens: Mapping[str, int], vocab: int) -> np.ndarray:
    rows = np.zeros((len(candidates), vocab))
    for i, cand in enumerate(candidates):
        names = sorted(atoms(cand.triad.conclusion))
        for name in names:
            rows[i, atom_tokens.get(name, 0)] += 1.0 / len(names)
    return rows


def _step_logits(policy: TinyPolicy, joint: Tensor, feature_rows: np.ndarray,
                 template_ids: np.ndarray) -> Tensor:
    embedded = nm.matmul(nm.as_tensor(feature_rows), policy.params["token_embeddings"])
    match = nm.matmul(embedded, nm.matmul(policy.params["score_bilinear"], joint))
    return nm.add(match, nm.take_indices(policy.params["template_bias"], template_ids))


def _rollout_rng(seed: int, case_id: str, index: int) -> np.random.Generator:
    digest = hashlib.sha256(case_id.encode("utf-8")).digest()
    case_key = int.from_bytes(digest[:4], "little")
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(case_key, index)))


def sample_rollouts(policy: TinyPolicy, case: CaseInput, facts: Iterable[Proposition],
                    n_rollouts: int, rng_seed: int, *, case_id: str = "case",
                    steps: int = 3, temperature: float = 1.0) -> RolloutSet:
    """Draw n_rollouts template-constrained traces with log-probabilities.

    Identical seeds give identical rollouts regardless of scheduling; each
    rollout draws from its own stream keyed by (seed, case_id, index).
    Temperature 0 means greedy argmax at every draw.
    """
    fact_list = _canonical_order(set(facts))
    if not fact_list:
        raise EmptyFactSetError("rollout sampling needs a non-empty fact set")
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")

    with nm.no_grad():
        logits, z_visual, z_text = forward(policy, case)
        joint = nm.mul(nm.add(z_visual, z_text), 0.5)
        answer_base = nm.log_softmax(logits).data

        records = []
        for g in range(n_rollouts):
            rng = _rollout_rng(rng_seed, case_id, g)
            available = list(fact_list)
            aux = 0
            triads: list[Triad] = []
            step_records: list[StepRecord] = []
            logp = 0.0
            for k in range(steps):
                candidates, aux = enumerate_candidates(available, k, aux)
                feature_rows = _conclusion_feature_rows(
                    candidates, policy.atom_tokens, policy.cfg.vocab_size)
                template_ids = np.array([int(c.template) for c in candidates], dtype=np.intp)
                step_logits = _step_logits(policy, joint, feature_rows, template_ids).data
                chosen, probs = _draw(step_logits, rng, temperature)
                logp += float(np.log(max(probs[chosen], 1e-300)))
                step_records.append(StepRecord(
                    candidates=tuple(candidates), feature_rows=feature_rows,
                    template_ids=template_ids, chosen=chosen, probs=probs))
                picked = candidates[chosen].triad
                triads.append(picked)
                available.append(picked.conclusion)
            answer_index, answer_probs = _draw(answer_base, rng, temperature)
            logp += float(np.log(max(answer_probs[answer_index], 1e-300)))
            trace = ReasoningTrace(case_id=case_id, triads=tuple(triads),
                                   final_answer=policy.label_names[answer_index])
            records.append(RolloutRecord(
                trace=trace, steps=tuple(step_records), answer_index=answer_index,
                answer_probs=answer_probs, logp=logp, temperature=temperature))
    return RolloutSet(case_id=case_id, records=tuple(records))


def _draw(logits: np.ndarray, rng: np.random.Generator, temperature: float) -> tuple[int, np.ndarray]:
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    if temperature == 0.0:
        return int(np.argmax(logits)), probs
    if temperature != 1.0:
        scaled = shifted / temperature
        scaled -= scaled.max()
        probs = np.exp(scaled)
        probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs)), probs


def trace_logp_from(policy: TinyPolicy, logits: Tensor, joint: Tensor,
                    record: RolloutRecord) -> Tensor:
    """Differentiable log-probability of a recorded rollout, given the case's
    forward outputs; the same tempering used at sampling time is reapplied."""
    if record.temperature == 0.0:
        raise ValueError("greedy rollouts have no usable log-probability")
    inv_t = 1.0 / record.temperature
    total = None
    for step in record.steps:
        step_logits = _step_logits(policy, joint, step.feature_rows, step.template_ids)
        term = nm.take_at(nm.log_softmax(nm.mul(step_logits, inv_t)), step.chosen)
        total = term if total is None else nm.add(total, term)
    answer_term = nm.take_at(nm.log_softmax(nm.mul(logits, inv_t)), record.answer_index)
    return nm.add(total, answer_term) if total is not None else answer_term


def trace_logp(policy: TinyPolicy, case: CaseInput, record: RolloutRecord) -> Tensor:
    """Differentiable log-probability of a recorded rollout under current params."""
    logits, z_visual, z_text = forward(policy, case)
    joint = nm.mul(nm.add(z_visual, z_text), 0.5)
    return trace_logp_from(policy, logits, joint, record)
