"""Policy optimization with group-relative, reweighted advantages.

Each case gets a group of rollouts scored by a composite reward (answer
correctness, chain validity, visual-text grounding). Advantages are z-scored
within the group, zero-variance groups are dropped, and the policy minimizes
an asymmetrically clipped surrogate plus the supervised diagnosis loss and the
contrastive alignment loss. The chain-validity loss enters the reported total
as a constant; its training pressure flows through the reward channel only.
Plain constant-rate gradient descent keeps updates free of hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .errors import ConfigError
from .logic import ReasoningTrace, render_rollout
from .metrics import SynonymTable, normalize_answer, rouge_l
from .model import (
    CaseInput,
    PolicyConfig,
    RolloutSet,
    TinyPolicy,
    forward,
    init_policy,
    sample_rollouts,
    trace_logp_from,
)
from .numerics import AlignmentBatch, Tensor
from .parallel import ordered_map
from .synth import SyntheticCase, SyntheticWorld, case_stream_rng, generate_case, input_facts_for
from .verifier import logic_loss

_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_logic: float
    r_ground: float
    weights: tuple[float, float, float]
    total: float

    def __post_init__(self):
        w_acc, w_logic, w_ground = self.weights
        expected = w_acc * self.r_acc + w_logic * self.r_logic + w_ground * self.r_ground
        if self.total != expected:
            raise ValueError("total must equal the weighted signal sum exactly")


def _check_weights(weights: Sequence[float]) -> tuple[float, float, float]:
    if len(weights) != 3:
        raise ConfigError("reward weights are (w_acc, w_logic, w_ground)")
    if any(w < 0 for w in weights):
        raise ConfigError("reward weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"reward weights must sum to 1, got {sum(weights)}")
    return tuple(float(w) for w in weights)


def composite_reward(trace: ReasoningTrace, truth_label: str, predicted_label: str | None,
                     z_visual, z_text, weights: Sequence[float],
                     synonyms: SynonymTable | None = None) -> RewardBreakdown:
    """Blend answer correctness, chain validity, and grounding into one scalar.

    predicted_label is carried for reporting; correctness compares the trace's
    own final answer with the truth after normalization.
    """
    w = _check_weights(weights)
    r_acc = 1.0 if normalize_answer(trace.final_answer, synonyms) == normalize_answer(
        truth_label, synonyms) else 0.0
    r_logic = 1.0 - logic_loss(trace)
    zv = np.asarray(z_visual.data if isinstance(z_visual, Tensor) else z_visual)
    zt = np.asarray(z_text.data if isinstance(z_text, Tensor) else z_text)
    if np.linalg.norm(zv) == 0.0 or np.linalg.norm(zt) == 0.0:
        r_ground = 0.0  # a silent channel grounds nothing; neutral value
    else:
        r_ground = float(nm.cosine_similarity(zv, zt).data)
    total = w[0] * r_acc + w[1] * r_logic + w[2] * r_ground
    return RewardBreakdown(r_acc=r_acc, r_logic=r_logic, r_ground=r_ground,
                           weights=w, total=total)


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Z-score rewards within one rollout group (population std, floored).

    An all-equal group centers to zero, so its advantages are exactly zero.
    """
    if len(rewards) < 1:
        raise ValueError("need at least one reward")
    arr = np.asarray(rewards, dtype=np.float64)
    centered = arr - arr.mean()
    return list(centered / max(float(arr.std()), 1e-8))


def filter_degenerate_groups(groups: Sequence, rewards_of: Callable[[object], Sequence[float]] = None
                             ) -> tuple[list, int]:
    """Drop groups whose reward variance is below the learning-signal floor."""
    if rewards_of is None:
        rewards_of = lambda group: group
    kept = []
    dropped = 0
    for group in groups:
        rewards = np.asarray(list(rewards_of(group)), dtype=np.float64)
        if rewards.size and float(rewards.var()) < _VARIANCE_FLOOR:
            dropped += 1
        else:
            kept.append(group)
    return kept, dropped


def clipped_surrogate(logp_new: float, logp_old: float, advantage: float,
                      eps_low: float, eps_high: float) -> float:
    """Asymmetrically clipped policy-gradient loss for one action (to minimize)."""
    if not 0 < eps_low <= eps_high:
        raise ConfigError(f"need 0 < eps_low <= eps_high, got {eps_low}, {eps_high}")
    ratio = math.exp(logp_new - logp_old)
    clipped = min(max(ratio, 1.0 - eps_low), 1.0 + eps_high)
    return -min(ratio * advantage, clipped * advantage)


def _surrogate_node(logp_new: Tensor, logp_old: float, advantage: float,
                    eps_low: float, eps_high: float) -> Tensor:
    delta = nm.minimum(nm.sub(logp_new, logp_old), Tensor(60.0))
    ratio = nm.exp(delta)
    clipped = nm.minimum(nm.maximum(ratio, Tensor(1.0 - eps_low)), Tensor(1.0 + eps_high))
    return nm.neg(nm.minimum(nm.mul(ratio, advantage), nm.mul(clipped, advantage)))


# --- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    cases_per_epoch: int = 16
    rollouts_per_case: int = 4
    steps_per_rollout: int = 3
    learning_rate: float = 0.05
    clip_low: float = 0.2
    clip_high: float = 0.28
    lambda_logic: float = 0.5
    lambda_align: float = 0.5
    w_acc: float = 0.55
    w_logic: float = 0.35
    w_ground: float = 0.1
    tau: float = 0.07
    rng_seed: int = 0
    temperature: float = 1.0
    hidden_dim: int = 32
    n_heads: int = 4
    advantage_norm: bool = True
    group_filter: bool = True
    zero_vision: bool = False

    def validate(self) -> None:
        counts = {
            "epochs": self.epochs,
            "cases_per_epoch": self.cases_per_epoch,
            "rollouts_per_case": self.rollouts_per_case,
            "steps_per_rollout": self.steps_per_rollout,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.clip_low <= self.clip_high:
            raise ConfigError(
                f"need 0 < clip_low <= clip_high, got {self.clip_low}, {self.clip_high}")
        if self.lambda_logic < 0 or self.lambda_align < 0:
            raise ConfigError("loss weights must be non-negative")
        _check_weights((self.w_acc, self.w_logic, self.w_ground))
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.temperature <= 0:
            raise ConfigError("sampling temperature must be positive during training")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")

    @property
    def reward_weights(self) -> tuple[float, float, float]:
        return (self.w_acc, self.w_logic, self.w_ground)


def make_policy(config: TrainConfig, world: SyntheticWorld) -> TinyPolicy:
    cfg = PolicyConfig(
        vocab_size=world.vocab_size,
        visual_dim=world.visual_dim,
        hidden_dim=config.hidden_dim,
        n_heads=config.n_heads,
        n_classes=len(world.diagnoses),
    )
    return init_policy(cfg, world.diagnoses, world.atom_tokens, seed=config.rng_seed)


# --- training loop ----------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_reward: float
    accuracy: float
    mean_f_logic: float
    l_diag: float
    l_logic: float
    l_align: float
    l_total: float
    dropped_groups: int

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_reward": self.mean_reward,
            "accuracy": self.accuracy,
            "mean_f_logic": self.mean_f_logic,
            "l_diag": self.l_diag,
            "l_logic": self.l_logic,
            "l_align": self.l_align,
            "l_total": self.l_total,
            "dropped_groups": self.dropped_groups,
        }


@dataclass
class TrainReport:
    records: tuple[EpochRecord, ...]
    policy: TinyPolicy
    final_epoch: int


@dataclass
class _CaseGroup:
    case: SyntheticCase
    inputs: CaseInput
    rollouts: RolloutSet
    rewards: list[RewardBreakdown]

    @property
    def totals(self) -> list[float]:
        return [r.total for r in self.rewards]


def _masked_input(case: SyntheticCase, zero_vision: bool) -> CaseInput:
    if not zero_vision:
        return case.input
    return CaseInput(slices=np.zeros_like(case.input.slices), tokens=case.input.tokens)


def _epoch_cases(world: SyntheticWorld, config: TrainConfig, epoch: int) -> list[SyntheticCase]:
    return [
        generate_case(world, case_stream_rng(config.rng_seed, 1, epoch, i))
        for i in range(config.cases_per_epoch)
    ]


def train(config: TrainConfig, world: SyntheticWorld, *, policy: TinyPolicy | None = None,
          start_epoch: int = 1, on_epoch: Callable[[EpochRecord], None] | None = None
          ) -> TrainReport:
    """Run the full optimization loop; deterministic for a fixed config."""
    config.validate()
    if policy is None:
        policy = make_policy(config, world)
    truth = world.diagnoses

    records = []
    final_epoch = start_epoch - 1
    for epoch in range(start_epoch, start_epoch + config.epochs):
        cases = _epoch_cases(world, config, epoch)

        def sample_one(case: SyntheticCase) -> _CaseGroup:
            inputs = _masked_input(case, config.zero_vision)
            facts = input_facts_for(world, case)
            rollouts = sample_rollouts(
                policy, inputs, facts, config.rollouts_per_case, config.rng_seed,
                case_id=case.case_id, steps=config.steps_per_rollout,
                temperature=config.temperature)
            with nm.no_grad():
                logits, z_visual, z_text = forward(policy, inputs)
            predicted = truth[int(np.argmax(logits.data))]
            rewards = [
                composite_reward(rec.trace, truth[case.label], predicted,
                                 z_visual, z_text, config.reward_weights)
                for rec in rollouts.records
            ]
            return _CaseGroup(case=case, inputs=inputs, rollouts=rollouts, rewards=rewards)

        groups = ordered_map(sample_one, cases)

        if config.group_filter:
            kept, dropped = filter_degenerate_groups(groups, rewards_of=lambda g: g.totals)
        else:
            kept, dropped = list(groups), 0
        advantages: dict[int, list[float]] = {}
        for group in kept:
            if config.advantage_norm:
                advantages[id(group)] = group_advantages(group.totals)
            else:
                advantages[id(group)] = list(group.totals)

        policy.zero_grads()
        ce_terms = []
        z_visual_rows = []
        z_text_rows = []
        surrogate_terms = []
        logic_terms = []
        for group in groups:
            logits, z_visual, z_text = forward(policy, group.inputs)
            joint = nm.mul(nm.add(z_visual, z_text), 0.5)
            ce_terms.append(nm.cross_entropy(logits, group.case.label))
            z_visual_rows.append(z_visual)
            z_text_rows.append(z_text)
            best = int(np.argmax(group.totals))
            logic_terms.append(logic_loss(group.rollouts.records[best].trace))
            advs = advantages.get(id(group))
            if advs is None:
                continue
            for record, advantage in zip(group.rollouts.records, advs):
                logp_new = trace_logp_from(policy, logits, joint, record)
                surrogate_terms.append(_surrogate_node(
                    logp_new, record.logp, advantage, config.clip_low, config.clip_high))

        l_diag = nm.mul(_sum_nodes(ce_terms), 1.0 / len(ce_terms))
        zv_mat = nm.stack_rows(z_visual_rows)
        zt_mat = nm.stack_rows(z_text_rows)
        if np.all(np.linalg.norm(zv_mat.data, axis=1) > 0.0) and np.all(
                np.linalg.norm(zt_mat.data, axis=1) > 0.0):
            l_align = nm.infonce_align(AlignmentBatch(zv_mat, zt_mat, tau=config.tau))
        else:
            # a zeroed channel (vision ablation) has no well-defined alignment
            l_align = Tensor(0.0)
        l_logic = sum(logic_terms) / len(logic_terms)
        if surrogate_terms:
            surrogate = nm.mul(_sum_nodes(surrogate_terms), 1.0 / len(surrogate_terms))
        else:
            surrogate = Tensor(0.0)
        objective = nm.add(nm.add(l_diag, nm.mul(l_align, config.lambda_align)), surrogate)
        nm.backward(objective)
        _gradient_step(policy, config.learning_rate)

        totals = [t for g in groups for t in g.totals]
        record = EpochRecord(
            epoch=epoch,
            mean_reward=float(np.mean(totals)),
            accuracy=float(np.mean([r.r_acc for g in groups for r in g.rewards])),
            mean_f_logic=float(np.mean([r.r_logic for g in groups for r in g.rewards])),
            l_diag=float(l_diag.data),
            l_logic=float(l_logic),
            l_align=float(l_align.data),
            l_total=float(nm.total_loss(float(l_diag.data), float(l_logic),
                                        float(l_align.data),
                                        config.lambda_logic, config.lambda_align)),
            dropped_groups=dropped,
        )
        records.append(record)
        final_epoch = epoch
        if on_epoch is not None:
            on_epoch(record)
    return TrainReport(records=tuple(records), policy=policy, final_epoch=final_epoch)


def _sum_nodes(nodes: Sequence[Tensor]) -> Tensor:
    total = nodes[0]
    for node in nodes[1:]:
        total = nm.add(total, node)
    return total


def _gradient_step(policy: TinyPolicy, learning_rate: float) -> None:
    for name, tensor in policy.params.items():
        if tensor.grad is None:
            continue
        tensor.data -= learning_rate * tensor.grad
        if not np.all(np.isfinite(tensor.data)):
            raise nm.NumericError(f"parameter {name} left the finite range during the update")
    policy.zero_grads()


# --- evaluation --------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseEval:
    case_id: str
    correct: bool
    f_logic: float
    rouge_f1: float
    answer: str
    label_name: str


@dataclass
class EvalOutcome:
    cases: tuple[CaseEval, ...]

    @property
    def accuracy(self) -> float:
        return sum(c.correct for c in self.cases) / len(self.cases)

    @property
    def mean_f_logic(self) -> float:
        return float(np.mean([c.f_logic for c in self.cases]))

    @property
    def mean_rouge_f1(self) -> float:
        return float(np.mean([c.rouge_f1 for c in self.cases]))


def evaluate_cases(policy: TinyPolicy, world: SyntheticWorld, cases: Sequence[SyntheticCase],
                   *, steps: int = 3, synonyms: SynonymTable | None = None,
                   zero_vision: bool = False) -> EvalOutcome:
    """Greedy rollout per case; exact-match accuracy, chain validity, ROUGE-L."""

    def eval_one(case: SyntheticCase) -> CaseEval:
        inputs = _masked_input(case, zero_vision)
        facts = input_facts_for(world, case)
        rollout = sample_rollouts(policy, inputs, facts, 1, 0, case_id=case.case_id,
                                  steps=steps, temperature=0.0).records[0]
        label_name = world.diagnoses[case.label]
        answer = rollout.trace.final_answer
        correct = normalize_answer(answer, synonyms) == normalize_answer(label_name, synonyms)
        candidate = normalize_answer(render_rollout(rollout.trace), synonyms).split()
        reference = normalize_answer(render_rollout(case.gold_trace), synonyms).split()
        rouge = rouge_l(candidate, reference)
        return CaseEval(case_id=case.case_id, correct=correct,
                        f_logic=1.0 - logic_loss(rollout.trace), rouge_f1=rouge.f1,
                        answer=answer, label_name=label_name)

    return EvalOutcome(cases=tuple(ordered_map(eval_one, cases)))
