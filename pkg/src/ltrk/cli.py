"""One binary for the whole pipeline: synth, train, verify, eval, render.

Machine-readable output goes to stdout as JSON or JSON lines; human prose goes
to stderr. Exit codes: 0 success, 2 usage/config/parse errors, 3 I/O errors,
4 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import numerics as nm
from .config import RunConfig, load_run_config
from .dapo import evaluate_cases, make_policy, train
from .errors import ConfigError
from .logic import (
    CycleError,
    DanglingPremiseError,
    DuplicateConclusionError,
    ParseError,
    build_tree,
    dumps_json,
    parse_proposition,
    parse_rollout_stream,
    tree_to_dot,
    tree_to_json,
)
from .metrics import (
    EvalReport,
    LengthMismatchError,
    SynonymTable,
    mcnemar,
    paired_bootstrap,
)
from .model import apply_tensors
from .numerics import CheckpointError, NumericError, ShapeMismatchError, load_tensors, save_tensors
from .synth import (
    case_from_json,
    case_stream_rng,
    case_to_json,
    generate_case,
    generate_world,
    world_from_json,
    world_to_json,
)
from .verifier import TooManyAtomsError, logic_loss, verify_triad

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_USAGE_ERRORS = (
    ConfigError,
    ParseError,
    CheckpointError,
    ShapeMismatchError,
    DanglingPremiseError,
    CycleError,
    DuplicateConclusionError,
    TooManyAtomsError,
    LengthMismatchError,
    nm.LabelOutOfRangeError,
    json.JSONDecodeError,
)


def _say(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(obj: dict) -> None:
    print(dumps_json(obj))


def _world_from_config(config: RunConfig):
    return generate_world(
        seed=config.resolved_world_seed(),
        n_atoms=config.n_atoms,
        n_rules=config.n_rules,
        n_classes=config.n_classes,
        visual_dim=config.visual_dim,
        noise_sigma=config.noise_sigma,
    )


def _load_synonyms(config: RunConfig) -> SynonymTable | None:
    if not config.synonyms:
        return None
    return SynonymTable.from_file(config.synonyms)


# --- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = _world_from_config(config)
    case_seed = config.resolved_case_seed()
    cases = [
        generate_case(world, case_stream_rng(case_seed, 0, i))
        for i in range(config.n_cases)
    ]
    (out_dir / "world.json").write_text(dumps_json(world_to_json(world)) + "\n", encoding="utf-8")
    with open(out_dir / "cases.jsonl", "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(dumps_json(case_to_json(case)) + "\n")
    _say(f"wrote {len(cases)} cases to {out_dir}")
    _emit({"cases": len(cases), "out": str(out_dir)})
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = _world_from_config(config)
    train_config = config.train_config()

    policy = None
    start_epoch = 1
    if args.resume:
        policy = make_policy(train_config, world)
        apply_tensors(policy, load_tensors(args.resume))
        state_path = Path(str(args.resume) + ".state.json")
        if state_path.is_file():
            start_epoch = int(json.loads(state_path.read_text(encoding="utf-8"))["epoch"]) + 1
        _say(f"resumed from {args.resume}, continuing at epoch {start_epoch}")

    (out_dir / "config.json").write_text(dumps_json(config.to_json()) + "\n", encoding="utf-8")
    report_path = out_dir / "report.jsonl"
    mode = "a" if (args.resume and report_path.is_file()) else "w"
    with open(report_path, mode, encoding="utf-8") as fh:
        def on_epoch(record):
            fh.write(dumps_json(record.to_json()) + "\n")
            if record.epoch % 25 == 0 or record.epoch == start_epoch:
                _say(f"epoch {record.epoch}: reward {record.mean_reward:.3f} "
                     f"accuracy {record.accuracy:.3f} f_logic {record.mean_f_logic:.3f}")

        report = train(train_config, world, policy=policy, start_epoch=start_epoch,
                       on_epoch=on_epoch)

    ckpt_path = out_dir / "checkpoint.ltrk"
    save_tensors(ckpt_path, report.policy.tensors())
    (out_dir / "checkpoint.ltrk.state.json").write_text(
        dumps_json({"epoch": report.final_epoch}) + "\n", encoding="utf-8")
    _emit(report.records[-1].to_json())
    return EXIT_OK


def cmd_verify(args) -> int:
    text = Path(args.rollout_file).read_text(encoding="utf-8")
    traces = parse_rollout_stream(text)
    for trace in traces:
        scores = [verify_triad(t) for t in trace.triads]
        _emit({
            "case_id": trace.case_id,
            "final_answer": trace.final_answer,
            "scores": [
                {"step_index": t.step_index, "value": s.value, "rule": s.rule_fired.value}
                for t, s in zip(trace.triads, scores)
            ],
            "logic_loss": logic_loss(trace),
        })
    return EXIT_OK


def _load_dataset(dataset_dir: Path):
    world_path = dataset_dir / "world.json"
    cases_path = dataset_dir / "cases.jsonl"
    world = world_from_json(json.loads(world_path.read_text(encoding="utf-8")))
    cases = [
        case_from_json(json.loads(line))
        for line in cases_path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not cases:
        raise ConfigError(f"no cases found in {cases_path}")
    return world, cases


def _policy_from_checkpoint(path, config: RunConfig, world):
    policy = make_policy(config.train_config(), world)
    apply_tensors(policy, load_tensors(path))
    return policy


def cmd_eval(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    world, cases = _load_dataset(Path(args.dataset))
    synonyms = _load_synonyms(config)
    policy = _policy_from_checkpoint(args.checkpoint, config, world)
    outcome = evaluate_cases(policy, world, cases, steps=config.steps_per_rollout,
                             synonyms=synonyms, zero_vision=config.zero_vision)

    mcnemar_stat = None
    bootstrap_p = None
    if args.baseline:
        baseline_policy = _policy_from_checkpoint(args.baseline, config, world)
        base = evaluate_cases(baseline_policy, world, cases, steps=config.steps_per_rollout,
                              synonyms=synonyms, zero_vision=config.zero_vision)
        only_ours = sum(1 for a, b in zip(outcome.cases, base.cases) if a.correct and not b.correct)
        only_base = sum(1 for a, b in zip(outcome.cases, base.cases) if b.correct and not a.correct)
        mcnemar_stat = mcnemar(only_ours, only_base)
        bootstrap_p = paired_bootstrap(
            [c.rouge_f1 for c in outcome.cases], [c.rouge_f1 for c in base.cases],
            n_resamples=1000, seed=config.seed)

    report = EvalReport(
        accuracy=outcome.accuracy,
        rouge_l_f1=outcome.mean_rouge_f1,
        n_cases=len(outcome.cases),
        mcnemar_stat=mcnemar_stat,
        bootstrap_p=bootstrap_p,
    )
    _say(f"evaluated {report.n_cases} cases: accuracy {report.accuracy:.3f}, "
         f"rouge_l {report.rouge_l_f1:.3f}")
    _emit(report.to_json())
    return EXIT_OK


def _inferred_facts(trace):
    derived = set()
    facts = set()
    for triad in trace.triads:
        for premise in (triad.major, triad.minor):
            if premise not in derived:
                facts.add(premise)
        derived.add(triad.conclusion)
    return facts


def _facts_from_file(path):
    facts = set()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            facts.add(parse_proposition(line))
    return facts


def cmd_render(args) -> int:
    text = Path(args.rollout_file).read_text(encoding="utf-8")
    traces = parse_rollout_stream(text)
    if not 0 <= args.trace_index < len(traces):
        raise ConfigError(
            f"trace index {args.trace_index} out of range, file has {len(traces)} traces")
    trace = traces[args.trace_index]
    facts = _facts_from_file(args.facts) if args.facts else _inferred_facts(trace)
    tree = build_tree(trace, facts)
    scores = {t.step_index: verify_triad(t).value for t in trace.triads}
    if args.format == "dot":
        payload = tree_to_dot(tree, scores)
    else:
        doc = tree_to_json(tree)
        doc["scores"] = {str(k): v for k, v in scores.items()}
        payload = dumps_json(doc) + "\n"
    if args.tree_out:
        Path(args.tree_out).write_text(payload, encoding="utf-8")
        _say(f"wrote {args.format} tree to {args.tree_out}")
    else:
        sys.stdout.write(payload)
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------


_OVERRIDE_KEYS = (
    "seed", "epochs", "lambda_logic", "lambda_align", "w_acc", "w_logic", "w_ground",
    "rollouts_per_case", "steps_per_rollout", "noise_sigma", "n_cases", "world_seed",
    "case_seed", "synonyms", "zero_vision", "learning_rate",
)


def _overrides(args) -> dict:
    out = {}
    for key in _OVERRIDE_KEYS:
        if hasattr(args, key):
            out[key] = getattr(args, key)
    if out.get("zero_vision") is False:
        out["zero_vision"] = None  # only an explicit flag overrides the file
    return out


def _add_common(parser: argparse.ArgumentParser, *, with_out: bool) -> None:
    parser.add_argument("--config", default=None, help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=None, help="master RNG seed")
    if with_out:
        parser.add_argument("--out", required=True, help="output directory")


def _add_train_knobs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--rollouts", dest="rollouts_per_case", type=int, default=None,
                        help="rollouts per case")
    parser.add_argument("--steps", dest="steps_per_rollout", type=int, default=None,
                        help="reasoning steps per rollout")
    parser.add_argument("--lambda-logic", dest="lambda_logic", type=float, default=None)
    parser.add_argument("--lambda-align", dest="lambda_align", type=float, default=None)
    parser.add_argument("--w-acc", dest="w_acc", type=float, default=None)
    parser.add_argument("--w-logic", dest="w_logic", type=float, default=None)
    parser.add_argument("--w-ground", dest="w_ground", type=float, default=None)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    parser.add_argument("--zero-vision", dest="zero_vision", action="store_true", default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltrk",
        description="Synthetic multimodal diagnosis with verifiable reasoning chains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write a dataset directory (world.json + cases.jsonl)")
    _add_common(p_synth, with_out=True)
    p_synth.add_argument("--cases", dest="n_cases", type=int, default=None)
    p_synth.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    p_synth.add_argument("--world-seed", dest="world_seed", type=int, default=None)
    p_synth.add_argument("--case-seed", dest="case_seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a policy; write checkpoint and report")
    _add_common(p_train, with_out=True)
    _add_train_knobs(p_train)
    p_train.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    p_train.add_argument("--world-seed", dest="world_seed", type=int, default=None)
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.set_defaults(func=cmd_train)

    p_verify = sub.add_parser("verify", help="score the triads of each rollout in a file")
    p_verify.add_argument("rollout_file")
    p_verify.set_defaults(func=cmd_verify)

    p_eval = sub.add_parser("eval", help="greedy evaluation of a checkpoint on a dataset")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("dataset")
    _add_common(p_eval, with_out=False)
    p_eval.add_argument("--baseline", default=None, help="second checkpoint for significance tests")
    p_eval.add_argument("--synonyms", default=None, help="surface<TAB>canonical table file")
    p_eval.add_argument("--zero-vision", dest="zero_vision", action="store_true", default=False)
    p_eval.set_defaults(func=cmd_eval)

    p_render = sub.add_parser("render", help="build and export the logic tree of a rollout")
    p_render.add_argument("rollout_file")
    p_render.add_argument("--format", choices=("dot", "json"), default="dot")
    p_render.add_argument("--out", dest="tree_out", default=None, help="output file (default stdout)")
    p_render.add_argument("--facts", default=None,
                          help="file of input facts, one proposition per line; inferred if absent")
    p_render.add_argument("--trace-index", dest="trace_index", type=int, default=0)
    p_render.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        _say(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except OSError as exc:
        _say(f"i/o error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
