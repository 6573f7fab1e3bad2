"""Command-line interface: outputs, exit codes, determinism across runs and threads."""

import json
import os
import subprocess
import sys

import pytest

TINY = [
    "--seed", "5",
    "--epochs", "2",
]
TINY_FILE = """\
# small run for command tests
epochs = 2
cases_per_epoch = 4
rollouts_per_case = 2
steps_per_rollout = 2
n_atoms = 8
n_rules = 6
n_classes = 3
visual_dim = 6
hidden_dim = 8
n_heads = 2
n_cases = 6
"""

GOOD_ROLLOUT = """\
CASE: demo
STEP 0: MAJOR: if a then b ; MINOR: a ; CONCLUSION: b
STEP 1: MAJOR: if b then c ; MINOR: b ; CONCLUSION: c
ANSWER: c
"""

WEAK_ROLLOUT = """\
STEP 0: MAJOR: if a then b ; MINOR: a ; CONCLUSION: b
STEP 1: MAJOR: if d then b ; MINOR: b ; CONCLUSION: d
ANSWER: d
"""


def run_cli(*argv, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run(
        [sys.executable, "-m", "ltrk", *argv],
        capture_output=True, text=True, env=env, cwd=cwd,
    )


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_FILE, encoding="utf-8")
    return path


# --- synth -----------------------------------------------------------------------


def test_synth_writes_dataset(tmp_path, tiny_cfg):
    out = tmp_path / "data"
    result = run_cli("synth", "--config", str(tiny_cfg), "--seed", "5", "--out", str(out))
    assert result.returncode == 0, result.stderr
    payload = json.loads(result.stdout)
    assert payload["cases"] == 6
    assert (out / "world.json").is_file()
    lines = (out / "cases.jsonl").read_text().splitlines()
    assert len(lines) == 6


def test_synth_is_byte_deterministic(tmp_path, tiny_cfg):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = run_cli("synth", "--config", str(tiny_cfg), "--seed", "9", "--out", str(out))
        assert result.returncode == 0
        outs.append((out / "world.json").read_bytes() + (out / "cases.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_synth_unwritable_out_is_io_error(tmp_path, tiny_cfg):
    blocked = tmp_path / "blocked"
    blocked.write_text("a file, not a directory")
    result = run_cli("synth", "--config", str(tiny_cfg), "--out", str(blocked / "x"))
    assert result.returncode == 3
    assert result.stderr.strip()


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_real_knob = 3\n")
    result = run_cli("synth", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert result.returncode == 2
    assert "not_a_real_knob" in result.stderr


# --- train ------------------------------------------------------------------------


def test_train_writes_report_and_config_echo(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    result = run_cli("train", "--config", str(tiny_cfg), "--seed", "5", "--out", str(out),
                     "--lambda-logic", "0", "--w-logic", "0", "--w-acc", "0.9",
                     "--w-ground", "0.1")
    assert result.returncode == 0, result.stderr
    report_lines = (out / "report.jsonl").read_text().splitlines()
    assert len(report_lines) == 2  # exactly `epochs` lines
    header = json.loads((out / "config.json").read_text())
    assert header["lambda_logic"] == 0.0
    assert header["w_logic"] == 0.0
    final = json.loads(result.stdout)
    assert final["epoch"] == 2
    assert (out / "checkpoint.ltrk").is_file()


def test_train_resume_continues_epoch_numbering(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    first = run_cli("train", "--config", str(tiny_cfg), "--seed", "5", "--out", str(out))
    assert first.returncode == 0, first.stderr
    second = run_cli("train", "--config", str(tiny_cfg), "--seed", "5", "--out", str(out),
                     "--resume", str(out / "checkpoint.ltrk"))
    assert second.returncode == 0, second.stderr
    assert json.loads(second.stdout)["epoch"] == 4
    lines = (out / "report.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3, 4]


def test_train_numeric_blowup_exits_4(tmp_path, tiny_cfg):
    result = run_cli("train", "--config", str(tiny_cfg), "--seed", "5",
                     "--out", str(tmp_path / "run"), "--learning-rate", "1e12",
                     "--epochs", "6")
    assert result.returncode == 4
    assert "numeric" in result.stderr.lower()


def test_train_determinism_across_runs_and_threads(tmp_path, tiny_cfg):
    blobs = []
    for name, threads in (("t1", "1"), ("t1b", "1"), ("t4", "4")):
        out = tmp_path / name
        result = run_cli("train", "--config", str(tiny_cfg), "--seed", "7",
                         "--out", str(out), env_extra={"LTRK_THREADS": threads})
        assert result.returncode == 0, result.stderr
        blobs.append((
            (out / "checkpoint.ltrk").read_bytes(),
            (out / "report.jsonl").read_bytes(),
            result.stdout,
        ))
    assert blobs[0] == blobs[1]
    assert blobs[0] == blobs[2]


# --- verify ------------------------------------------------------------------------


def test_verify_valid_chain(tmp_path):
    path = tmp_path / "good.rollout"
    path.write_text(GOOD_ROLLOUT)
    result = run_cli("verify", str(path))
    assert result.returncode == 0
    payload = json.loads(result.stdout)
    assert payload["logic_loss"] == 0.0
    assert [s["rule"] for s in payload["scores"]] == ["modus_ponens", "modus_ponens"]


def test_verify_low_scores_still_exit_zero(tmp_path):
    path = tmp_path / "weak.rollout"
    path.write_text(WEAK_ROLLOUT)
    result = run_cli("verify", str(path))
    assert result.returncode == 0
    payload = json.loads(result.stdout)
    assert payload["logic_loss"] == 0.25
    assert payload["scores"][1]["value"] == 0.5


def test_verify_malformed_step_exits_2(tmp_path):
    path = tmp_path / "bad.rollout"
    path.write_text("STEP 0: MAJOR: a ; CONCLUSION: b\nANSWER: x\n")
    result = run_cli("verify", str(path))
    assert result.returncode == 2
    assert "line 1" in result.stderr


def test_verify_multiple_traces_one_json_line_each(tmp_path):
    path = tmp_path / "multi.rollout"
    path.write_text(GOOD_ROLLOUT + "\n" + WEAK_ROLLOUT)
    result = run_cli("verify", str(path))
    assert result.returncode == 0
    lines = [json.loads(l) for l in result.stdout.splitlines()]
    assert len(lines) == 2
    assert lines[1]["logic_loss"] == 0.25


# --- eval --------------------------------------------------------------------------


@pytest.fixture()
def trained_setup(tmp_path, tiny_cfg):
    data = tmp_path / "data"
    run = tmp_path / "run"
    assert run_cli("synth", "--config", str(tiny_cfg), "--seed", "5",
                   "--out", str(data)).returncode == 0
    assert run_cli("train", "--config", str(tiny_cfg), "--seed", "5",
                   "--out", str(run)).returncode == 0
    return tiny_cfg, data, run / "checkpoint.ltrk"


def test_eval_emits_report(trained_setup):
    cfg, data, ckpt = trained_setup
    result = run_cli("eval", str(ckpt), str(data), "--config", str(cfg))
    assert result.returncode == 0, result.stderr
    payload = json.loads(result.stdout)
    assert set(payload) == {"accuracy", "rouge_l_f1", "n_cases"}
    assert payload["n_cases"] == 6


def test_eval_self_baseline_is_null_comparison(trained_setup):
    cfg, data, ckpt = trained_setup
    result = run_cli("eval", str(ckpt), str(data), "--config", str(cfg),
                     "--baseline", str(ckpt))
    assert result.returncode == 0, result.stderr
    payload = json.loads(result.stdout)
    assert payload["mcnemar_stat"] == 0.0
    assert payload["bootstrap_p"] == 1.0


def test_eval_shape_mismatch_reports_dimensions(tmp_path, trained_setup):
    cfg, data, ckpt = trained_setup
    bigger = tmp_path / "bigger.cfg"
    bigger.write_text(TINY_FILE.replace("hidden_dim = 8", "hidden_dim = 16"))
    result = run_cli("eval", str(ckpt), str(data), "--config", str(bigger))
    assert result.returncode == 2
    assert "16" in result.stderr and "8" in result.stderr


def test_eval_is_byte_deterministic(trained_setup):
    cfg, data, ckpt = trained_setup
    outs = {
        run_cli("eval", str(ckpt), str(data), "--config", str(cfg),
                env_extra={"LTRK_THREADS": threads}).stdout
        for threads in ("1", "1", "4")
    }
    assert len(outs) == 1


# --- render -------------------------------------------------------------------------


def test_render_dot_structure(tmp_path):
    path = tmp_path / "good.rollout"
    path.write_text(GOOD_ROLLOUT)
    result = run_cli("render", str(path), "--format", "dot")
    assert result.returncode == 0
    assert result.stdout.startswith("digraph")
    assert result.stdout.count("->") == 4
    assert "doublecircle" in result.stdout


def test_render_json_round_trips(tmp_path):
    from ltrk.logic import tree_from_json

    path = tmp_path / "good.rollout"
    path.write_text(GOOD_ROLLOUT)
    out = tmp_path / "tree.json"
    result = run_cli("render", str(path), "--format", "json", "--out", str(out))
    assert result.returncode == 0
    doc = json.loads(out.read_text())
    tree = tree_from_json(doc)
    assert doc["scores"] == {"0": 1.0, "1": 1.0}
    rendered_again = run_cli("render", str(path), "--format", "json")
    assert tree_from_json(json.loads(rendered_again.stdout)) == tree


def test_render_dangling_premise_exits_2(tmp_path):
    path = tmp_path / "good.rollout"
    path.write_text(GOOD_ROLLOUT)
    facts = tmp_path / "facts.txt"
    facts.write_text("if a then b\na\n")  # missing the second rule
    result = run_cli("render", str(path), "--facts", str(facts))
    assert result.returncode == 2
    assert "if b then c" in result.stderr


def test_missing_file_is_io_error():
    result = run_cli("verify", "/nonexistent/rollout.txt")
    assert result.returncode == 3


def test_usage_error_exits_2():
    result = run_cli("render")
    assert result.returncode == 2
