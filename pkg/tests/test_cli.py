"""End-to-end tests of the command-line stages."""

import pytest

from pyphantomrl import pipeline
from pyphantomrl.checkpoint import load_checkpoint
from pyphantomrl.cli import run_cli
from pyphantomrl.config import Config
from pyphantomrl.constants import LOCK_NAME
from pyphantomrl.utils import read_csv


def _run(command, overrides, *extra):
    return run_cli([command, *extra, *overrides])


def _with(overrides, **values):
    return overrides + [f"{key}={value}" for key, value in values.items()]


def _output(overrides, tmp_path, name):
    return [o for o in overrides if not o.startswith("output_dir=")] + [f"output_dir={tmp_path / name}"]


def test_phantom_gen_is_byte_identical(tmp_path, tiny_overrides):
    first = _output(tiny_overrides, tmp_path, "a")
    second = _output(tiny_overrides, tmp_path, "b")
    assert _run("phantom-gen", first) == 0
    assert _run("phantom-gen", second) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "dataset").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b" / "dataset").rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_unknown_key_exits_3_without_output(tmp_path):
    out = tmp_path / "run"
    assert run_cli(["phantom-gen", "foo=1", f"output_dir={out}"]) == 3
    assert not out.exists()


def test_unknown_subcommand_exits_2():
    assert run_cli(["no-such-stage"]) == 2


def test_invalid_sample_model_exits_2(tiny_overrides):
    assert _run("sample", tiny_overrides, "--model", "other", "--report", "no device .") == 2


def test_locked_output_exits_7(tmp_path, tiny_overrides):
    out = tmp_path / "run"
    out.mkdir()
    (out / LOCK_NAME).write_text("1234")
    assert _run("phantom-gen", tiny_overrides) == 7
    assert not (out / "dataset").exists()


def test_stage_without_inputs_fails(tiny_overrides):
    assert _run("pretrain", tiny_overrides) != 0


def test_full_pipeline(tmp_path, tiny_overrides):
    """Every stage runs on the tiny profile and leaves its artifacts behind."""
    out = tmp_path / "run"
    overrides = _with(tiny_overrides, n_test=24, eval_reports=20)
    for command in ["phantom-gen", "pretrain", "fit-rewards", "finetune"]:
        assert _run(command, overrides) == 0, command
    assert (out / "checkpoints" / "generator.cxrl").exists()
    assert (out / "checkpoints" / "rewards.cxrl").exists()
    assert (out / "checkpoints" / "policy.cxrl").exists()
    assert [r["step"] for r in read_csv(out / "logs" / "finetune.csv")] == ["0", "1"]

    assert _run("sample", overrides, "-r", "no device .", "-r", "small opacity in the left lung .") == 0
    assert sorted(p.name for p in (out / "samples").iterdir()) == ["0.pgm", "1.pgm"]

    assert _run("score", overrides) == 0
    assert len(read_csv(out / "scores.csv")) == 20

    assert _run("eval", overrides) == 0
    rows = read_csv(out / "metrics.csv")
    assert [r["name"] for r in rows] == ["anchor", "finetuned"]
    assert rows[0]["dataset_hash"] == rows[1]["dataset_hash"]
    assert not (out / LOCK_NAME).exists()


def test_finetune_resume_continues_log(tmp_path, tiny_overrides):
    out = tmp_path / "run"
    for command in ["phantom-gen", "pretrain", "fit-rewards", "finetune"]:
        assert _run(command, tiny_overrides) == 0, command
    assert _run("finetune", _with(tiny_overrides, rl_steps=3), "--resume") == 0
    assert [r["step"] for r in read_csv(out / "logs" / "finetune.csv")] == ["0", "1", "2"]


def test_dataset_mismatch_exits_6(tmp_path, tiny_overrides):
    for command in ["phantom-gen", "pretrain", "fit-rewards"]:
        assert _run(command, tiny_overrides) == 0, command
    reseeded = _with(tiny_overrides, seed=1)
    assert _run("phantom-gen", reseeded) == 0
    assert _run("finetune", reseeded) == 6


@pytest.mark.slow
def test_ablation_table(tmp_path, tiny_overrides):
    out = tmp_path / "run"
    overrides = _with(tiny_overrides, n_test=24, eval_reports=20)
    for command in ["phantom-gen", "pretrain", "fit-rewards"]:
        assert _run(command, overrides) == 0, command
    assert _run("ablate", overrides, "--variants") == 0
    names = [r["name"] for r in read_csv(out / "ablation.csv")]
    assert names == ["anchor", "+r_align", "+r_diag", "+r_consist", "combined", "w/o ACE", "w/o comparative"]


@pytest.mark.slow
def test_pipeline_is_deterministic(tmp_path, tiny_overrides):
    """Two full runs with one seed give identical policy checkpoints and byte-identical metrics."""
    for name in ["a", "b"]:
        overrides = _with(_output(tiny_overrides, tmp_path, name), n_test=24, eval_reports=20)
        for command in ["phantom-gen", "pretrain", "fit-rewards", "finetune", "eval"]:
            assert _run(command, overrides) == 0, command
    first = load_checkpoint(tmp_path / "a" / "checkpoints" / "policy.cxrl")
    second = load_checkpoint(tmp_path / "b" / "checkpoints" / "policy.cxrl")
    assert first.params_hash == second.params_hash
    assert first.config.config_hash() == second.config.config_hash()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def _smoke_run(directory) -> pipeline.EvalResult:
    cfg = Config.smoke_profile(output_dir=str(directory))
    pipeline.generate_dataset(cfg)
    pipeline.run_pretrain(cfg)
    pipeline.run_fit_rewards(cfg)
    pipeline.run_finetune(cfg)
    return pipeline.run_eval(cfg)


@pytest.mark.slow
def test_smoke_profile_beats_anchor(tmp_path):
    """Smoke-profile fine-tuning improves every reward on held-out reports without losing fidelity."""
    result = _smoke_run(tmp_path / "a")
    anchor, tuned = result.reports
    assert (tuned.mean_r_align - anchor.mean_r_align) / abs(anchor.mean_r_align) >= 0.3
    assert all(p < 0.05 for p in result.p_values.values()), result.p_values
    assert tuned.frechet_distance <= 1.1 * anchor.frechet_distance
    assert tuned.ssim_diversity <= anchor.ssim_diversity + 0.05

    _smoke_run(tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
