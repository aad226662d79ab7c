import json

import numpy as np
import pytest

from deformux import cli, config, deform, train
from deformux.checkpoint import load_checkpoint


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """16^3 dataset, a two-step config and one trained run directory."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", "--count", "10", "--size", "16", "--out", str(root / "data")]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps({"preset": "desk-spheres",
                               "train": {"patch": [16, 16, 16], "steps": 2, "val_every": 1, "workers": 1}}))
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data" / "manifest.json"),
                     "--out", str(run)]) == 0
    return root, cfg, run


def test_help_lists_flags_with_defaults(capsys):
    for cmd in cli.COMMANDS:
        with pytest.raises(SystemExit) as e:
            cli.main([cmd, "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        assert "--seed" in out or cmd == "generate"
        assert "default" in out
    with pytest.raises(SystemExit):
        cli.main(["bench", "--help"])
    assert "(default: 32)" in capsys.readouterr().out


def test_unknown_command_and_bad_choice_exit_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["nosuch"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["gradcheck", "--module", "nosuch"])
    assert e.value.code == 2


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err
    (tmp_path / "m.json").write_text("[]")
    assert cli.main(["eval", "--data", str(tmp_path / "m.json"), "--checkpoint", str(tmp_path / "x.bin")]) == 2
    assert cli.main(["train", "--config", "nosuch-preset", "--data", str(tmp_path / "m.json")]) == 2


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--module", "ddc", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "offsets" in out
    assert cli.main(["gradcheck", "--module", "loss", "--trials", "2", "--precision", "single"]) == 0


def test_bench_reports_and_flags_mismatch(tmp_path, monkeypatch, capsys):
    args = ["bench", "--size", "8", "--channels", "4", "--repeat", "1", "--threads", "2"]
    assert cli.main(args + ["--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    assert report["threads_bit_identical"] and max(report["agreement"].values()) < 1e-10
    assert report["full_config"]["params"] == 55_803_530

    real = deform.ddc_forward

    def skewed(*a, **kw):
        out = real(*a, **kw)
        return out if kw.get("naive") else out + 1e-6

    monkeypatch.setattr(deform, "ddc_forward", skewed)
    assert cli.main(args + ["--no-naive"]) == 1
    assert "forward" in capsys.readouterr().err


def test_train_outputs(small_run):
    _, _, run = small_run
    for f in ("manifest.json", "events.jsonl", "checkpoint.bin", "final.bin", "report.json"):
        assert (run / f).exists(), f
    m = json.loads((run / "manifest.json").read_text())
    assert m["config_hash"] == config.config_hash(m["config"]) and m["command"] == "train"


def test_infer_then_eval_matches_in_process(small_run, tmp_path):
    root, cfg, run = small_run
    data = str(root / "data" / "manifest.json")
    assert cli.main(["infer", "--config", str(cfg), "--data", data, "--checkpoint", str(run / "final.bin"),
                     "--out", str(tmp_path / "inf")]) == 0
    assert cli.main(["eval", "--config", str(cfg), "--data", data,
                     "--predictions", str(tmp_path / "inf" / "predictions" / "manifest.json"),
                     "--out", str(tmp_path / "ev1")]) == 0
    assert cli.main(["eval", "--config", str(cfg), "--data", data, "--checkpoint", str(run / "final.bin"),
                     "--out", str(tmp_path / "ev2")]) == 0
    a = json.loads((tmp_path / "ev1" / "eval.json").read_text())
    b = json.loads((tmp_path / "ev2" / "eval.json").read_text())
    model, _ = load_checkpoint(run / "final.bin")
    ref = train.evaluate(model, train.Dataset.from_manifest(data)["test"], (16, 16, 16))
    assert a == b == json.loads(json.dumps(ref))


def test_config_resolution(tmp_path):
    cfg = config.resolve("desk-tubes", train={"steps": 3})
    assert cfg["train"]["steps"] == 3 and cfg["data"]["kind"] == "tubes"
    with pytest.raises(KeyError):
        config.resolve({"train": {"bogus": 1}})
    assert config.config_hash(config.resolve("desk")) == config.config_hash(config.resolve("desk-spheres"))
    assert config.resolve("full")["network"]["decoder"] == "unetr"


def test_threads_flag_sets_kernel_threads():
    prev = deform.get_threads()
    try:
        cli.main(["gradcheck", "--module", "loss", "--trials", "1", "--threads", "2"])
        assert deform.get_threads() == 2
    finally:
        deform.set_threads(prev)
