import json
import subprocess
import sys

import numpy as np
import pytest

from pond import cli
from pond.model import init_model, load_model
from pond.train import RunConfig, load_state

TINY_RUN = dict(m=3, experts=2, d_model=8, heads=2, d_ff=16, blocks=1, patch_len=4, stride=4, generator_hidden=8,
                epochs=1, steps=3, shots=4, batch_size=8)
TINY_SPEC = dict(M=4, G=2, K=2, n=2, L=16, freqs=[2, 5], per_domain=10, sigma=0.3)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"synthetic": TINY_SPEC, "run": TINY_RUN,
                                "experiment": {"seeds": [0], "counts": [2, 4]}}))
    return str(path)


@pytest.fixture
def pipeline(tmp_path, config, monkeypatch):
    monkeypatch.delenv("POND_SEED", raising=False)
    d = tmp_path / "data"
    assert cli.main(["gen-data", "--config", config, "--out", str(d)]) == 0
    assert cli.main(["pretrain", "--config", config, "--data", str(d), "--out", str(tmp_path / "f.pondck")]) == 0
    assert cli.main(["tune", "--config", config, "--data", str(d), "--checkpoint", str(tmp_path / "f.pondck"),
                     "--out", str(tmp_path / "tuned.pondck")]) == 0
    assert cli.main(["adapt", "--state", str(tmp_path / "tuned.pondck"), "--target", str(d / "T.pondds"),
                     "--out", str(tmp_path / "adapt.json")]) == 0
    return tmp_path


def test_gen_data_is_byte_identical(tmp_path, config, monkeypatch):
    monkeypatch.delenv("POND_SEED", raising=False)
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--config", config, "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.pondds"))
    assert len(files) == TINY_SPEC["M"] + 1
    for f in files + ["manifest.json"]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_usage_errors(tmp_path, config):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data"])
    assert exc.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"run": {"learning_rate": 1}}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text(json.dumps({"run": {"delta": 2.0}}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_io_errors(tmp_path, config):
    assert cli.main(["pretrain", "--config", config, "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "f.pondck")]) == 3
    (tmp_path / "junk.pondck").write_bytes(b"garbage!")
    assert cli.main(["eval", "--state", str(tmp_path / "junk.pondck"), "--target", str(tmp_path / "junk.pondck"),
                     "--out", str(tmp_path / "m.json")]) == 3


def test_subprocess_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pond.cli", "eval", "--state", str(tmp_path / "nope"),
                           "--target", str(tmp_path / "nope"), "--out", str(tmp_path / "m.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 3 and "pond:" in proc.stderr


def test_pretrain_zero_epochs_is_init(tmp_path, config, monkeypatch):
    monkeypatch.delenv("POND_SEED", raising=False)
    d = tmp_path / "data"
    cli.main(["gen-data", "--config", config, "--out", str(d)])
    assert cli.main(["pretrain", "--config", config, "--data", str(d), "--epochs", "0",
                     "--out", str(tmp_path / "f.pondck")]) == 0
    model = load_model(tmp_path / "f.pondck")
    run = RunConfig(**TINY_RUN)
    ref = init_model(run.model_config(2, 16, 2), seed=run.seed_for("model"))
    assert all(np.array_equal(model.params[k], v) for k, v in ref.params.items())
    hist = json.loads((tmp_path / "f.history.json").read_text())
    assert hist["history"]["optimizer_steps"] == 0


def test_full_chain(pipeline, config):
    tmp = pipeline
    hist = json.loads((tmp / "tuned.history.json").read_text())["history"]
    assert len(hist) == TINY_RUN["steps"]
    adapt = json.loads((tmp / "adapt.json").read_text())
    table = adapt["similarities"]
    assert adapt["selected_source"] == max(table, key=lambda k: (table[k], -sorted(table).index(k)))
    assert len(adapt["shots"]) == TINY_RUN["shots"]
    assert cli.main(["eval", "--state", str(tmp / "adapt.pondck"), "--target", str(tmp / "data" / "T.pondds"),
                     "--out", str(tmp / "metrics.json"), "--scenario", "demo"]) == 0
    metrics = json.loads((tmp / "metrics.json").read_text())
    cli.validate(metrics, "metrics")
    assert metrics["scenario"] == "demo" and len(metrics["confusion"]) == TINY_SPEC["K"]
    assert cli.main(["heatmap", "--state", str(tmp / "adapt.pondck"), "--out", str(tmp / "h.csv")]) == 0
    lines = (tmp / "h.csv").read_text().splitlines()
    assert len(lines) == TINY_SPEC["M"] + 1 and all(len(r.split(",")) == TINY_SPEC["M"] for r in lines)
    assert json.loads((tmp / "h.json").read_text())["domain_ids"] == lines[0].split(",")


def test_tune_single_step(tmp_path, pipeline):
    cfg = tmp_path / "one.json"
    cfg.write_text(json.dumps({"synthetic": TINY_SPEC, "run": {**TINY_RUN, "steps": 1}}))
    assert cli.main(["tune", "--config", str(cfg), "--data", str(tmp_path / "data"),
                     "--checkpoint", str(tmp_path / "f.pondck"), "--out", str(tmp_path / "one.pondck")]) == 0
    assert len(json.loads((tmp_path / "one.history.json").read_text())["history"]) == 1


def test_eval_requires_adapted_state(pipeline):
    tmp = pipeline
    assert cli.main(["eval", "--state", str(tmp / "tuned.pondck"), "--target", str(tmp / "data" / "T.pondds"),
                     "--out", str(tmp / "m.json")]) == 3


def test_tune_rejects_geometry_mismatch(tmp_path, pipeline):
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps({"synthetic": TINY_SPEC, "run": {**TINY_RUN, "m": 4}}))
    assert cli.main(["tune", "--config", str(cfg), "--data", str(tmp_path / "data"),
                     "--checkpoint", str(tmp_path / "f.pondck"), "--out", str(tmp_path / "x.pondck")]) == 3


def test_adapt_writes_requested_state(pipeline):
    tmp = pipeline
    assert cli.main(["adapt", "--state", str(tmp / "tuned.pondck"), "--target", str(tmp / "data" / "T.pondds"),
                     "--out", str(tmp / "a2.json"), "--state-out", str(tmp / "custom.pondck")]) == 0
    assert load_state(tmp / "custom.pondck").history["selected"] == json.loads(
        (tmp / "a2.json").read_text())["selected_source"]


def test_pond_seed_override(tmp_path, config):
    cfg = cli.load_config(config, env={"POND_SEED": "7"})
    assert cfg.run.seed == 7 and cfg.spec.seed == 7 and cfg.seeds == [7]
    assert cli.load_config(config, env={}).run.seed == 0
    with pytest.raises(cli.ConfigError):
        cli.load_config(config, env={"POND_SEED": "x"})


def test_presets(tmp_path):
    path = tmp_path / "desk.json"
    path.write_text(json.dumps({"preset": "desk", "run": {"steps": 5}}))
    cfg = cli.load_config(path, env={})
    assert cfg.run.steps == 5 and cfg.run.eta == 0.2 and cfg.run.discrimination_sim == "cosine"
    assert cli.load_config(None, env={}).run == RunConfig()


def test_sweep_and_ablate(tmp_path, config, monkeypatch):
    monkeypatch.delenv("POND_SEED", raising=False)
    assert cli.main(["sweep-sources", "--config", config, "--out", str(tmp_path / "s.json")]) == 0
    doc = json.loads((tmp_path / "s.json").read_text())
    assert [r["count"] for r in doc["table"]] == [2, 4]
    assert cli.main(["ablate", "--config", config, "--out", str(tmp_path / "a.json")]) == 0
    assert len(json.loads((tmp_path / "a.json").read_text())["summary"]) == 6


def test_gradcheck_command(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS ") for line in out)
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True


def test_flexdemo_command(tmp_path, monkeypatch):
    monkeypatch.delenv("POND_SEED", raising=False)
    cfg = tmp_path / "flex.json"
    cfg.write_text(json.dumps({"run": {"d_model": 8, "heads": 2, "d_ff": 16, "blocks": 1, "generator_hidden": 8},
                               "experiment": {"seeds": [0], "flex_budget": 100, "flex_conflicting": False}}))
    assert cli.main(["flexdemo", "--config", str(cfg), "--out", str(tmp_path / "f.json")]) == 0
    doc = json.loads((tmp_path / "f.json").read_text())
    assert len(doc["runs"]) == 1 and doc["generator_fitted"] == 1
