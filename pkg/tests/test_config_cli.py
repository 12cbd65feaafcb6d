import json
import logging
import os
import subprocess
import sys

import pytest

from ldct_ldm.cli import main
from ldct_ldm.config import DEFAULTS, fingerprint, load_config, parse_override
from ldct_ldm.errors import ConfigError
from ldct_ldm.pipeline import ABLATION_ORDER, ae_train_config


def test_defaults_validate():
    cfg = load_config()
    assert cfg == DEFAULTS


def test_override_and_seed(tiny_config):
    cfg = load_config(tiny_config, ["ldm.steps=7", "sampler.kind=ddpm"], seed=5)
    assert cfg["ldm"]["steps"] == 7 and cfg["sampler"]["kind"] == "ddpm"
    assert {cfg["data"]["seed"], cfg["ae"]["seed"], cfg["ldm"]["seed"], cfg["sampler"]["seed"]} == {5}
    assert cfg["data"]["size"] == 32


def test_env_report_root():
    assert load_config(env={"LDCT_REPORT_ROOT": "/tmp/r"})["paths"]["reports"] == "/tmp/r"


@pytest.mark.parametrize("override", ["ldm.nope=1", "ae.f=3", "sampler.kind=euler", "ae.steps=1.5",
                                      "data.split=[0.5,0.5]", "novalue", "ldm.transformer_levels=[2]"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_parse_override_yaml_values():
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    assert parse_override("x=null") == (["x"], None)


def test_fingerprint_stable():
    a = load_config()
    b = load_config(overrides=["eval.timing_repeats=1"])
    assert fingerprint(a, "data", "ae") == fingerprint(b, "data", "ae")
    assert fingerprint(a, "eval") != fingerprint(b, "eval")


def test_p_ae_baseline_config():
    cfg = load_config()
    on, off = ae_train_config(cfg, True), ae_train_config(cfg, False)
    assert on.loss.pl.final_value == 0.1 and on.loss.kl.ramp_end == 1000
    assert off.loss.pl.final_value == 0.0 and off.loss.kl.ramp_end == 0 and off.loss.kl.final_value == 1e-6
    assert on.model.f == 4


def _run(tiny_config, *args):
    return main([*args, "--config", str(tiny_config)])


def test_pipeline_via_cli(tmp_path, tiny_config, monkeypatch, caplog, capsys):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("LDCT_REPORT_ROOT", raising=False)
    caplog.set_level(logging.INFO)

    assert _run(tiny_config, "train-ae") == 3  # no dataset yet
    assert _run(tiny_config, "gen-data") == 0
    manifest = (tmp_path / "run/dataset/manifest.json").read_text()
    assert len(json.loads(manifest)["items"]) == 8
    assert _run(tiny_config, "gen-data") == 2  # refuses without --force
    assert _run(tiny_config, "gen-data", "--force") == 0
    assert (tmp_path / "run/dataset/manifest.json").read_text() == manifest

    caplog.clear()
    assert _run(tiny_config, "train-ldm") == 3
    assert "run/checkpoints/ae.ckpt" in caplog.text

    assert _run(tiny_config, "train-ae") == 0
    assert _run(tiny_config, "train-ae") == 2
    ae_bytes = (tmp_path / "run/checkpoints/ae.ckpt").read_bytes()
    assert _run(tiny_config, "train-ae", "--force") == 0
    assert (tmp_path / "run/checkpoints/ae.ckpt").read_bytes() == ae_bytes
    assert _run(tiny_config, "train-ldm") == 0

    assert _run(tiny_config, "denoise", "--verbose") == 0
    out = tmp_path / "run/reports/denoised-ddim"
    ids = [it["id"] for it in json.loads((out / "manifest.json").read_text())["items"]]
    test_ids = [it["id"] for it in json.loads(manifest)["items"]
                if it["id"][:4] in json.loads(manifest)["splits"]["test"]]
    assert ids == test_ids
    trace = (tmp_path / "run/reports/trace-ddim.log").read_text().splitlines()
    assert len(trace) == 3 and trace[0].startswith("t=50 mean_abs=")
    timing = json.loads((tmp_path / "run/reports/timing-ddim.json").read_text())
    assert timing["kind"] == "ddim" and timing["n_images"] == len(ids)

    assert _run(tiny_config, "eval") == 0
    report = json.loads((tmp_path / "run/reports/report.json").read_text())
    assert report["meta"]["config"]["data"]["size"] == 32
    assert set(report["meta"]["checkpoints"]) == {"ae", "ldm"}
    first = (tmp_path / "run/reports/report.csv").read_bytes()
    assert _run(tiny_config, "eval") == 0
    assert (tmp_path / "run/reports/report.csv").read_bytes() == first

    # pred == ref
    assert _run(tiny_config, "eval", "--pred", str(out), "--ref", str(out), "--name", "self") == 0
    self_rep = json.loads((tmp_path / "run/reports/self.json").read_text())
    assert self_rep["aggregates"]["ssim"]["mean"] == 1.0 and self_rep["aggregates"]["lpips"]["mean"] == 0.0

    capsys.readouterr()
    assert _run(tiny_config, "dump-schedule") == 0
    assert len(capsys.readouterr().out.splitlines()) == 52


def test_ablate_cli_and_cache(tmp_path, tiny_config, monkeypatch, caplog):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("LDCT_REPORT_ROOT", str(tmp_path / "elsewhere"))
    assert _run(tiny_config, "ablate") == 3  # no dataset
    assert _run(tiny_config, "gen-data") == 0
    assert _run(tiny_config, "ablate") == 0
    table = (tmp_path / "elsewhere/ablation/table.txt").read_text().splitlines()
    assert len(table) == 6
    assert [c.strip() for c in table[0].split("|")] == ["P-AE", "Q-SP", "PSNR↑", "SSIM↑", "LPIPS↓", "Time↓"]
    marks = lambda b: "✓" if b else "✗"
    assert [[c.strip() for c in ln.split("|")[:2]] for ln in table[2:]] == [
        [marks(p), marks(q)] for p, q in ABLATION_ORDER]
    caplog.clear()
    caplog.set_level(logging.INFO)
    assert _run(tiny_config, "ablate") == 0
    skips = [r.getMessage() for r in caplog.records if r.getMessage().startswith("skip cell")]
    assert len(skips) == 4


def test_unknown_config_file(tmp_path):
    assert main(["show-config", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_console_script_help():
    exe = os.path.join(os.path.dirname(sys.executable), "ldct-ldm")
    cmd = [exe] if os.path.exists(exe) else [sys.executable, "-m", "ldct_ldm.cli"]
    out = subprocess.run([*cmd, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("gen-data", "train-ae", "train-ldm", "denoise", "eval", "ablate", "dump-schedule"):
        assert sub in out.stdout
