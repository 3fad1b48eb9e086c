import json
import subprocess
import sys
from pathlib import Path

import pytest
from filelock import FileLock

from vtg_rl.cli import main, resolve_config
from vtg_rl.core import read_samples
from vtg_rl.curation import read_annotated
from vtg_rl.policy import load_checkpoint

SMALL = {
    "seed": 1,
    "curation": {"n_samples": 40},
    "base": {"n_samples": 60, "epochs": 1},
    "train": {"sft_epochs": 1, "rl_steps": 4, "val_every": 2, "samples_per_step": 2, "max_len": 24},
    "eval": {"n_val": 10},
}


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != ".vtg_rl.lock"}


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen", "--n", "500", "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen", "--n", "500", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(read_samples(a, 8)) == 500
    assert main(["gen", "--n", "500", "--seed", "8", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_stage_chain_writes_valid_files(tmp_path, small_cfg):
    w = str(tmp_path / "w")
    common = ["--config", small_cfg, "--workdir", w]
    assert main(["gen", *common, "--out", "tasks.jsonl"]) == 0
    assert main(["annotate", *common, "--dataset", "tasks.jsonl", "--out", "ann.jsonl"]) == 0
    assert main(["curate", *common, "--dataset", "ann.jsonl", "--out", "split", "--eps1", "0.8", "--eps2", "0.4"]) == 0
    manifest = json.loads((tmp_path / "w/split/manifest.json").read_text())
    counts = {k: len(read_annotated(tmp_path / f"w/split/{k}.jsonl")) for k in ("coldstart", "rl", "discarded")}
    assert sum(counts.values()) == manifest["counts"]["total"] == 40
    assert all(manifest["counts"][k] == v for k, v in counts.items())
    assert main(["base", *common, "--out", "base.json"]) == 0
    assert main(["sft", *common, "--checkpoint", "base.json", "--dataset", "split/coldstart.jsonl", "--out", "sft.json"]) == 0
    assert main(["rl", *common, "--checkpoint", "sft.json", "--dataset", "split/rl.jsonl", "--out", "rl"]) == 0
    lines = (tmp_path / "w/rl/metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3, 4]
    assert sorted(p.name for p in (tmp_path / "w/rl/checkpoints").iterdir()) == ["step_000002.json", "step_000004.json"]
    assert load_checkpoint(tmp_path / "w/rl/final.json").provenance["rl_step"] == 4
    assert main(["eval", *common, "--checkpoint", "rl/final.json", "--dataset", "tasks.jsonl", "--out", "rep.json", "--thresholds", "0.5"]) == 0
    rep = json.loads((tmp_path / "w/rep.json").read_text())
    assert set(rep) == {"R@0.5", "mIoU", "n", "unparsed", "config"} and rep["n"] == 40
    assert not list(tmp_path.rglob("*.partial"))


def test_pipeline_matches_subcommands(tmp_path, small_cfg):
    p = tmp_path / "p"
    assert main(["pipeline", "--config", small_cfg, "--workdir", str(p), "--variant", "coldstart"]) == 0
    s = str(tmp_path / "s")
    common = ["--config", small_cfg, "--workdir", s]
    assert main(["gen", *common, "--out", "data/tasks.jsonl"]) == 0
    assert main(["annotate", *common, "--dataset", "data/tasks.jsonl", "--out", "data/annotated.jsonl"]) == 0
    assert main(["curate", *common, "--dataset", "data/annotated.jsonl", "--out", "data/split"]) == 0
    assert main(["base", *common, "--out", "base.json"]) == 0
    assert main(["sft", *common, "--checkpoint", "base.json", "--dataset", "data/split/coldstart.jsonl", "--out", "coldstart/sft.json"]) == 0
    assert main(["rl", *common, "--checkpoint", "coldstart/sft.json", "--dataset", "data/split/rl.jsonl",
                 "--val", str(p / "data/val.jsonl"), "--out", "coldstart/rl"]) == 0
    pf, sf = files(p), files(tmp_path / "s")
    for name in sf:
        assert pf[name] == sf[name], name
    rep = json.loads((p / "coldstart/report.json").read_text())
    assert rep["variant"] == "coldstart" and "start" in rep
    assert json.loads((p / "config.resolved.json").read_text())["seed"] == 1


@pytest.mark.parametrize("variant", ["zero", "zero-unfiltered", "coldstart-unfiltered-rl"])
def test_pipeline_variants(tmp_path, small_cfg, variant):
    assert main(["pipeline", "--config", small_cfg, "--workdir", str(tmp_path), "--variant", variant]) == 0
    rep = json.loads((tmp_path / variant / "report.json").read_text())
    assert (tmp_path / variant / "sft.json").exists() == variant.startswith("coldstart")
    if "unfiltered" in variant:
        assert rep["pools"]["rl"] == 40


def test_pipeline_is_reproducible(tmp_path, small_cfg):
    for d in ("a", "b"):
        assert main(["pipeline", "--config", small_cfg, "--workdir", str(tmp_path / d), "--variant", "zero"]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_flags_override_config(small_cfg):
    cfg = resolve_config(SMALL, {("train", "rl_steps"): 9, ("", "seed"): 4, ("curation", "eps1"): None})
    assert cfg.train.rl_steps == 9
    assert cfg.seed == cfg.curation.seed == cfg.train.seed == cfg.base.seed == 4
    assert cfg.curation.eps1 == 0.8


@pytest.mark.parametrize(
    "raw",
    [{"train": {"bogus": 1}}, {"train": {"seed": 3}}, {"curation": {"eps1": 0.1, "eps2": 0.5}}, {"profile": "json"}, {"nope": {}}],
)
def test_bad_config_is_rejected(tmp_path, raw, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    assert main(["gen", "--config", str(path), "--out", str(tmp_path / "x.jsonl")]) != 0
    err = capsys.readouterr().err
    assert err.startswith("vtg-rl: error:") and len(err.strip().splitlines()) == 1
    assert not (tmp_path / "x.jsonl").exists()


def test_bad_inputs_fail_with_diagnostic(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x", "duration_s": "long"}\n')
    assert main(["annotate", "--dataset", str(bad), "--out", str(tmp_path / "o.jsonl")]) == 1
    assert "features: missing field" in capsys.readouterr().err
    assert main(["sft", "--checkpoint", str(tmp_path / "missing.json"), "--dataset", str(bad), "--out", str(tmp_path / "o.json")]) == 1
    assert main(["curate", "--dataset", str(bad)]) == 1
    assert "--out" in capsys.readouterr().err
    assert main(["gen", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "g.jsonl")]) == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.jsonl"]


def test_locked_workdir_is_refused(tmp_path, capsys):
    with FileLock(str(tmp_path / ".vtg_rl.lock")):
        assert main(["gen", "--workdir", str(tmp_path), "--out", "t.jsonl", "--n", "3"]) == 3
    assert "locked" in capsys.readouterr().err
    assert not (tmp_path / "t.jsonl").exists()
    assert main(["gen", "--workdir", str(tmp_path), "--out", "t.jsonl", "--n", "3"]) == 0


def test_module_entry_point(tmp_path):
    out = tmp_path / "t.jsonl"
    res = subprocess.run([sys.executable, "-m", "vtg_rl", "gen", "--n", "3", "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert len(out.read_text().splitlines()) == 3
