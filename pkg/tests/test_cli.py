import json

import pytest

from rscn import autodiff as ad
from rscn.checkpoint import PrototypeCache, load_checkpoint
from rscn.cli import main
from rscn.config import ConfigError, parse_config
from rscn.trainer import MetricsLog

CONFIG = """\
[run]
seed = 4

[scene]
height = 16
width = 16
size_min = 4
size_max = 7
objects_max = 2
source_train = 6
target_train = 6
target_val = 4

[train]
lr = 0.01
iterations = 8
patch = 3
hidden = 8
feat_dim = 6
disc_hidden = 5
n_bg = 4

[eval]
analysis_scenes = 4
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.ini").write_text(CONFIG)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def data(workdir):
    assert run("gen-data", "--config", workdir / "run.ini", "--out", workdir / "data") == 0
    return workdir / "data"


@pytest.fixture
def reference(workdir, data):
    out = workdir / "ref"
    assert run("train", "--mode", "source-only", "--config", workdir / "run.ini", "--data", data,
               "--out", out) == 0
    cache = workdir / "ref.rspc"
    assert run("cache-protos", "--checkpoint", out / "checkpoint.rsck", "--config",
               workdir / "run.ini", "--data", data, "--out", cache) == 0
    return out, cache


# ---------------------------------------------------------------- config


def test_config_requires_seed():
    with pytest.raises(ConfigError, match="seed required"):
        parse_config("[train]\nlr = 0.1\n")


@pytest.mark.parametrize("text", ["[run]\nseed = 1\n[train]\nlearning_rate = 0.1\n",
                                  "[run]\nseed = 1\n[extra]\nx = 1\n",
                                  "[run]\nseed = 1\ncolor = red\n",
                                  "[run]\nseed = one\n",
                                  "[run]\nseed = 1\n[scene]\nheight = 2\n"])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_round_trip():
    cfg = parse_config(CONFIG)
    assert cfg.train.seed == 4 and cfg.scene.height == 16 and cfg.sizes.source_train == 6
    assert parse_config(cfg.to_text()) == cfg


def test_missing_seed_exit_code(workdir, capsys):
    (workdir / "bad.ini").write_text("[scene]\nheight = 16\n")
    assert run("gen-data", "--config", workdir / "bad.ini", "--out", workdir / "d") == 2
    assert "seed required" in capsys.readouterr().err


def test_usage_error_exit_code():
    assert run("train") == 2
    assert run("no-such-command") == 2


# ---------------------------------------------------------------- gen-data


def test_gen_data(workdir, data, capsys):
    assert (data / "manifest.json").is_file()
    assert (data / "config.ini").read_text() == parse_config(CONFIG).to_text()
    again = workdir / "again"
    assert run("gen-data", "--config", workdir / "run.ini", "--out", again) == 0
    assert "target_train" in capsys.readouterr().out
    for f in sorted(p.relative_to(data) for p in data.rglob("*") if p.is_file()):
        assert (data / f).read_bytes() == (again / f).read_bytes()


def test_corrupt_dataset_exit_code(workdir, data):
    scene = sorted((data / "scenes").iterdir())[0]
    blob = bytearray(scene.read_bytes())
    blob[30] ^= 0xFF
    scene.write_bytes(bytes(blob))
    assert run("train", "--mode", "source-only", "--config", workdir / "run.ini", "--data", data,
               "--out", workdir / "x") == 3


# ---------------------------------------------------------------- train / cache / eval


def test_train_source_only_outputs(reference):
    out, cache = reference
    assert load_checkpoint(out / "checkpoint.rsck").disc is None
    rows = MetricsLog.read(out / "metrics.ndjson")
    assert len(rows) == 8 and "eval" in rows[-1] and 0 <= rows[-1]["eval"]["map50"] <= 1
    assert (out / "config.ini").is_file()
    assert len(PrototypeCache.load(cache).entries) == 6


def test_rscn_requires_cache(workdir, data):
    assert run("train", "--mode", "rscn", "--config", workdir / "run.ini", "--data", data,
               "--out", workdir / "a") == 2


def test_weights_1000_equal_source_only(workdir, data, reference):
    out, cache = reference
    assert run("train", "--mode", "rscn", "--config", workdir / "run.ini", "--data", data,
               "--cache", cache, "--weights", "1,0,0,0", "--out", workdir / "degen") == 0
    a = load_checkpoint(out / "checkpoint.rsck")
    b = load_checkpoint(workdir / "degen" / "checkpoint.rsck")
    for (_, x), (_, y) in zip(a.params.named_parameters(), b.params.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_cache_rerun_idempotent_and_hash_guard(workdir, data, reference):
    out, cache = reference
    first = cache.read_bytes()
    assert run("cache-protos", "--checkpoint", out / "checkpoint.rsck", "--config",
               workdir / "run.ini", "--data", data, "--out", cache) == 0
    assert cache.read_bytes() == first
    assert run("train", "--mode", "rscn", "--config", workdir / "run.ini", "--data", data,
               "--cache", cache, "--out", workdir / "adapted") == 0
    other = workdir / "adapted" / "checkpoint.rsck"
    assert run("cache-protos", "--checkpoint", other, "--config", workdir / "run.ini",
               "--data", data, "--out", cache) == 3
    assert run("cache-protos", "--checkpoint", workdir / "nope.rsck", "--config",
               workdir / "run.ini", "--data", data, "--out", cache) == 2


def test_corrupt_cache_exit_code(workdir, data, reference):
    _, cache = reference
    blob = bytearray(cache.read_bytes())
    blob[-40] ^= 1
    cache.write_bytes(bytes(blob))
    assert run("train", "--mode", "rscn", "--config", workdir / "run.ini", "--data", data,
               "--cache", cache, "--out", workdir / "a") == 3


def test_eval_and_baseline(workdir, data, reference, capsys):
    out, _ = reference
    base = workdir / "base.json"
    assert run("eval", "--checkpoint", out / "checkpoint.rsck", "--config", workdir / "run.ini",
               "--data", data, "--split", "target_val", "--out", base) == 0
    report = json.loads(base.read_text())
    assert 0 <= report["map50"] <= 1
    capsys.readouterr()
    again = workdir / "again.json"
    assert run("eval", "--checkpoint", out / "checkpoint.rsck", "--config", workdir / "run.ini",
               "--data", data, "--out", again, "--baseline", base) == 0
    assert again.read_bytes() == base.read_bytes()
    assert "+0.0 |" in capsys.readouterr().out
    assert run("eval", "--checkpoint", out / "checkpoint.rsck", "--config", workdir / "run.ini",
               "--data", data, "--split", "target_train", "--out", again) == 2


def test_ablate_table(workdir, data, reference):
    _, cache = reference
    out = workdir / "abl"
    assert run("ablate", "--config", workdir / "run.ini", "--data", data, "--cache", cache,
               "--out", out) == 0
    rows = (out / "ablation.csv").read_text().strip().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["source-only", "BPA", "BPA+RSH", "BPA+SSP",
                                               "BPA+RSH+SSP"]
    assert float(rows[0].split(",")[2]) == 0.0
    configs = [parse_config((out / name / "config.ini").read_text())
               for name in ("BPA", "BPA+RSH", "BPA+SSP", "BPA+RSH+SSP")]
    for cfg in configs[1:]:
        assert cfg.train.to_dict() | {"weights": None} == configs[0].train.to_dict() | {"weights": None}


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_passes_small(capsys):
    assert run("gradcheck", "--seed", 1, "--trials", 3) == 0
    out = capsys.readouterr().out
    assert "L_RSH" in out and "grad_reverse" in out and "max rel-err" in out


def test_gradcheck_catches_sign_bug(monkeypatch):
    monkeypatch.setattr(ad, "_reverse", lambda g, lam: lam * g)
    assert run("gradcheck", "--seed", 1, "--trials", 3) == 1
