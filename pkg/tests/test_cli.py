from __future__ import annotations

import json

import pytest

from wmeval import cli, io
from wmeval.config import ConfigError, dump_config, load_config, parse_config_text, parse_groups, parse_policy

TINY = """
[env]
width = 6
height = 6
chunk_size = 2

[data]
seed = 3
max_steps = 24
train = expert*6, eps:0.6*6
val = expert*2
test = expert*4, eps:0.9*6

[model]
d_model = 32
n_layers = 1
n_heads = 4
memory_capacity = 2

[train]
steps = 12
batch_size = 8
log_every = 3
checkpoint_every = 6

[decode]
steps = 3

[eval]
episodes = 3
max_chunks = 4
horizons = 1,2
policies = mix:1.0, mix:0.0, eps:0.5

[io]
data_dir = data
run_dir = run
out_dir = out
"""


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_parse_policy_strings():
    assert parse_policy("expert").kind == "expert"
    assert parse_policy("eps:0.25").epsilon == 0.25
    assert parse_policy("mix:0.5@3").seed == 3
    with pytest.raises(ConfigError):
        parse_policy("greedy:1")
    assert [n for _, n in parse_groups("expert*2, eps:0.5*7")] == [2, 7]


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        parse_config_text("[env]\nchunk_size = 9\n")
    with pytest.raises(ConfigError):
        parse_config_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[train]\nsteps = many\n")
    with pytest.raises(ConfigError):
        parse_config_text("[eval]\np_values = 0,2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_config_hash_tracks_content(cfg_path):
    a = load_config(cfg_path)
    b = parse_config_text(dump_config(a), cfg_path.parent)
    assert a.hash == b.hash
    b.train.steps += 1
    assert a.hash != b.hash


def test_exit_codes(cfg_path, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[env]\nchunk_size = 1\n")
    assert cli.main(["gen-data", "--config", str(bad)]) == cli.EXIT_INVALID
    # training before data exists is a validation error
    assert cli.main(["train", "--config", str(cfg_path)]) == cli.EXIT_INVALID
    with pytest.raises(SystemExit):
        cli.main(["eval", "--config", str(cfg_path), "--protocol", "nonsense"])


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.suffix != ".ini"}


def test_end_to_end_pipeline_is_deterministic(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("WMEVAL_THREADS", "1")
    args = ["--config", str(cfg_path)]
    assert cli.main(["gen-data", *args]) == 0
    man = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert man["splits"]["val"]["success_rate"] == 1.0
    assert man["config_hash"] == load_config(cfg_path).hash
    assert cli.main(["train", *args]) == 0
    rows = io.read_csv(tmp_path / "run" / "loss.csv")
    assert [int(r["step"]) for r in rows] == [3, 6, 9, 12]
    assert list(rows[0]) == cli.LOSS_COLUMNS
    assert (tmp_path / "run" / "loss.csv").read_text().startswith("# config_hash=")
    for proto in cli.PROTOCOLS:
        assert cli.main(["eval", *args, "--protocol", proto, "--svg"]) == 0, proto
    first = _snapshot(tmp_path)
    for name in ("data", "run", "out"):
        for p in (tmp_path / name).rglob("*"):
            if p.is_file():
                p.unlink()
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["train", *args]) == 0
    for proto in cli.PROTOCOLS:
        assert cli.main(["eval", *args, "--protocol", proto, "--svg"]) == 0
    second = _snapshot(tmp_path)
    assert first.keys() == second.keys()
    for k in first:
        assert first[k] == second[k], k


def test_resume_is_bitwise(cfg_path, tmp_path):
    args = ["--config", str(cfg_path)]
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["train", *args]) == 0
    straight = (tmp_path / "run" / "model.ckpt").read_bytes()
    straight_log = (tmp_path / "run" / "loss.csv").read_bytes()
    # drop the final checkpoint and resume from the step-6 one
    (tmp_path / "run" / "step_0000012.ckpt").unlink()
    (tmp_path / "run" / "model.ckpt").unlink()
    assert cli.main(["train", *args, "--resume"]) == 0
    assert (tmp_path / "run" / "model.ckpt").read_bytes() == straight
    assert (tmp_path / "run" / "loss.csv").read_bytes() == straight_log


def test_oracle_model_eval(cfg_path, tmp_path):
    args = ["--config", str(cfg_path)]
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["eval", *args, "--protocol", "correlation", "--oracle-model"]) == 0
    agg = json.loads((tmp_path / "out" / "correlation_oracle.json").read_text())
    assert agg["pearson_r"] == pytest.approx(1.0) and agg["mmrv"] == 0.0
    assert cli.main(["eval", *args, "--protocol", "roundtrip", "--oracle-model", "--H", "1,2,3"]) == 0
    rows = io.read_csv(tmp_path / "out" / "roundtrip_oracle.csv")
    means = [r for r in rows if r["seed"] == "mean"]
    assert len(means) == 6 and all(float(r["distance"]) == 0.0 for r in means)
    assert cli.main(["eval", *args, "--protocol", "corruption", "--oracle-model", "--p", "0,0.5,1"]) == 0
    assert len(io.read_csv(tmp_path / "out" / "corruption_oracle.csv")) == 3


def test_eval_requires_checkpoint(cfg_path):
    args = ["--config", str(cfg_path)]
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["eval", *args, "--protocol", "roundtrip"]) == cli.EXIT_INVALID


def test_oracle_check_subset_and_mutation(capsys):
    assert cli.main(["oracle-check", "--only", "mmrv,pearson,layout"]) == 0
    assert cli.main(["oracle-check", "--only", "gradient", "--mutate-gradient"]) == cli.EXIT_FAILED
    out = capsys.readouterr().out
    assert "FAIL gradient" in out
