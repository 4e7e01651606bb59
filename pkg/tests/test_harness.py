import csv
import json

import pytest

from mlrollback import harness
from mlrollback.cli import main
from mlrollback.harness import CSV_COLUMNS, RunConfig, metric_hex
from mlrollback.sim import ConfigError, FailureSpec


def test_metric_hex():
    assert metric_hex(1.0) == "3ff0000000000000"
    assert metric_hex(-2.5) == "c004000000000000"


def test_config_aliases():
    cfg = RunConfig.from_dict({"kernel": "stencil", "procs": 8, "iters": 12, "cp-int": 4,
                               "fail": ["0:5:1"]})
    assert (cfg.n_procs, cfg.n_iters, cfg.cp_int) == (8, 12, 4)
    assert cfg.failures == [FailureSpec(0, 5, 1)]


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"kernel": "cg", "colour": "red"})


def test_resolved_defaults():
    assert RunConfig(kernel="cg").resolved().cp_int == 25
    cfg = RunConfig(kernel="stencil", n_procs=27).resolved()
    assert (cfg.cp_int, cfg.log_size) == (20, 20)


@pytest.mark.parametrize("kw", [dict(mode="local", cp_int=10, log_size=5),
                                dict(mode="hybrid", cp_int=10, log_size=11),
                                dict(mode="hybrid", cp_int=10, log_size=0),
                                dict(mode="sideways")])
def test_invalid_modes(kw):
    with pytest.raises(ConfigError):
        harness.simulate(RunConfig(kernel="cg", n_procs=4, n_iters=5, size=64, **kw))


def test_run_writes_files(tmp_path):
    cfg = RunConfig(kernel="cg", n_procs=4, n_iters=12, cp_int=5, size=64,
                    failures=["1:7:2"], out_dir=str(tmp_path))
    m = harness.run(cfg)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["fail_rank"] == "1" and rows[0]["fail_iter"] == "7"
    assert rows[0]["final_metric_hex"] == m.final_metric_hex
    events = [json.loads(line) for line in open(tmp_path / "trace.jsonl")]
    assert {"fail", "recover", "rollback", "replay"} <= {e["op"] for e in events}
    assert len(list((tmp_path / "ckpt").iterdir())) == 4


def test_identical_runs_identical_bytes(tmp_path):
    for d in ("a", "b"):
        harness.run(RunConfig(kernel="stencil", n_procs=8, n_iters=15, cp_int=5, size=4,
                              failures=["3:8:1"], out_dir=str(tmp_path / d)))
    for name in ("metrics.csv", "trace.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_rows_and_slopes(tmp_path):
    tmpl = RunConfig(kernel="cg", n_procs=16, n_iters=40, cp_int=20, size=256, trace=False)
    rows = harness.sweep(tmpl, 0, range(20, 30), phases=[1], out_csv=tmp_path / "s.csv")
    assert [m.recompute_iters_total for m in rows] == list(range(10))
    glob = harness.sweep(tmpl.__class__(**{**tmpl.__dict__, "mode": "global"}), 0,
                         range(22, 26), phases=[0])
    steps = [b.recompute_iters_total - a.recompute_iters_total for a, b in zip(glob, glob[1:])]
    assert steps == [16, 16, 16]
    assert len(list(csv.DictReader(open(tmp_path / "s.csv")))) == 10


def test_hybrid_sweep_flips_once():
    tmpl = RunConfig(kernel="stencil", n_procs=8, n_iters=45, cp_int=20, log_size=10,
                     mode="hybrid", size=4, trace=False)
    rows = harness.sweep(tmpl, 0, range(20, 40), phases=[0])
    modes = [m.mode_taken for m in rows]
    flip = modes.index("global")
    assert modes == ["local"] * flip + ["global"] * (20 - flip)
    for m in rows:
        rec = m.outcome.recoveries[0]
        assert (rec.front.maxit - 20 <= 10) == (m.mode_taken == "local")


def test_local_rows_replay_something():
    tmpl = RunConfig(kernel="cg", n_procs=16, n_iters=40, cp_int=20, size=256, trace=False)
    for m in harness.sweep(tmpl, 3, range(21, 25)):
        assert m.mode_taken == "local" and m.replayed_msgs > 0


def test_verify_missing_dir(tmp_path):
    assert not harness.verify(tmp_path / "nope", tmp_path / "nope2")


# -- command line ---------------------------------------------------------------

SMALL = ["--kernel", "cg", "--procs", "4", "--iters", "30", "--cp-int", "10", "--size", "64"]


def test_cli_run_and_verify(tmp_path, capsys):
    assert main(["run", *SMALL, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", *SMALL, "--fail", "1:13:1", "--fail", "2:22:0",
                 "--out", str(tmp_path / "b")]) == 0
    assert main(["verify", str(tmp_path / "a"), str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert out.rstrip().endswith("match")
    saved = json.loads((tmp_path / "b" / "config.json").read_text())
    assert saved["failures"] == ["1:13:1", "2:22:0"]


def test_cli_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"kernel": "stencil", "n_procs": 8, "n_iters": 25, "cp_int": 5,
                                "size": 4, "failures": ["0:7:1"]}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    row = next(csv.DictReader(open(tmp_path / "o" / "metrics.csv")))
    assert row["kernel"] == "stencil" and row["mode_taken"] == "local"


def test_cli_config_error():
    assert main(["run", "--kernel", "cg", "--procs", "12"]) == 2
    assert main(["run", *SMALL, "--fail", "nonsense"]) == 2
    assert main(["run", *SMALL, "--mode", "local", "--log-size", "3"]) == 2


def test_cli_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", *SMALL, "--out", str(blocker / "sub")]) == 3
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 3


def test_cli_mismatch(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"transactional": False}))
    assert main(["run", "--config", str(path), *SMALL, "--fail", "1:13:1"]) == 4


def test_cli_protocol_error(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"disable_replay": True}))
    assert main(["run", "--config", str(path), *SMALL, "--fail", "1:13:1"]) == 5


def test_cli_sweep(tmp_path, capsys):
    assert main(["sweep", *SMALL, "--fail-rank", "3", "--fail-iters", "10:13",
                 "--phases", "0,3", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [(r["fail_iter"], r["fail_phase"]) for r in rows] == [
        ("10", "0"), ("10", "3"), ("11", "0"), ("11", "3"), ("12", "0"), ("12", "3")]
