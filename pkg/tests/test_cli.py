import csv

import pytest

from topocem import __version__
from topocem.cli import build_parser, main, resolve_config
from topocem.policy_net import PolicyNet, save_checkpoint

TABLE_II = (1, 25, 3, 26, 11, 25, 1, 1, 11, 1, 1, 1, 4, 1)
FAST = ["--mode", "dc", "--horizon", "60", "--jobs", "1", "--seed", "3"]


def body(path):
    with open(path) as fh:
        return list(csv.reader(ln for ln in fh if not ln.startswith("#")))


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"topocem {__version__}"


def test_enumerate(capsys):
    assert main(["enumerate", "--seed", "4"]) == 0
    out = capsys.readouterr().out.splitlines()
    comments = [ln for ln in out if ln.startswith("#")]
    assert any(ln.startswith("# config_hash=") for ln in comments)
    assert "# seed=4" in comments
    rows = [ln.split(",") for ln in out if not ln.startswith("#")]
    assert rows[0] == ["substation", "n", "n_prime", "tau"]
    assert tuple(int(r[3]) for r in rows[1:]) == TABLE_II


def test_unknown_flag(capsys):
    assert main(["enumerate", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main([]) == 2


def test_train_missing_scenario(tmp_path, capsys):
    code = main(["train", "--scenario", str(tmp_path / "none.csv"), "--out", str(tmp_path)])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_bad_mode_in_config(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nmode = hvdc\n")
    assert main(["enumerate", "--config", str(ini)]) == 1


def test_config_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nseed = 5\nmode = dc\n[trainer]\nbatch_size = 8\n"
                   "learning_rate = 0.001\n")
    parser = build_parser()
    cfg = resolve_config(parser.parse_args(["train", "--config", str(ini)]))
    assert (cfg.seed, cfg.mode, cfg.trainer.batch_size, cfg.trainer.seed) == (5, "dc", 8, 5)
    assert cfg.trainer.learning_rate == 0.001
    cfg = resolve_config(parser.parse_args(["train", "--config", str(ini), "--seed", "7",
                                            "--batch-size", "6"]))
    assert (cfg.seed, cfg.trainer.batch_size) == (7, 6)
    assert resolve_config(parser.parse_args(["train"])).trainer.batch_size == 20


def test_digest_ignores_output_location():
    parser = build_parser()
    a = resolve_config(parser.parse_args(["train", "--out", "x", "--jobs", "1"]))
    b = resolve_config(parser.parse_args(["train", "--out", "y", "--jobs", "2"]))
    c = resolve_config(parser.parse_args(["train", "--seed", "1"]))
    assert a.digest() == b.digest() != c.digest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    scn = root / "scn"
    assert main(["gen-scenarios", "--count", "3", "--stress", "1.5", "--out", str(scn),
                 *FAST]) == 0
    assert main(["score", "--scenarios", str(scn), "--output", str(root / "scores.csv"),
                 *FAST]) == 0
    train_dir = root / "train"
    assert main(["train", "--scenario", str(scn / "scn_0001.csv"), "--out", str(train_dir),
                 "--batch-size", "4", "--max-batches", "2", "--checkpoint-every", "1",
                 *FAST]) == 0
    ev = root / "eval"
    assert main(["evaluate", "--checkpoint", str(train_dir / "policy.bin"), "--scenarios",
                 str(scn), "--episodes", "2", "--out", str(ev), *FAST]) == 0
    return root


def test_gen_scenarios_reproducible(pipeline, tmp_path):
    again = tmp_path / "scn"
    assert main(["gen-scenarios", "--count", "3", "--stress", "1.5", "--out", str(again),
                 *FAST]) == 0
    for f in sorted((pipeline / "scn").iterdir()):
        assert (again / f.name).read_bytes() == f.read_bytes()


def test_score_and_select(pipeline, capsys):
    rows = body(pipeline / "scores.csv")
    assert rows[0] == ["scenario_id", "days_above", "max_loading", "divergent"]
    assert len(rows) == 4
    assert main(["select", "--scores", str(pipeline / "scores.csv")]) == 0
    best = max(rows[1:], key=lambda r: float(r[2]))[0]
    assert capsys.readouterr().out.strip() == best


def test_train_outputs(pipeline):
    t = pipeline / "train"
    names = sorted(p.name for p in t.iterdir())
    assert names == ["checkpoint_0001.bin", "checkpoint_0002.bin", "history.csv", "policy.bin"]
    text = (t / "history.csv").read_text()
    assert "# seed=3" in text and "# config_hash=" in text
    assert body(t / "history.csv")[0] == ["batch", "mean_reward", "reward_boundary", "successes"]


def test_evaluate_outputs(pipeline):
    ev = pipeline / "eval"
    rows = body(ev / "evaluation.csv")
    assert len(rows) == 1 + 3 * 2
    summary = body(ev / "summary.csv")
    assert summary[0] == ["scenarios", "successes", "success_fraction"]
    assert sorted(p.name for p in (ev / "episodes").iterdir()) == \
        ["scn_0000.csv", "scn_0001.csv", "scn_0002.csv"]


def test_evaluate_do_nothing(pipeline, tmp_path):
    assert main(["evaluate", "--scenarios", str(pipeline / "scn"), "--out", str(tmp_path),
                 *FAST]) == 0
    assert len(body(tmp_path / "evaluation.csv")) == 1 + 3


def test_replay_matches(pipeline, capsys):
    for ep in sorted((pipeline / "eval" / "episodes").iterdir()):
        assert main(["replay", "--episode", str(ep)]) == 0
    assert "replay ok" in capsys.readouterr().out


def test_replay_detects_tampering(pipeline, tmp_path):
    src = pipeline / "eval" / "episodes" / "scn_0000.csv"
    lines = src.read_text().splitlines()
    i = next(k for k, ln in enumerate(lines) if ln and ln[0].isdigit())
    cells = lines[i].split(",")
    cells[3] = repr(float(cells[3]) + 1e-9)
    lines[i] = ",".join(cells)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["replay", "--episode", str(bad)]) == 1


def test_analyze(pipeline, tmp_path, capsys):
    out = tmp_path / "reports"
    assert main(["analyze", "--scores", str(pipeline / "scores.csv"),
                 "--history", str(pipeline / "train" / "history.csv"),
                 "--evaluation", str(pipeline / "eval" / "evaluation.csv"),
                 "--out", str(out), *FAST]) == 0
    assert sorted(p.name for p in out.iterdir()) == \
        ["scatter.csv", "topology_legend.csv", "topology_table.csv", "training_curve.csv"]
    table = body(out / "topology_table.csv")
    assert sum(int(r[1]) for r in table[1:]) == 3
    scatter = body(out / "scatter.csv")
    assert {r[3] for r in scatter[1:]} <= {"0", "1"}


def test_evaluate_rejects_mismatched_checkpoint(pipeline, tmp_path):
    ck = tmp_path / "small.bin"
    save_checkpoint(PolicyNet.initialize((6, 4, 3)), ck)
    assert main(["evaluate", "--checkpoint", str(ck), "--scenarios", str(pipeline / "scn"),
                 "--out", str(tmp_path), *FAST]) == 1
