import json

import pytest

from kramerslab import cli, experiments
from kramerslab.errors import DivergedError
from kramerslab.experiments import ExperimentConfig


def _run(args, tmp_path):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def _outdir(tmp_path):
    (d,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    return d


def test_run_writes_outputs(tmp_path, capsys):
    assert _run(["run", "cg-gap"], tmp_path) == 0
    d = _outdir(tmp_path)
    cfg = ExperimentConfig.build("cg-gap")
    assert d.name == f"cg-gap-{cfg.digest[:12]}"
    for name in ("results.csv", "rate_fit.csv"):
        first = (d / name).read_text().splitlines()[0]
        assert first == f"# config {cfg.digest}"
    man = json.loads((d / "manifest.json").read_text())
    assert man["config_hash"] == cfg.digest
    assert {"seed", "version", "wall_time_s", "git_revision", "checks"} <= set(man)
    out = capsys.readouterr().out
    assert "cg gap, linear xi" in out


def test_check_mode_reports_failures(tmp_path):
    # the sine family's gap shrinks like ε⁴, so the slope check fails
    assert _run(["run", "cg-gap", "--check"], tmp_path) == cli.EXIT_CHECK


def test_check_mode_passes(tmp_path):
    assert _run(["run", "stationarity", "--n", "500", "--check"], tmp_path) == 0


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "cg-gap"]) == 0
    assert (tmp_path / "env").is_dir()


def test_config_file_and_flags(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('experiment = "stationarity"\nn = 300\nseed = 4\n')
    assert _run(["run", "stationarity", str(cfg), "--seed", "5"], tmp_path / "o") == 0
    man = json.loads((_outdir(tmp_path / "o") / "manifest.json").read_text())
    assert man["config"]["n"] == 300 and man["seed"] == 5


@pytest.mark.parametrize("text", ['n = 10\ncolour = "red"\n', "n = [\n", 'experiment = "cg-gap"\n', "n = -3\n"])
def test_bad_config_exits_2(tmp_path, text):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert _run(["run", "stationarity", str(cfg)], tmp_path) == cli.EXIT_CONFIG


def test_bad_arguments_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        _run(["run", "nonsense"], tmp_path)
    assert exc.value.code == cli.EXIT_CONFIG
    assert _run(["run", "cg-gap", "--n", "5"], tmp_path) == cli.EXIT_CONFIG
    assert _run(["run", "stationarity", str(tmp_path / "missing.toml")], tmp_path) == cli.EXIT_CONFIG


def test_divergence_exits_3(tmp_path, monkeypatch):
    def boom(cfg, threads=1):
        raise DivergedError("3 of 4 trajectories diverged", count=3)

    monkeypatch.setattr(cli, "run", boom)
    assert _run(["run", "stationarity"], tmp_path) == cli.EXIT_DIVERGED


def test_outputs_byte_identical_across_threads(tmp_path):
    for k in (1, 2):
        assert _run(["run", "stationarity", "--n", "400", "--threads", str(k)], tmp_path / str(k)) == 0
    a, b = _outdir(tmp_path / "1"), _outdir(tmp_path / "2")
    assert a.name == b.name
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_config_hash_tracks_parameters():
    a = ExperimentConfig.build("stationarity", {"n": 100})
    b = ExperimentConfig.build("stationarity", {"n": 100})
    c = ExperimentConfig.build("stationarity", {"n": 101})
    assert a.digest == b.digest != c.digest


def test_problem_table_in_config():
    from kramerslab.model import default_problem

    table = default_problem("overdamped").to_dict()
    cfg = ExperimentConfig.build("drift-ablation", {"problem": table})
    assert cfg.problem().digest() == default_problem("overdamped").digest()


def test_all_experiments_have_runners():
    assert set(experiments.RUNNERS) == set(experiments.EXPERIMENTS)
