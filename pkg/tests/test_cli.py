import csv

import pytest

from mambadesk import cli, config
from mambadesk.config import ConfigError

SMALL = """
run.seed=3
task.kind=induction_heads
task.seq_len=8
task.vocab_size=6
model.arch=uni
model.vocab_size=6
model.d_in=8
model.n_state=4
model.expand=2
model.n_heads=2
model.n_layers=1
loop.max_steps=4
loop.batch_size=4
loop.eval_every=2
loop.eval_size=8
gradcheck.seq_len=5
gradcheck.max_elements=3
bench.lengths=8,16,32,64
bench.d_model=4
bench.n_state=2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def only_run(out, prefix):
    runs = [d for d in out.iterdir() if d.name.startswith(prefix)]
    assert len(runs) == 1
    return runs[0]


class TestConfig:
    def test_defaults_round_trip(self):
        assert config.parse(config.dump(config.Config())) == config.Config()

    def test_values_parsed(self, cfg_path):
        c = config.load(cfg_path)
        assert c.bench.lengths == [8, 16, 32, 64]
        assert c.model.arch == "uni" and c.loop.max_steps == 4

    def test_default_lengths_span_the_benchmark_range(self):
        lengths = config.BenchConfig().lengths
        assert lengths[0] == 256 and lengths[-1] == 16384

    @pytest.mark.parametrize("text", ["model.colour=red", "nonsense", "loop.max_steps=many", "task.kind=sorting"])
    def test_bad_input(self, text):
        with pytest.raises(ConfigError):
            config.parse(text)

    def test_schema_lists_every_key(self):
        text = config.schema()
        for line in config.dump(config.Config()).splitlines():
            assert line.split("=")[0] in text


def test_train_writes_outputs(cfg_path, tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["train", str(cfg_path), "--out", str(out)]) == 0
    run = only_run(out, "train-")
    assert {p.name for p in run.iterdir()} == {"run.cfg", "metrics.csv", "model.ckpt", "metrics.png"}
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["step"], r["split"]) for r in rows] == [("0", "eval"), ("2", "train"), ("2", "eval"), ("4", "train"), ("4", "eval")]
    assert config.load(run / "run.cfg").run.seed == 3
    assert "eval accuracy" in capsys.readouterr().out

    assert cli.main(["eval", str(run / "model.ckpt"), str(cfg_path), "--out", str(out)]) == 0
    ev = only_run(out, "eval-")
    with open(ev / "eval.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    final = rows[-1]
    assert float(row["accuracy"]) == pytest.approx(float(final["accuracy"]))


def test_seed_flag_overrides_config(cfg_path, tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["gradcheck", "--config", str(cfg_path), "--seed", "11", "--out", str(out)]) == 0
    run = only_run(out, "gradcheck-")
    assert config.load(run / "run.cfg").run.seed == 11


def test_gradcheck_report(cfg_path, tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["gradcheck", str(cfg_path), "--out", str(out)]) == 0
    run = only_run(out, "gradcheck-")
    with open(run / "gradcheck.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["rel_err"]) < 1e-6 for r in rows)
    assert "max rel err" in capsys.readouterr().out


def test_gradcheck_fails_above_threshold(cfg_path, tmp_path):
    cfg_path.write_text(SMALL + "gradcheck.threshold=0\n")
    assert cli.main(["gradcheck", str(cfg_path), "--out", str(tmp_path / "runs")]) == 1


def test_bench_outputs(cfg_path, tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["bench", str(cfg_path), "--out", str(out)]) == 0
    run = only_run(out, "bench-")
    assert {p.name for p in run.iterdir()} == {"run.cfg", "bench.csv", "bench.png", "bench_summary.txt"}
    summary = (run / "bench_summary.txt").read_text()
    assert "wall_time_ns slope ssm_scan_parallel" in summary


def test_bad_config_prints_schema(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.colour=red\n")
    assert cli.main(["train", str(bad), "--out", str(tmp_path / "runs")]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "model.d_in (int)" in err
    assert not (tmp_path / "runs").exists()


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["bench", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "runs")]) == 2


def test_runtime_failure_exits_one(tmp_path, cfg_path):
    assert cli.main(["eval", str(tmp_path / "missing.ckpt"), str(cfg_path), "--out", str(tmp_path / "runs")]) == 1


def test_fresh_directories_never_collide(tmp_path):
    a = cli.fresh_dir(str(tmp_path), "train")
    b = cli.fresh_dir(str(tmp_path), "train")
    assert a != b and a.exists() and b.exists()
