import numpy as np
import pytest

from mambadesk import bench
from mambadesk.bench import (
    BenchRow,
    attention_reference,
    bench_scaling,
    fit_loglog_slope,
    make_scan_instance,
    read_csv,
    write_csv,
)
from mambadesk.numerics import ContractError


def test_attention_matches_direct_formula(rng):
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    s = q @ k.T / 2.0
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attention_reference(q, k, v), p @ v, atol=1e-13)


def test_scan_instance_shapes_and_range(rng):
    inst = make_scan_instance(10, 3, 4, rng)
    assert inst.decay.shape == (10, 1, 4) and inst.load.shape == (10, 3, 4)
    assert (inst.decay > 0).all() and (inst.decay < 1).all()


def test_small_sweep_rows(tmp_path):
    rows = bench_scaling([8, 16, 32, 64], d_model=4, n_state=2, trials=5, warmup=0)
    assert {(r.kernel, r.seq_len) for r in rows} == {(k, L) for k in bench.KERNELS for L in (8, 16, 32, 64)}
    assert all(r.measured and r.wall_time_ns > 0 and r.trials == 5 for r in rows)
    slopes = fit_loglog_slope(rows)
    assert set(slopes) == set(bench.KERNELS)


def test_capped_lengths_are_recorded_not_dropped():
    rows = bench_scaling([8, 16], d_model=4, n_state=2, trials=5, warmup=0, attention_cap_bytes=8 * 8 * 8)
    att = {r.seq_len: r.status for r in rows if r.kernel == "attention_reference"}
    assert att == {8: "ok", 16: "capped"}


def test_memory_error_recorded_as_failed(monkeypatch):
    def boom(q, k, v):
        raise MemoryError

    monkeypatch.setattr(bench, "attention_reference", boom)
    rows = bench_scaling([8], d_model=4, n_state=2, trials=5, warmup=0)
    status = {r.kernel: r.status for r in rows}
    assert status["attention_reference"] == "failed"
    assert status["ssm_scan_parallel"] == "ok"


def test_non_monotone_time_is_flagged(monkeypatch):
    times = iter([100, 50] + [40] * 10)
    monkeypatch.setattr(bench, "_time_call", lambda fn, trials, warmup: next(times))
    rows = bench_scaling([8, 16], d_model=2, n_state=2, trials=5, warmup=0, kernels=("ssm_scan_sequential",))
    assert [r.status for r in rows] == ["ok", "flaky"]


@pytest.mark.parametrize(
    "kw", [dict(lengths=[16, 8]), dict(lengths=[8], trials=3), dict(lengths=[8], kernels=("fft",))]
)
def test_invalid_arguments(kw):
    with pytest.raises(ContractError):
        bench_scaling(**kw)


def test_slope_of_exact_power_laws():
    rows = [BenchRow("a", L, L**2, 3 * L, 5) for L in (10, 20, 40, 80)]
    rows += [BenchRow("b", L, 7 * L, L, 5) for L in (10, 20, 40, 80)]
    assert fit_loglog_slope(rows) == pytest.approx({"a": 2.0, "b": 1.0})
    assert fit_loglog_slope(rows, "peak_bytes") == pytest.approx({"a": 1.0, "b": 1.0})


def test_slope_needs_four_lengths():
    rows = [BenchRow("a", L, L, L, 5) for L in (10, 20, 40)]
    with pytest.raises(ContractError):
        fit_loglog_slope(rows)


def test_slope_skips_unmeasured_rows():
    rows = [BenchRow("a", L, L**2, L, 5) for L in (10, 20, 40, 80)]
    rows.append(BenchRow("a", 160, 0, 0, 0, status="capped"))
    assert fit_loglog_slope(rows)["a"] == pytest.approx(2.0)


def test_csv_round_trip(tmp_path):
    rows = [BenchRow("ssm_scan_parallel", 256, 1234, 5678, 5), BenchRow("attention_reference", 16384, 0, 0, 0, "capped")]
    path = tmp_path / "b.csv"
    write_csv(path, rows)
    text = path.read_text().splitlines()
    assert text[0] == "kernel,seq_len,wall_time_ns,peak_bytes,trials"
    assert text[2] == "attention_reference,16384,capped,capped,0"
    assert read_csv(path) == rows
