import math
import random
import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgx_datapath.boundary import Enclave, GateConfig
from sgx_datapath.emulator import KiB, MiB
from sgx_datapath.errors import EmptyInput, HarnessError, IncompleteMatrix, ParseError
from sgx_datapath.bench import cli
from sgx_datapath.bench.harness import (
    CSV_COLUMNS,
    DEFAULT_SIZES,
    BenchRecord,
    MatrixConfig,
    measure,
    parse_csv,
    rep_throughputs,
    run_cell,
    run_matrix,
    throughput_mbps,
    write_csv,
)
from sgx_datapath.bench.plots import emit_plots
from sgx_datapath.bench.shape import shape_check
from sgx_datapath.bench.workloads import (
    PLACEMENT,
    AesVariant,
    FindMaxBench,
    FindMaxVariant,
    find_max,
)

QUICK = MatrixConfig(reps=3, warmup=0.02, cooldown=0.02, rep_window=0.005)


def ints(values):
    return np.asarray(values, dtype="<i4").tobytes()


def linear_scan_max(data: bytes) -> int:
    best = None
    for i in range(0, len(data) // 4 * 4, 4):
        v = int.from_bytes(data[i:i + 4], "little", signed=True)
        best = v if best is None or v > best else best
    return best


# -- find_max --------------------------------------------------------------

def test_find_max_examples():
    assert find_max(ints([3, 1, 4, 1, 5])) == 5
    assert find_max(ints([7] * 100)) == 7
    assert find_max(ints([-5, -2, -9])) == -2
    assert find_max(ints([1, 2]) + b"\xff\xff\xff") == 2  # trailing partial integer ignored


def test_find_max_empty():
    with pytest.raises(EmptyInput):
        find_max(b"abc")
    bench = FindMaxBench(Enclave())
    for v in FindMaxVariant:
        with pytest.raises(EmptyInput):
            bench.run(v, bench.enclave.untrusted.alloc(3), None)


def test_every_variant_has_one_placement():
    assert set(PLACEMENT) == set(FindMaxVariant) | set(AesVariant)


def test_find_max_variants_agree_with_linear_scan():
    rng = random.Random(11)
    enclave = Enclave()
    bench = FindMaxBench(enclave)
    for _ in range(60):
        n = rng.choice([4, 5, 8, 4096, rng.randrange(4, 70_000)])
        data = rng.randbytes(n)
        expect = linear_scan_max(data)
        buf = enclave.untrusted.from_bytes(data)
        region = bench.prepare_local(buf)
        got = [bench.run(v, buf, region) for v in FindMaxVariant]
        assert got == [expect] * 4
        region.free()
        buf.free()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-2**31, 2**31 - 1), min_size=1, max_size=3000))
def test_find_max_chunked_equals_builtin(values):
    seen = []
    assert find_max(ints(values), chunk=64, progress=seen.append) == max(values)
    assert sum(seen) == 4 * len(values)


# -- throughput arithmetic -------------------------------------------------

def test_throughput_unit_is_decimal_megabytes():
    # 30 buffers of 10^6 bytes in 0.01 s
    assert throughput_mbps(30 * 1_000_000, 0.01) == pytest.approx(3000.0)
    assert throughput_mbps(30 * MiB, 0.01) == pytest.approx(3145.728)


def test_rep_throughputs_from_a_steady_log():
    # one thread finishing a 10^6-byte buffer every 1/3000 s for 0.01 s
    times = [i / 3000 for i in range(31)]
    done = [i * 1_000_000 for i in range(31)]
    per_rep = rep_throughputs([(times, done)], 0.0, 0.01, 5)
    assert per_rep == pytest.approx([3000.0] * 5)


def test_rep_throughputs_add_threads():
    log = ([0.0, 1.0], [0.0, 1e6])
    assert rep_throughputs([log, log], 0.0, 1.0, 4) == pytest.approx([2.0] * 4)


def test_rep_throughputs_only_count_in_window_bytes():
    # 1e6 bytes before the window, then a steady 1 MB/s inside it
    times = [0.0, 0.1, 2.0]
    done = [0.0, 1e6, 1e6 + 1.9e6]
    assert rep_throughputs([(times, done)], 1.0, 2.0, 2) == pytest.approx([1.0, 1.0])


# -- measure / run_cell ----------------------------------------------------

def test_measure_overlap_and_averaging():
    def op(progress):
        time.sleep(0.001)
        return 1000

    m = measure([op, op, op], warmup=0.03, window=0.06, cooldown=0.03, reps=6)
    assert m["overlap_ok"]
    t0, t1 = m["window"]
    assert all(a <= t0 and b >= t1 for a, b in m["spans"])
    assert len(m["per_rep"]) == 6 and all(x > 0 for x in m["per_rep"])


def test_measure_reports_worker_failure():
    def op(progress):
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        measure([op], 0.01, 0.01, 0.01, 1)


def test_thread_start_failure_is_a_harness_error(monkeypatch):
    import threading

    def refuse(self):
        raise RuntimeError("can't start new thread")

    monkeypatch.setattr(threading.Thread, "start", refuse)
    with pytest.raises(HarnessError):
        measure([lambda p: 1], 0.01, 0.01, 0.01, 1)


def test_single_cell_single_rep():
    cfg = MatrixConfig(reps=1, warmup=0.02, cooldown=0.02, rep_window=0.02)
    rec = run_cell("aesgcm", "TrustedAccessInPlace", 8 * KiB, 1, cfg)
    assert rec.ok and rec.mean_MBps > 0 and rec.reps == 1 and rec.stddev_MBps == 0.0
    assert rec.overlap_ok and rec.transitions > 0 and rec.bytes_copied_in == 0


def test_mean_is_mean_of_reps():
    rec = run_cell("findmax", "Untrusted", 64 * KiB, 2, QUICK)
    assert rec.mean_MBps == pytest.approx(math.fsum(rec.per_rep_MBps) / 3, rel=1e-12)
    assert rec.stddev_MBps == pytest.approx(float(np.std(rec.per_rep_MBps, ddof=1)))
    assert rec.overlap_ok and len(rec.thread_spans) == 2


def test_copy_in_counts_bytes_in_window():
    rec = run_cell("findmax", "CopyAndCompute", 64 * KiB, 1, QUICK)
    assert rec.transitions > 0
    assert rec.bytes_copied_in == pytest.approx(rec.transitions * 64 * KiB, abs=2 * 64 * KiB)


def test_trusted_slower_than_untrusted_at_4k():
    cfg = MatrixConfig(reps=10, warmup=0.05, cooldown=0.05, rep_window=0.01,
                       gate=GateConfig(transition_cost=10e-6))
    u = run_cell("aesgcm", "UntrustedBaseline", 4 * KiB, 1, cfg)
    t = run_cell("aesgcm", "TrustedAccessInPlace", 4 * KiB, 1, cfg)
    assert t.mean_MBps < u.mean_MBps


def harness_vs_bare(size, rounds=9):
    """Median over rounds of harness/bare throughput, each pair measured back to back.

    Each round uses fresh buffers on both sides, since run_cell allocates its own.
    Pairing cancels slow host drift; the median drops rounds hit by a burst of steal time.
    """
    cfg = MatrixConfig(reps=30, rep_window=0.01)
    ratios = []
    for i in range(rounds):
        enclave = Enclave()
        buf = enclave.untrusted.from_bytes(np.random.default_rng(i).bytes(size))
        op = FindMaxBench(enclave).prepare("Untrusted", buf)
        n, t0 = 0, time.perf_counter()
        while time.perf_counter() - t0 < 0.3:
            op()
            n += 1
        bare = throughput_mbps(n * size, time.perf_counter() - t0)
        enclave.close()
        ratios.append(run_cell("findmax", "Untrusted", size, 1, cfg, seed=i).mean_MBps / bare)
    return statistics.median(ratios)


@pytest.mark.parametrize("size", [256 * KiB, 4 * MiB])
def test_harness_is_neutral_for_large_buffers(size):
    ratio = harness_vs_bare(size)
    assert abs(ratio - 1) < 0.05, ratio


def test_memory_cap_gives_error_row():
    cfg = MatrixConfig(memory_cap_bytes=MiB)
    rec = run_cell("aesgcm", "UntrustedBaseline", MiB, 2, cfg)
    assert not rec.ok and "memory cap" in rec.error


def test_failed_cell_becomes_error_row():
    cfg = MatrixConfig(workloads=("findmax",), variants=("Untrusted",), sizes=(2, 4096), threads=(1,),
                       reps=1, warmup=0.01, cooldown=0.01, rep_window=0.01)
    recs = run_matrix(cfg)
    assert [r.ok for r in recs] == [False, True]
    assert "EmptyInput" in recs[0].error


# -- matrix, CSV -----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        MatrixConfig(reps=0)
    with pytest.raises(ValueError):
        MatrixConfig(sizes=(8192, 4096))
    assert MatrixConfig().sizes == DEFAULT_SIZES
    assert DEFAULT_SIZES[0] == 4 * KiB and DEFAULT_SIZES[-1] == 256 * MiB


def test_default_matrix_shape():
    cells = MatrixConfig().cells()
    assert len(cells) == 17 * 5 * (4 + 3 * 2)
    assert len(set(cells)) == len(cells)


def test_two_by_two_matrix_gives_four_rows(tmp_path):
    cfg = MatrixConfig(workloads=("findmax",), variants=("Untrusted", "ComputeOnCleartext"),
                       sizes=(4 * KiB, 64 * KiB), threads=(1,), reps=1, warmup=0.01, cooldown=0.01,
                       rep_window=0.01)
    out = tmp_path / "r.csv"
    recs = run_matrix(cfg, out=out)
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 5 and len(recs) == 4
    assert parse_csv(out) == recs


def _record(**kw):
    base = dict(workload="aesgcm", variant="UntrustedBaseline", backend="accelerated", buffer_bytes=4096,
                threads=1, reps=30, mean_MBps=1234.5678901234, stddev_MBps=0.1 + 0.2)
    base.update(kw)
    return BenchRecord(**base)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=0, max_value=1e7, allow_nan=False), st.floats(min_value=0, max_value=1e6),
       st.integers(0, 10**9), st.integers(0, 2**40), st.integers(0, 10**6))
def test_csv_round_trip_is_lossless(mean, std, transitions, copied, evictions):
    import tempfile

    recs = [_record(mean_MBps=mean, stddev_MBps=std, transitions=transitions, bytes_copied_in=copied,
                    evictions=evictions),
            _record(mean_MBps=None, stddev_MBps=None, error="memory cap, 5 > 4 bytes")]
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/x.csv"
        write_csv(recs, path)
        assert parse_csv(path) == recs


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        parse_csv("a,b,c\n1,2,3\n")
    with pytest.raises(ParseError):
        parse_csv(",".join(CSV_COLUMNS) + "\naesgcm,x\n")
    with pytest.raises(ParseError):
        parse_csv(",".join(CSV_COLUMNS) + "\naesgcm,v,b,notanint,1,1,1.0,0.0,0,0,0\n")
    with pytest.raises(ParseError):
        parse_csv(tmp_path / "missing.csv")


# -- shape checks ----------------------------------------------------------

def synthetic(trusted_factor=1.0, local_collapse=0.1, portable=0.3, scale=(1, 1.9, 3.8, 3.9, 3.9)):
    recs = []

    def add(variant, backend, size, threads, mbps):
        recs.append(_record(variant=variant, backend=backend, buffer_bytes=size, threads=threads,
                            mean_MBps=mbps, stddev_MBps=0.0))

    for size in DEFAULT_SIZES:
        add("UntrustedBaseline", "accelerated", size, 1, 1000.0)
        add("TrustedAccessInPlace", "accelerated", size, 1, 1000.0 * trusted_factor)
        local = 1000.0 * (local_collapse if size > 96 * MiB else 1.0)
        add("TrustedEnclaveLocal", "accelerated", size, 1, local)
    add("UntrustedBaseline", "portable", MiB, 1, 1000.0 * portable)
    for t, f in zip((2, 4, 8, 16), scale[1:]):
        add("UntrustedBaseline", "accelerated", 256 * KiB, t, 1000.0 * f)
    return recs


def test_shape_trusted_equal_untrusted():
    report = shape_check(synthetic(1.0), cores=4)
    assert report.get("large_buffer_convergence").passed
    assert report.get("small_buffer_gap").status == "fail"  # no gap at all at 4 KiB
    for name in ("above_epc_collapse", "backend_gap", "thread_scaling", "thread_plateau"):
        assert report.get(name).passed, report.render()


def test_shape_trusted_far_below_untrusted():
    report = shape_check(synthetic(0.01), cores=4)
    assert report.get("large_buffer_convergence").status == "fail"
    assert report.get("small_buffer_gap").passed
    assert not report.ok
    assert "margin=" in report.render() and "overall: FAIL" in report.render()


def test_shape_other_failures():
    r = shape_check(synthetic(1.0, local_collapse=0.9, portable=0.95, scale=(1, 1.5, 2.0, 3.0, 3.0)),
                    cores=4)
    for name in ("above_epc_collapse", "backend_gap", "thread_scaling", "thread_plateau"):
        assert r.get(name).status == "fail"


def test_shape_scaling_not_applicable_on_small_hosts():
    r = shape_check(synthetic(1.0, scale=(1, 1.0, 1.0, 1.0, 1.0)), cores=1)
    assert r.get("thread_scaling").status == "n/a"
    assert r.get("thread_plateau").passed


def test_shape_error_rows_fail():
    recs = synthetic(1.0)
    recs[-1] = _record(variant="UntrustedBaseline", buffer_bytes=256 * KiB, threads=16, mean_MBps=None,
                       stddev_MBps=None, error="boom")
    assert shape_check(recs, cores=4).get("thread_plateau").status == "fail"


def test_shape_missing_cells():
    recs = [r for r in synthetic(1.0) if r.buffer_bytes != 4096]
    with pytest.raises(IncompleteMatrix):
        shape_check(recs, cores=4)


# -- plots -----------------------------------------------------------------

def test_plots_from_four_rows(tmp_path):
    recs = [_record(variant=v, buffer_bytes=s) for v in ("UntrustedBaseline", "TrustedAccessInPlace")
            for s in (4096, 8192)]
    paths = emit_plots(recs, tmp_path / "p")
    size_plots = [p for p in paths if "vs_size" in p.name]
    assert len(size_plots) == 1 and size_plots[0].stat().st_size > 0


def test_plots_are_deterministic_and_skip_errors(tmp_path):
    recs = synthetic(0.8)
    recs.append(_record(buffer_bytes=4096, threads=3, mean_MBps=None, stddev_MBps=None, error="x"))
    a = emit_plots(recs, tmp_path / "a")
    b = emit_plots(recs, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    assert not any("threads3" in p.name for p in a)


def test_one_curve_per_variant(tmp_path):
    import matplotlib.pyplot as plt
    from sgx_datapath.bench import plots

    recs = synthetic(0.8)
    lines = {}
    orig = plots._plot

    def spy(series, path, *args):
        lines[path.name] = len(series)
        return orig(series, path, *args)

    plots._plot = spy
    try:
        emit_plots(recs, tmp_path)
    finally:
        plots._plot = orig
    distinct = {(r.variant, r.backend) for r in recs if r.threads == 1}
    assert lines["aesgcm_threads1_vs_size.png"] == len(distinct)
    plt.close("all")


def test_plot_rejects_malformed_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    with pytest.raises(ParseError):
        emit_plots(bad, tmp_path)


# -- CLI -------------------------------------------------------------------

def test_cli_size_and_duration_parsing():
    assert cli.parse_size("4K") == 4096
    assert cli.parse_size("96M") == 96 * MiB
    assert cli.parse_size("256MiB") == 256 * MiB
    assert cli.parse_size("1g") == 1 << 30
    assert cli.parse_duration("10us") == pytest.approx(10e-6)
    assert cli.parse_duration("10µs") == pytest.approx(10e-6)
    assert cli.parse_duration("1.5ms") == pytest.approx(1.5e-3)


def test_cli_run_plot_check(tmp_path, capsys):
    out = tmp_path / "r.csv"
    rc = cli.main(["run", "--workload", "aesgcm", "--variants", "UntrustedBaseline,TrustedAccessInPlace",
                   "--backends", "accelerated", "--sizes", "4K,8K", "--threads", "1", "--reps", "1",
                   "--transition-cost", "10us", "--epc-budget", "96M", "--warmup", "10ms",
                   "--cooldown", "10ms", "--rep-window", "10ms", "--out", str(out), "--quiet"])
    assert rc == 0
    recs = parse_csv(out)
    assert len(recs) == 4 and all(r.ok for r in recs)

    assert cli.main(["plot", "--in", str(out), "--outdir", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "aesgcm_threads1_vs_size.png").exists()

    capsys.readouterr()
    assert cli.main(["check", "--in", str(out)]) == 1  # far too few cells
    assert "missing cells" in capsys.readouterr().err


def test_cli_check_passes_on_conforming_records(tmp_path, capsys):
    path = tmp_path / "ok.csv"
    recs = synthetic(0.9)
    recs[1] = _record(variant="TrustedAccessInPlace", buffer_bytes=4096, mean_MBps=300.0, stddev_MBps=0.0)
    write_csv(recs, path)
    assert cli.main(["check", "--in", str(path), "--cores", "4"]) == 0
    assert "overall: PASS" in capsys.readouterr().out


def test_cli_rejects_unknown_variant(tmp_path, capsys):
    rc = cli.main(["run", "--workload", "findmax", "--variants", "Bogus", "--out", str(tmp_path / "x.csv")])
    assert rc == 2
