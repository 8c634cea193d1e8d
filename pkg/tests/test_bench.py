import os

import pytest

from hwros.bench import BLOCK, BenchmarkError, BenchmarkReport, SizeResult, run_benchmark, size_label
from hwros.config import parse_config

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def pingpong():
    with open(os.path.join(CONFIGS, "pingpong.ini"), encoding="utf-8") as fh:
        return parse_config(fh.read())


@pytest.mark.parametrize("n, label", [(4, "4 Byte"), (8192, "8 KiB"), (1 << 20, "1 MiB"), (6 << 20, "6 MiB"), (100, "100 Byte")])
def test_size_labels(n, label):
    assert size_label(n) == label


def test_single_size_run():
    report = run_benchmark(pingpong(), sizes=[4], iterations=10, two_process=False)
    r = report.result("hw", 4)
    assert len(r.samples_us) == 10 and r.complete
    assert r.median_us > 0
    assert len(r.node_samples_us) == 10
    assert report.complete and not report.compared


def test_compare_reports_speedup_for_every_size():
    sizes = [4, 8192, 1 << 20]
    report = run_benchmark(pingpong(), sizes=sizes, iterations=5, compare=True, two_process=False)
    assert report.compared and report.sizes == sizes
    for size in sizes:
        assert report.speedup(size) > 0
        assert report.node_speedup(size) > 0
    rows = report.to_json()
    assert [row["size"] for row in rows] == sizes
    assert set(rows[0]) == {"size", "samples_us", "median_us", "node_median_us", "complete", "speedup"}
    table = report.format_table()
    assert "1 MiB" in table and "4 Byte" in table


def test_single_mapping_json_keys():
    report = run_benchmark(pingpong(), sizes=[4], iterations=3, mapping={"copy": "sw"}, two_process=False)
    (row,) = report.to_json()
    assert row["mapping"] == "sw"
    assert set(row) == {"size", "mapping", "samples_us", "median_us", "node_median_us", "complete"}


def test_incomplete_run_is_marked():
    report = BenchmarkReport({"hw": [SizeResult(4, [10.0, 12.0], complete=False)]}, 5)
    assert not report.complete
    assert "*" in report.format_table()


def test_missing_peer_is_an_error():
    cfg = pingpong()
    cfg.thread("copy").behavior = "constant"
    with pytest.raises(BenchmarkError):
        run_benchmark(cfg, sizes=[4], iterations=1, timeout=0.5, two_process=False)


def test_two_process_small():
    report = run_benchmark(pingpong(), sizes=[4, 8192], iterations=5, two_process=True)
    assert report.complete
    for size in (4, 8192):
        r = report.result("hw", size)
        assert len(r.samples_us) == 5 and r.median_us > 0


def test_partial_block_and_node_times_per_size():
    report = run_benchmark(pingpong(), sizes=[4, 8192], iterations=13, two_process=False, warmup=3)
    for size in (4, 8192):
        r = report.result("hw", size)
        assert len(r.samples_us) == 13 and len(r.node_samples_us) == 13 and r.stale == 0
        blocks = -(-13 // BLOCK)
        assert r.measured.count(False) == 3 * blocks  # warm-ups before every block


def test_table_sizes_medians_nondecreasing_within_slack():
    sizes = [4, 8 << 10, 1 << 20, 6 << 20]
    report = run_benchmark(pingpong(), sizes=sizes, iterations=20, two_process=False)
    medians = [report.result("hw", s).median_us for s in sizes]
    for smaller, larger in zip(medians, medians[1:]):
        assert larger >= smaller - max(0.25 * smaller, 200.0), medians
