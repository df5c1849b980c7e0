import pytest

from mvssm import bench
from mvssm.errors import ContractError
from mvssm.gradsuite import THRESHOLDS, op_suite


def row(L, ns, strategy="sequential"):
    return bench.BenchRow(L, 4, 2, strategy, 0, ns, 0.0)


def test_scaling_ratio_uses_total_time():
    rows = [row(100, 1.0), row(200, 1.5), row(400, 1.5), row(200, 9.0, "blelloch")]
    ratios = bench.scaling_ratios(rows)
    assert ratios == {(4, 2, 0, 100): pytest.approx(3.0), (4, 2, 0, 200): pytest.approx(2.0)}


def test_grid_chunk_only_for_chunked():
    jobs = list(bench.grid([8], [2], [2], ["sequential", "chunked"], [4, 16]))
    assert jobs == [(8, 2, 2, "sequential", 0), (8, 2, 2, "chunked", 4),
                    (8, 2, 2, "chunked", 16)]
    with pytest.raises(ContractError):
        list(bench.grid([8], [2], [2], ["warp"], [4]))


def test_repeats_floor():
    with pytest.raises(ContractError):
        bench.time_config(8, 2, 2, "sequential", 0, repeats=4)


def test_rows_match_oracle_and_csv_header():
    rows = bench.run_bench([33], [3], [2], bench.STRATEGIES, [5])
    assert all(r.max_err_vs_seq <= 1e-6 for r in rows)
    assert bench.rows_to_csv(rows).splitlines()[0] == ",".join(bench.COLUMNS)


def test_inputs_deterministic():
    a = bench.bench_inputs(16, 2, 3, seed=1)
    b = bench.bench_inputs(16, 2, 3, seed=1)
    assert all((x == y).all() for x, y in zip(a, b))


def test_op_suite_covers_every_rule_once():
    from mvssm.autodiff import RULES

    rep = op_suite()
    names = [r.op for r in rep.records]
    assert set(names) == set(RULES)
    assert names.count("selective_scan") == len(bench.STRATEGIES)
    assert rep.passed and rep.worst.report.max_rel_err <= THRESHOLDS["op"]
