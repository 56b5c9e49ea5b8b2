import csv
import io
import math

import numpy as np
import pytest

from gridcp.conformal import KernelConformal, StratifiedConformal, build_table
from gridcp.errors import IndexMismatch
from gridcp.predictor import ResidualTable
from gridcp.screening import (ScreeningData, Threshold, alpha_sweep, coverage_by_stratum, coverage_csv,
                              evaluate, flag_lines, format_table, precision_at_recall, report_csv, sweep_csv,
                              threshold_sweep)


def test_false_positive_record():
    f = flag_lines([1.01], [0.99])
    assert f.predicted_flag[0] and not f.true_flag[0]


def test_strict_flag_inclusive_coverage():
    f = flag_lines([1.0], [1.0])
    assert not f.predicted_flag[0] and not f.true_flag[0]
    assert f.covered[0]


def test_threshold_zero_flags_everything():
    truth = np.array([0.2, 1.3, 0.8, 1.1, 0.5])
    stat = np.array([0.1, 0.9, 0.3, 0.7, 0.4])
    m = evaluate(flag_lines(stat, truth, Threshold(0.0))).overall
    assert m.recall == 1.0
    assert m.precision == pytest.approx(2 / 5)


def test_misaligned_inputs():
    with pytest.raises(IndexMismatch):
        flag_lines([1.0, 2.0], [1.0])
    with pytest.raises(IndexMismatch):
        flag_lines([1.0], [1.0], k=[1, 2])


def test_recall_precision_arithmetic():
    # TP=9, FN=1, FP=3, TN=7
    truth = np.array([1.5] * 10 + [0.5] * 10)
    bound = np.array([1.5] * 9 + [0.5] + [1.5] * 3 + [0.5] * 7)
    m = evaluate(flag_lines(bound, truth)).overall
    assert (m.tp, m.fn, m.fp, m.tn) == (9, 1, 3, 7)
    assert m.recall == pytest.approx(0.9)
    assert m.precision == pytest.approx(0.75)


def test_perfect_predictor():
    truth = np.array([0.4, 1.2, 0.9, 1.01])
    rep = evaluate(flag_lines(truth + 0.0, truth))
    assert (rep.overall.recall, rep.overall.precision, rep.overall.coverage) == (1.0, 1.0, 1.0)


def test_undefined_metrics_are_none():
    rep = evaluate(flag_lines([0.5, 0.6], [0.4, 0.3]))
    assert rep.overall.recall is None and rep.overall.precision is None
    text = report_csv({"Point": rep})
    assert "null" in text


def test_counts_partition_and_pool():
    rng = np.random.default_rng(0)
    n = 500
    k = rng.integers(1, 4, n)
    truth = rng.uniform(0.5, 1.5, n)
    bound = truth + rng.normal(0, 0.2, n)
    rep = evaluate(flag_lines(bound, truth, k=k, scenario_id=np.arange(n)))
    pooled = rep.by_k[1] + rep.by_k[2] + rep.by_k[3]
    assert pooled == rep.overall
    assert rep.overall.n_records == n
    for m in rep.by_k.values():
        assert m.tp + m.fp + m.fn + m.tn == m.n_records


def test_margin_never_lowers_recall():
    rng = np.random.default_rng(1)
    truth = rng.uniform(0.5, 1.5, 300)
    l_hat = truth + rng.normal(0, 0.2, 300)
    q = rng.uniform(0, 0.3, 300)
    assert evaluate(flag_lines(l_hat + q, truth)).overall.recall >= evaluate(flag_lines(l_hat, truth)).overall.recall


def test_coverage_boundaries():
    truth = np.array([0.5, 1.2, 0.8])
    k = np.array([1, 1, 2])
    b = np.array([1, 2, 1])
    inf = coverage_by_stratum(flag_lines(np.full(3, np.inf), truth, k=k, branch_id=b))
    assert inf.equal_weighted == 1.0 and all(c == 1.0 for c, _ in inf.by_stratum.values())
    same = coverage_by_stratum(flag_lines(truth, truth, k=k, branch_id=b))
    assert same.sample_weighted == 1.0


def test_coverage_weighting():
    # stratum (1,1): 3 of 4 covered; stratum (2,1): 0 of 1
    truth = np.array([1.0, 1.0, 1.0, 1.0, 1.0])
    bound = np.array([2.0, 2.0, 2.0, 0.0, 0.0])
    c = coverage_by_stratum(flag_lines(bound, truth, k=np.ones(5), branch_id=[1, 1, 1, 1, 2]))
    assert c.by_stratum == {(1, 1): (0.75, 4), (2, 1): (0.0, 1)}
    assert c.equal_weighted == pytest.approx(0.375)
    assert c.sample_weighted == pytest.approx(0.6)
    assert coverage_by_stratum(flag_lines(bound, truth, k=np.ones(5), branch_id=[1, 1, 1, 1, 2]),
                               min_records=2).equal_weighted == pytest.approx(0.75)


def test_threshold_sweep_six_records():
    stat = np.array([0.2, 0.6, 0.9, 1.1, 0.4, 1.3])
    truth = np.array([0.5, 1.2, 0.7, 1.4, 0.3, 1.05])
    pts = threshold_sweep(stat, truth, [2.0, 0.5, 0.0])
    top, mid, bottom = pts
    assert top.recall == 0.0 and top.precision is None
    # tau = 0.5 flags records 1, 2, 3, 5; positives are 1, 3, 5
    assert mid.recall == 1.0 and mid.precision == pytest.approx(3 / 4)
    assert bottom.recall == 1.0
    recalls = [p.recall for p in threshold_sweep(stat, truth, np.linspace(1.5, 0, 16))]
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    with pytest.raises(ValueError):
        threshold_sweep(stat, truth, [0.1, 0.5])


def test_threshold_sweep_without_positives():
    pts = threshold_sweep([0.5, 2.0], [0.1, 0.2], [3.0])
    assert pts[0].recall is None


def test_precision_at_recall_brute_force():
    rng = np.random.default_rng(5)
    stat = np.round(rng.uniform(0, 2, 80), 1)
    truth = rng.uniform(0.5, 1.5, 80)
    best = None
    for tau in np.unique(stat):
        flag = stat >= tau
        pos = truth > 1
        rec = (flag & pos).sum() / pos.sum()
        if rec >= 0.7:
            prec = (flag & pos).sum() / flag.sum()
            best = prec if best is None else max(best, prec)
    assert precision_at_recall(stat, truth, 0.7) == pytest.approx(best)
    assert precision_at_recall(stat, np.zeros(80), 0.7) is None


def _sweep_setup(n_cal=30):
    rng = np.random.default_rng(2)
    sid = np.repeat(np.arange(n_cal), 2)
    rt = ResidualTable(sid, np.ones_like(sid), np.tile([1, 2], n_cal), rng.normal(0, 0.1, 2 * n_cal))
    z = {i: rng.normal(size=3) for i in range(n_cal)}
    table = build_table(rt, z)
    n_test = 50
    tsid = np.repeat(np.arange(100, 100 + n_test), 2)
    truth = rng.uniform(0.7, 1.3, 2 * n_test)
    data = ScreeningData(tsid, np.ones_like(tsid), np.tile([1, 2], n_test), truth,
                         truth - rng.normal(0, 0.1, 2 * n_test),
                         embeddings={i: rng.normal(size=3) for i in range(100, 100 + n_test)})
    return table, data


def test_alpha_sweep_structure():
    table, data = _sweep_setup()
    grid = [0.05, 0.1, 0.2]
    pts = alpha_sweep(data, StratifiedConformal.from_table(table), KernelConformal.from_table(table), grid)
    assert len(pts) == len(grid) * 2
    assert [p.method for p in pts] == ["SCP"] * 3 + ["KCP"] * 3
    scp_recall = [p.recall for p in pts if p.method == "SCP"]
    assert all(b <= a for a, b in zip(scp_recall, scp_recall[1:]))
    rows = list(csv.reader(io.StringIO(sweep_csv(pts))))
    assert rows[0] == ["method", "alpha_or_tau", "recall", "precision", "coverage"]
    assert len(rows) == 1 + len(pts)
    with pytest.raises(ValueError):
        alpha_sweep(data, None, None, [0.2, 0.1])


def test_alpha_sweep_saturates_at_tiny_alpha():
    table, data = _sweep_setup(n_cal=30)
    pts = alpha_sweep(data, StratifiedConformal.from_table(table), None, [0.001])
    m = pts[0]
    base_rate = np.mean(data.truth > 1)
    assert m.recall == 1.0 and m.precision == pytest.approx(base_rate)
    assert m.coverage == 1.0


def test_table_layout():
    truth = np.array([1.2, 0.5, 1.1, 0.7])
    k = np.array([1, 1, 2, 2])
    reports = {m: evaluate(flag_lines(truth * s, truth, k=k)) for m, s in
               (("Point", 1.0), ("+SCP", 1.1), ("+KCP", 1.05), ("DCPF", 0.9))}
    text = format_table(reports)
    lines = text.splitlines()
    header = next(line for line in lines if line.startswith("Level"))
    assert header.split() == ["Level", "Point", "+SCP", "+KCP", "DCPF"]
    rows = [line.split()[0] for line in lines if line[:3] in ("N-1", "N-2", "All")]
    assert rows == ["N-1", "N-2", "All"]
    assert "1.000 (1.000)" in text
    assert "n/a" in text  # DCPF finds no overloads, precision undefined
    tables = {m: coverage_by_stratum(flag_lines(truth, truth, k=k)) for m in reports}
    cov = list(csv.reader(io.StringIO(coverage_csv(tables))))
    assert cov[0] == ["method", "level", "coverage", "n_records"]


def test_threshold_bound_for_coverage():
    f = flag_lines([0.5, 0.9], [0.7, 1.0], Threshold(0.8))
    np.testing.assert_allclose(f.bound, [0.625, 1.125])
    assert f.covered.tolist() == [False, True]
    assert math.isinf(flag_lines([0.5], [0.2], Threshold(0.0)).bound[0])
