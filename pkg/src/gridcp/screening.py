"""Flagging, recall/precision/coverage by N-k level, and precision-recall sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._validation import check_alpha, check_aligned
from .errors import IndexMismatch

FLAG_LIMIT = 1.0


@dataclass(frozen=True)
class Threshold:
    """Flag when the raw statistic exceeds ``tau`` (uniformly tightened line limits)."""

    tau: float


BOUND = "bound"


@dataclass(frozen=True)
class FlagSet:
    scenario_id: np.ndarray
    branch_id: np.ndarray
    k: np.ndarray
    bound: np.ndarray
    truth: np.ndarray
    predicted_flag: np.ndarray
    true_flag: np.ndarray
    method: str = ""

    def __len__(self):
        return self.truth.size

    @property
    def covered(self) -> np.ndarray:
        return self.truth <= self.bound


def flag_lines(bounds, truths, rule=BOUND, *, scenario_id=None, branch_id=None, k=None,
               method: str = "") -> FlagSet:
    """Apply the flag rule record-wise.

    In bound mode a record is flagged when ``bound > 1``. With
    ``Threshold(tau)`` the first argument is the raw statistic, flagged when
    ``statistic > tau``; the implied bound used for coverage is
    ``statistic / tau`` (``inf`` for ``tau <= 0``). Truth is overloaded when
    ``truth > 1``; both inequalities are strict.
    """
    stat, truth = check_aligned(bounds, truths, names=("bounds", "truths"))
    stat = stat.astype(float)
    truth = truth.astype(float)
    n = truth.size
    ids = []
    for arr, name in ((scenario_id, "scenario_id"), (branch_id, "branch_id"), (k, "k")):
        a = np.zeros(n, dtype=np.int64) if arr is None else np.asarray(arr, dtype=np.int64).reshape(-1)
        if a.size != n:
            raise IndexMismatch(f"{name} has {a.size} entries for {n} records")
        ids.append(a)
    if isinstance(rule, Threshold):
        tau = float(rule.tau)
        predicted = stat > tau
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = stat / tau if tau > 0 else np.full(n, np.inf)
    elif rule == BOUND:
        predicted = stat > FLAG_LIMIT
        bound = stat
    else:
        raise ValueError(f"unknown flag rule {rule!r}")
    return FlagSet(ids[0], ids[1], ids[2], bound, truth, predicted, truth > FLAG_LIMIT, method)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    n_covered: int
    n_scenarios: int

    @property
    def n_records(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def coverage(self) -> float | None:
        return self.n_covered / self.n_records if self.n_records else None

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn,
                       self.n_covered + other.n_covered, self.n_scenarios + other.n_scenarios)


def _metrics(flags: FlagSet, mask) -> Metrics:
    p, t = flags.predicted_flag[mask], flags.true_flag[mask]
    return Metrics(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)), tn=int(np.sum(~p & ~t)),
        n_covered=int(np.sum(flags.covered[mask])),
        n_scenarios=int(np.unique(flags.scenario_id[mask]).size),
    )


@dataclass(frozen=True)
class ScreeningReport:
    method: str
    by_k: dict            # k -> Metrics
    overall: Metrics      # pooled counts
    mean_recall: float | None     # unweighted mean of per-k rates
    mean_precision: float | None


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def evaluate(flags: FlagSet, strata=None) -> ScreeningReport:
    """Per-k and pooled confusion counts, recall, precision and coverage."""
    ks = flags.k if strata is None else np.asarray(strata, dtype=np.int64).reshape(-1)
    if ks.size != len(flags):
        raise IndexMismatch("strata labels do not align with the flag set")
    by_k = {int(level): _metrics(flags, ks == level) for level in np.unique(ks)}
    overall = _metrics(flags, np.ones(len(flags), dtype=bool))
    return ScreeningReport(
        flags.method, by_k, overall,
        _mean_defined(m.recall for m in by_k.values()),
        _mean_defined(m.precision for m in by_k.values()),
    )


@dataclass(frozen=True)
class CoverageTable:
    by_k: dict               # k -> (coverage, n)
    by_stratum: dict         # (branch_id, k) -> (coverage, n)
    equal_weighted: float | None
    sample_weighted: float | None


def coverage_by_stratum(flags: FlagSet, strata=None, min_records: int = 1) -> CoverageTable:
    """Empirical P(L <= bound) per level and per (branch, level).

    Averages run over (branch, level) strata holding at least ``min_records``
    records; ``equal_weighted`` gives each stratum the same weight,
    ``sample_weighted`` weights by record count.
    """
    ks = flags.k if strata is None else np.asarray(strata, dtype=np.int64).reshape(-1)
    cov = flags.covered
    by_k = {int(level): (float(cov[ks == level].mean()), int(np.sum(ks == level))) for level in np.unique(ks)}
    keys = np.stack([flags.branch_id, ks], axis=1) if len(flags) else np.empty((0, 2), dtype=np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq))
    hits = np.bincount(inv, weights=cov.astype(float), minlength=len(uniq))
    by_stratum = {(int(b), int(k)): (float(h / c), int(c)) for (b, k), h, c in zip(uniq, hits, counts)}
    sel = counts >= min_records
    eq = float(np.mean(hits[sel] / counts[sel])) if sel.any() else None
    sw = float(hits[sel].sum() / counts[sel].sum()) if sel.any() else None
    return CoverageTable(by_k, by_stratum, eq, sw)


@dataclass(frozen=True)
class CurvePoint:
    method: str
    param: float      # alpha for conformal methods, tau for threshold tuning
    recall: float | None
    precision: float | None
    coverage: float | None


def threshold_sweep(statistics, truths, taus: Sequence[float], method: str = "threshold") -> list[CurvePoint]:
    """One (recall, precision) point per threshold; ``taus`` must be descending."""
    taus = [float(t) for t in taus]
    if any(b > a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau grid must be sorted in descending order")
    stat, truth = check_aligned(statistics, truths, names=("statistics", "truths"))
    out = []
    for tau in taus:
        m = _metrics(flag_lines(stat, truth, Threshold(tau)), slice(None))
        out.append(CurvePoint(method, tau, m.recall, m.precision, m.coverage))
    return out


def precision_at_recall(statistics, truths, min_recall: float) -> float | None:
    """Best precision over all thresholds whose recall is at least ``min_recall``.

    Every distinct statistic value is tried as a threshold (flag when
    ``statistic >= value``), which traces the full empirical PR curve.
    """
    stat, truth = check_aligned(statistics, truths, names=("statistics", "truths"))
    pos = truth.astype(float) > FLAG_LIMIT
    n_pos = int(pos.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-stat.astype(float), kind="stable")
    s_sorted = stat[order]
    tp = np.cumsum(pos[order])
    flagged = np.arange(1, stat.size + 1)
    # only cut where the next statistic differs, so ties are flagged together
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    recall = tp[last] / n_pos
    precision = tp[last] / flagged[last]
    ok = recall >= min_recall
    return float(precision[ok].max()) if ok.any() else None


# --------------------------------------------------------------- the study

@dataclass(frozen=True)
class ScreeningData:
    """Columnar test records: one row per (scenario, in-service branch)."""

    scenario_id: np.ndarray
    k: np.ndarray
    branch_id: np.ndarray
    truth: np.ndarray
    l_hat: np.ndarray
    dc: np.ndarray | None = None
    embeddings: Mapping[int, np.ndarray] = field(default_factory=dict)


def alpha_sweep(data: ScreeningData, scp, kcp, alphas: Sequence[float]) -> list[CurvePoint]:
    """Recalibrate SCP and KCP bounds at each alpha on fixed test data.

    ``scp`` and ``kcp`` are fitted :class:`~gridcp.conformal.StratifiedConformal`
    and :class:`~gridcp.conformal.KernelConformal` instances (either may be None).
    """
    alphas = [check_alpha(a) for a in alphas]
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alpha grid must be sorted ascending")
    points = []
    if scp is not None:
        for a in alphas:
            bound = scp.predict(data.l_hat, data.branch_id, data.k, alpha=a)
            m = _metrics(flag_lines(bound, data.truth, scenario_id=data.scenario_id), slice(None))
            points.append(CurvePoint("SCP", a, m.recall, m.precision, m.coverage))
    if kcp is not None and alphas:
        q, _ = kcp.quantile(data.scenario_id, data.k, data.branch_id, data.embeddings, alpha=np.array(alphas))
        for a, qa in zip(alphas, q):
            m = _metrics(flag_lines(data.l_hat + qa, data.truth, scenario_id=data.scenario_id), slice(None))
            points.append(CurvePoint("KCP", a, m.recall, m.precision, m.coverage))
    return points


# -------------------------------------------------------------- reporting

def _fmt(v, digits=3):
    return "n/a" if v is None else f"{v:.{digits}f}"


def _cell(m: Metrics | None):
    if m is None:
        return "-"
    return f"{_fmt(m.recall)} ({_fmt(m.precision)})"


def format_table(reports: Mapping[str, ScreeningReport], title: str = "") -> str:
    """Aligned text table: rows N-1 ... N-K then All, cells 'recall (precision)'."""
    methods = list(reports)
    levels = sorted({k for r in reports.values() for k in r.by_k})
    rows = [["Level", *methods]]
    for k in levels:
        rows.append([f"N-{k}", *(_cell(reports[m].by_k.get(k)) for m in methods)])
    rows.append(["All", *(_cell(reports[m].overall) for m in methods)])
    rows.append(["Mean(k)", *(f"{_fmt(reports[m].mean_recall)} ({_fmt(reports[m].mean_precision)})"
                              for m in methods)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [title or "Recall (Precision) for Line Congestion Screening by N-k Level"]
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths))))
        if i == 0 or i == len(levels):
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines) + "\n"


def _num(v):
    if v is None:
        return "null"
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) for v in r])
    return buf.getvalue()


def report_csv(reports: Mapping[str, ScreeningReport]) -> str:
    rows = []
    for name, rep in reports.items():
        for k, m in sorted(rep.by_k.items()):
            rows.append([name, f"N-{k}", m.recall, m.precision, m.coverage, m.tp, m.fp, m.fn, m.tn,
                         m.n_records, m.n_scenarios])
        m = rep.overall
        rows.append([name, "All", m.recall, m.precision, m.coverage, m.tp, m.fp, m.fn, m.tn,
                     m.n_records, m.n_scenarios])
        rows.append([name, "Mean(k)", rep.mean_recall, rep.mean_precision, None, None, None, None, None,
                     None, None])
    return _write_csv(["method", "level", "recall", "precision", "coverage", "tp", "fp", "fn", "tn",
                       "n_records", "n_scenarios"], rows)


def coverage_csv(tables: Mapping[str, CoverageTable]) -> str:
    rows = []
    for name, t in tables.items():
        for k, (c, n) in sorted(t.by_k.items()):
            rows.append([name, f"N-{k}", c, n])
        rows.append([name, "strata_equal_weighted", t.equal_weighted, None])
        rows.append([name, "strata_sample_weighted", t.sample_weighted, None])
    return _write_csv(["method", "level", "coverage", "n_records"], rows)


def stratum_coverage_csv(tables: Mapping[str, CoverageTable]) -> str:
    rows = [[name, b, k, c, n] for name, t in tables.items() for (b, k), (c, n) in sorted(t.by_stratum.items())]
    return _write_csv(["method", "branch_id", "k", "coverage", "n_records"], rows)


def sweep_csv(points: Sequence[CurvePoint]) -> str:
    return _write_csv(["method", "alpha_or_tau", "recall", "precision", "coverage"],
                      [[p.method, p.param, p.recall, p.precision, p.coverage] for p in points])
