"""Stratified and kernel-weighted conformal calibration of upper loading bounds.

Residuals ``R = L - L_hat`` are grouped into strata keyed by ``(branch_id, k)``.
The stratified calibrator returns the conformal order statistic of a
stratum; the kernel-weighted calibrator reweights the same residuals by the
similarity of each calibration scenario to the test scenario and falls back
to the stratified value when the effective sample size is too small.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_alpha
from .errors import DimensionMismatch, DuplicateRecord, EmptyStratum, IndexMismatch, IntegrityError
from .predictor import ResidualTable

TABLE_FORMAT = "gridcp-calibration-table"
TABLE_VERSION = 1

# relative slack on the cumulative-mass target; absorbs float rounding in (1 - alpha) * mass
_MASS_RTOL = 1e-12


class BoundMethod(str, enum.Enum):
    SCP = "SCP"
    KCP = "KCP"
    KCP_FALLBACK = "KCP_FALLBACK"


@dataclass(frozen=True)
class KcpConfig:
    k_nn: int = 20
    n_eff_min: float = 5.0
    bandwidth_floor: float = 1e-12
    test_atom: bool = True

    def __post_init__(self):
        if self.k_nn < 1:
            raise ValueError("k_nn must be >= 1")
        if self.n_eff_min < 1:
            raise ValueError("n_eff_min must be >= 1")
        if not self.bandwidth_floor > 0:
            raise ValueError("bandwidth_floor must be > 0")


@dataclass(frozen=True)
class BoundResult:
    q_hat: float
    upper: float
    method_used: BoundMethod
    n_eff: float | None = None


def _mass_target(mass, alpha):
    return (1.0 - alpha) * mass * (1.0 - _MASS_RTOL)


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)) of the conformal order statistic."""
    return max(1, math.ceil(_mass_target(n + 1, alpha)))


def _scp_sorted(sorted_residuals: np.ndarray, alpha: float) -> float:
    n = sorted_residuals.size
    if n == 0:
        return math.inf
    r = conformal_rank(n, alpha)
    if r > n:
        return math.inf
    return float(sorted_residuals[r - 1])


def kernel_weights(d_sq, h_sq: float) -> np.ndarray:
    """Normalized Gaussian kernel weights exp(-d^2/h^2) / sum.

    The exponent is shifted by the smallest distance before exponentiating,
    which leaves the normalized weights unchanged and prevents underflow.
    """
    d = np.asarray(d_sq, dtype=float)
    if not h_sq > 0:
        raise ValueError("h_sq must be > 0")
    e = np.exp(-(d - d.min()) / h_sq)
    return e / e.sum()


def adaptive_bandwidth(d_sq, k_nn: int, bandwidth_floor: float = 1e-12) -> float:
    """Squared distance to the k_nn-th nearest calibration point (clamped to n)."""
    d = np.asarray(d_sq, dtype=float)
    if d.size == 0:
        raise ValueError("need at least one calibration point")
    kk = min(int(k_nn), d.size)
    h_sq = float(np.partition(d, kk - 1)[kk - 1])
    return max(h_sq, bandwidth_floor)


def effective_sample_size(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(1.0 / np.sum(w * w))


def _weighted_sorted(sorted_residuals, sorted_weights, test_weight, alpha) -> float:
    if sorted_residuals.size == 0:
        return math.inf
    c = np.cumsum(sorted_weights)
    target = _mass_target(c[-1] + test_weight, alpha)
    idx = int(np.searchsorted(c, target, side="left"))
    if idx >= c.size:
        return math.inf
    return float(sorted_residuals[idx])


def weighted_quantile(residuals, weights, alpha: float, test_weight: float = 1.0) -> float:
    """Weighted conformal quantile with a point mass at +inf for the test point.

    ``weights`` and ``test_weight`` share one scale (e.g. unnormalized kernel
    values, with ``test_weight = exp(0) = 1``). Returns the smallest residual
    whose cumulative share of the augmented mass reaches ``1 - alpha``, or
    ``inf`` when only the test atom gets there. ``test_weight=0`` drops the atom.
    """
    check_alpha(alpha)
    res = np.asarray(residuals, dtype=float)
    w = np.asarray(weights, dtype=float)
    if res.shape != w.shape:
        raise ValueError("residuals and weights must align")
    order = np.argsort(res, kind="stable")
    return _weighted_sorted(res[order], w[order], float(test_weight), alpha)


# ------------------------------------------------------------------- table

@dataclass(frozen=True)
class Stratum:
    residuals: np.ndarray     # ascending
    scenario_ids: np.ndarray  # aligned with residuals

    def __len__(self):
        return self.residuals.size


@dataclass(frozen=True)
class CalibrationTable:
    strata: dict
    embeddings: dict          # k -> (scenario_ids ascending, Z matrix)
    alpha_default: float = 0.1
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_per_stratum(self) -> dict:
        return {key: len(s) for key, s in self.strata.items()}

    @property
    def levels(self) -> list[int]:
        return sorted({k for _, k in self.strata} | set(self.embeddings))

    @property
    def empty_strata(self) -> list:
        return sorted(key for key, s in self.strata.items() if len(s) == 0)

    def residuals(self, branch_id: int, k: int) -> np.ndarray:
        s = self.strata.get((branch_id, k))
        return s.residuals if s is not None else np.array([], dtype=float)

    def _level_block(self, k):
        """Padded (line x scenario) gather indices and residuals for level k."""
        key = ("block", k)
        if key not in self._cache:
            sids, _ = self.embeddings[k]
            n = sids.size
            lines = sorted(b for (b, kk) in self.strata if kk == k)
            pos_of = {int(s): i for i, s in enumerate(sids.tolist())}
            pos = np.full((len(lines), n), n, dtype=np.int64)
            res = np.full((len(lines), n), np.inf)
            for row, b in enumerate(lines):
                st = self.strata[(b, k)]
                m = len(st)
                pos[row, :m] = [pos_of[int(s)] for s in st.scenario_ids.tolist()]
                res[row, :m] = st.residuals
            self._cache[key] = ({b: i for i, b in enumerate(lines)}, pos, res)
        return self._cache[key]


def build_table(residuals: ResidualTable, embeddings: Mapping[int, np.ndarray] | None = None, *,
                alpha: float = 0.1, branch_ids: Sequence[int] | None = None,
                levels: Sequence[int] | None = None, meta: dict | None = None) -> CalibrationTable:
    """Group calibration residuals into sorted (branch, k) strata.

    ``embeddings`` maps scenario id to its embedding vector. Passing
    ``branch_ids`` and ``levels`` registers every combination, so strata
    without data show up as empty instead of missing.
    """
    check_alpha(alpha)
    sid, k, bid, r = residuals.scenario_id, residuals.k, residuals.branch_id, residuals.residual
    if sid.size:
        order = np.lexsort((bid, sid))
        same = (sid[order][1:] == sid[order][:-1]) & (bid[order][1:] == bid[order][:-1])
        if same.any():
            j = order[1:][same][0]
            raise DuplicateRecord(f"duplicate record for scenario {sid[j]}, branch {bid[j]}")
        scen_k: dict[int, int] = {}
        for s, kk in zip(sid.tolist(), k.tolist()):
            if scen_k.setdefault(s, kk) != kk:
                raise IndexMismatch(f"scenario {s} appears with more than one k")

    strata: dict = {}
    order = np.lexsort((r, bid, k))
    ks, bs = k[order], bid[order]
    if order.size:
        cut = np.flatnonzero((ks[1:] != ks[:-1]) | (bs[1:] != bs[:-1])) + 1
        for chunk in np.split(order, cut):
            key = (int(bid[chunk[0]]), int(k[chunk[0]]))
            strata[key] = Stratum(r[chunk].copy(), sid[chunk].copy())
    if branch_ids is not None and levels is not None:
        for kk in levels:
            for b in branch_ids:
                strata.setdefault((int(b), int(kk)), Stratum(np.array([], float), np.array([], np.int64)))

    emb: dict = {}
    if embeddings is not None:
        dim = None
        for kk in sorted(set(k.tolist())):
            ids = np.unique(sid[k == kk])
            try:
                rows = [np.asarray(embeddings[int(s)], dtype=float) for s in ids.tolist()]
            except KeyError as exc:
                raise IndexMismatch(f"no embedding for calibration scenario {exc.args[0]}") from None
            z = np.vstack(rows)
            if dim is None:
                dim = z.shape[1]
            elif z.shape[1] != dim:
                raise DimensionMismatch("embedding dimension differs between levels")
            emb[kk] = (ids, z)
    return CalibrationTable(dict(sorted(strata.items())), emb, float(alpha), dict(meta or {}))


def scp_quantile(table: CalibrationTable, branch_id: int, k: int, alpha: float | None = None) -> float:
    """Conformal order statistic of stratum (branch_id, k); ``inf`` if too few residuals."""
    alpha = table.alpha_default if alpha is None else alpha
    check_alpha(alpha)
    return _scp_sorted(table.residuals(branch_id, k), alpha)


@dataclass(frozen=True)
class KcpResult:
    q_hat: np.ndarray
    n_eff: float
    method_used: BoundMethod
    h_sq: float


def kcp_quantiles(table: CalibrationTable, config: KcpConfig, z_test, k: int,
                  alpha, branch_ids: Sequence[int]) -> KcpResult:
    """Kernel-weighted quantiles for every listed branch of one test scenario.

    Distances, bandwidth and weights are computed once for the scenario and
    shared by all its branches. ``alpha`` may be a scalar or a 1-D grid, in
    which case ``q_hat`` has shape ``(len(alpha), len(branch_ids))``.
    """
    if k not in table.embeddings or table.embeddings[k][0].size == 0:
        raise EmptyStratum(f"no calibration data for k={k}")
    alphas = np.atleast_1d(np.asarray(alpha, dtype=float))
    for a in alphas:
        check_alpha(a)
    branch_ids = [int(b) for b in branch_ids]
    _, z = table.embeddings[k]
    zt = np.asarray(z_test, dtype=float)
    if zt.shape != (z.shape[1],):
        raise DimensionMismatch(f"test embedding has shape {zt.shape}, calibration dimension {z.shape[1]}")
    diff = z - zt
    d_sq = np.einsum("ij,ij->i", diff, diff)
    h_sq = adaptive_bandwidth(d_sq, config.k_nn, config.bandwidth_floor)
    n_eff = effective_sample_size(kernel_weights(d_sq, h_sq))

    if n_eff < config.n_eff_min:
        q = np.array([[_scp_sorted(table.residuals(b, k), a) for b in branch_ids] for a in alphas])
        method = BoundMethod.KCP_FALLBACK
    else:
        row_of, pos, res = table._level_block(k)
        kern = np.append(np.exp(-d_sq / h_sq), 0.0)
        test_w = 1.0 if config.test_atom else 0.0
        q = np.full((alphas.size, len(branch_ids)), math.inf)
        have = [i for i, b in enumerate(branch_ids) if b in row_of]
        if have:
            rows = np.array([row_of[branch_ids[i]] for i in have])
            c = np.cumsum(kern[pos[rows]], axis=1)
            target = _mass_target(c[:, -1] + test_w, alphas[:, None])
            hit = c[None, :, :] >= target[:, :, None]
            idx = hit.argmax(axis=2)
            found = np.take_along_axis(hit, idx[:, :, None], axis=2)[:, :, 0]
            vals = res[rows][np.arange(rows.size)[None, :], idx]
            q[:, have] = np.where(found, vals, math.inf)
        method = BoundMethod.KCP
    if np.ndim(alpha) == 0:
        q = q[0]
    return KcpResult(q, n_eff, method, h_sq)


def kcp_quantile(table: CalibrationTable, config: KcpConfig, z_test, branch_id: int, k: int,
                 alpha: float | None = None):
    """Single-branch KCP query; returns ``(q_hat, n_eff, method_used)``."""
    alpha = table.alpha_default if alpha is None else alpha
    out = kcp_quantiles(table, config, z_test, k, alpha, [branch_id])
    return float(out.q_hat[0]), out.n_eff, out.method_used


def upper_bound(l_hat, q_hat):
    """L_hat + q_hat; an infinite correction yields an infinite bound."""
    if np.ndim(l_hat) == 0 and np.ndim(q_hat) == 0:
        return float(l_hat) + float(q_hat)
    return np.asarray(l_hat, dtype=float) + np.asarray(q_hat, dtype=float)


# ----------------------------------------------------------- serialization

def _payload_checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def table_to_json(table: CalibrationTable) -> str:
    payload = {
        "alpha_default": table.alpha_default,
        "meta": table.meta,
        "strata": [
            {"branch_id": b, "k": k, "residuals": s.residuals.tolist(),
             "scenario_ids": s.scenario_ids.tolist()}
            for (b, k), s in table.strata.items()
        ],
        "embeddings": [
            {"k": k, "scenario_ids": ids.tolist(), "z": z.tolist()}
            for k, (ids, z) in sorted(table.embeddings.items())
        ],
    }
    doc = {"format": TABLE_FORMAT, "version": TABLE_VERSION,
           "checksum": _payload_checksum(payload), "payload": payload}
    return json.dumps(doc, sort_keys=True)


def table_from_json(text: str) -> CalibrationTable:
    """Load a serialized table, refusing it if the checksum does not match."""
    doc = json.loads(text)
    if doc.get("format") != TABLE_FORMAT or doc.get("version") != TABLE_VERSION:
        raise IntegrityError("not a calibration table of a supported version")
    payload = doc["payload"]
    if _payload_checksum(payload) != doc.get("checksum"):
        raise IntegrityError("calibration table checksum mismatch; file was modified")
    strata = {
        (int(s["branch_id"]), int(s["k"])): Stratum(np.asarray(s["residuals"], dtype=float),
                                                     np.asarray(s["scenario_ids"], dtype=np.int64))
        for s in payload["strata"]
    }
    emb = {}
    for e in payload["embeddings"]:
        ids = np.asarray(e["scenario_ids"], dtype=np.int64)
        z = np.asarray(e["z"], dtype=float).reshape(ids.size, -1)
        emb[int(e["k"])] = (ids, z)
    return CalibrationTable(strata, emb, float(payload["alpha_default"]), payload["meta"])


# -------------------------------------------------------------- estimators

class StratifiedConformal(BaseEstimator):
    """Upper bounds from per-(branch, k) split-conformal quantiles.

    Parameters
    ----------
    alpha : float, default=0.1
        Target miscoverage; bounds aim at ``P(L <= L_hat + q) >= 1 - alpha``.
    """

    def __init__(self, alpha=0.1):
        self.alpha = alpha

    def fit(self, residuals, y=None):
        check_alpha(self.alpha)
        self.table_ = build_table(residuals, alpha=self.alpha)
        return self

    @classmethod
    def from_table(cls, table: CalibrationTable, **params):
        est = cls(**{"alpha": table.alpha_default, **params})
        est.table_ = table
        return est

    def quantile(self, branch_ids, ks, alpha=None):
        """q_hat for each record; records share a value when they share a stratum."""
        check_is_fitted(self, "table_")
        alpha = self.alpha if alpha is None else alpha
        check_alpha(alpha)
        b = np.asarray(branch_ids, dtype=np.int64)
        k = np.asarray(ks, dtype=np.int64)
        keys, inv = np.unique(np.stack([b, k], axis=1), axis=0, return_inverse=True)
        vals = np.array([scp_quantile(self.table_, int(bb), int(kk), alpha) for bb, kk in keys])
        return vals[inv.reshape(-1)] if vals.size else np.array([], dtype=float)

    def predict(self, l_hat, branch_ids, ks, alpha=None):
        return upper_bound(np.asarray(l_hat, dtype=float), self.quantile(branch_ids, ks, alpha))


class KernelConformal(BaseEstimator):
    """Scenario-localized conformal bounds with kernel-weighted residuals.

    Calibration scenarios of the same outage level are weighted by
    ``exp(-d^2 / h^2)`` where ``d`` is the embedding distance to the test
    scenario and ``h^2`` the squared distance to its ``k_nn``-th neighbour.
    If the effective sample size drops below ``n_eff_min`` the stratified
    quantile is returned instead.

    Parameters
    ----------
    alpha : float, default=0.1
    k_nn : int, default=20
    n_eff_min : float, default=5
    bandwidth_floor : float, default=1e-12
    test_atom : bool, default=True
        Keep the unit-weight mass at +inf for the test point. Disabling it
        reproduces a calibration-only normalization (ablation only).
    """

    def __init__(self, alpha=0.1, k_nn=20, n_eff_min=5, bandwidth_floor=1e-12, test_atom=True):
        self.alpha = alpha
        self.k_nn = k_nn
        self.n_eff_min = n_eff_min
        self.bandwidth_floor = bandwidth_floor
        self.test_atom = test_atom

    @property
    def config(self) -> KcpConfig:
        return KcpConfig(int(self.k_nn), float(self.n_eff_min), float(self.bandwidth_floor), bool(self.test_atom))

    def fit(self, residuals, embeddings):
        check_alpha(self.alpha)
        self.config  # validates hyper-parameters
        self.table_ = build_table(residuals, embeddings, alpha=self.alpha)
        return self

    @classmethod
    def from_table(cls, table: CalibrationTable, **params):
        est = cls(**{"alpha": table.alpha_default, **params})
        est.table_ = table
        return est

    def quantile(self, scenario_ids, ks, branch_ids, embeddings: Mapping[int, np.ndarray], alpha=None):
        """Per-record q_hat plus per-scenario diagnostics.

        Returns ``(q_hat, info)`` where ``info`` maps scenario id to
        ``(n_eff, method_used)``. With a 1-D ``alpha`` grid ``q_hat`` has
        shape ``(len(alpha), n_records)``.
        """
        check_is_fitted(self, "table_")
        alpha = self.alpha if alpha is None else alpha
        cfg = self.config
        sid = np.asarray(scenario_ids, dtype=np.int64)
        k = np.asarray(ks, dtype=np.int64)
        b = np.asarray(branch_ids, dtype=np.int64)
        alphas = np.atleast_1d(np.asarray(alpha, dtype=float))
        q = np.empty((alphas.size, sid.size))
        info = {}
        order = np.argsort(sid, kind="stable")
        cuts = np.flatnonzero(np.diff(sid[order])) + 1
        for rows in np.split(order, cuts):
            if rows.size == 0:
                continue
            s = int(sid[rows[0]])
            levels = np.unique(k[rows])
            if levels.size != 1:
                raise IndexMismatch(f"scenario {s} has records at more than one k")
            res = kcp_quantiles(self.table_, cfg, embeddings[s], int(levels[0]), alphas, b[rows])
            q[:, rows] = res.q_hat
            info[s] = (res.n_eff, res.method_used)
        return (q[0] if np.ndim(alpha) == 0 else q), info

    def predict(self, l_hat, scenario_ids, ks, branch_ids, embeddings, alpha=None):
        q, _ = self.quantile(scenario_ids, ks, branch_ids, embeddings, alpha)
        return upper_bound(np.asarray(l_hat, dtype=float), q)
