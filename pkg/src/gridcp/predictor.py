"""Point predictors of post-contingency loadings and residual bookkeeping.

Two built-ins stand in for a learned model: a DC power-flow predictor and a
noisy oracle that perturbs the AC ground truth with k-dependent bias and
load-dependent (heteroscedastic) spread.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import IndexMismatch, MissingBias
from .grid_model import GridCase
from .powerflow import dc_loadings, solve_dc
from .scenario import LabeledScenario, Scenario, apply_scenario


@dataclass(frozen=True)
class PredictedLoadings:
    scenario_id: int
    branch_ids: tuple[int, ...]
    l_hat: np.ndarray
    source: str


@dataclass(frozen=True)
class ResidualRecord:
    scenario_id: int
    k: int
    branch_id: int
    residual: float


def predict_dcpf(case: GridCase, scenario: Scenario) -> PredictedLoadings:
    """DC loading |flow| / rating on the post-contingency network.

    Reads only topology, active injections and ratings; reactive load and AC
    voltages never enter.
    """
    post = apply_scenario(case, scenario)
    dc = solve_dc(post)
    return PredictedLoadings(scenario.id, post.branch_ids, dc_loadings(post, dc), "dcpf")


@dataclass(frozen=True)
class NoiseSpec:
    bias_by_k: Mapping[int, float]
    sigma_base: float = 0.02
    hetero_gain: float = 2.0
    seed: int = 0
    # range of the per-bus load multipliers the scenarios were drawn from
    load_range: tuple[float, float] = (0.8, 1.2)


def load_level(case: GridCase, scenario: Scenario, load_range=(0.8, 1.2)) -> float:
    """Total-load percentile g in [0, 1] of a scenario.

    The load-weighted mean multiplier is mapped through the normal CDF using
    the mean and standard deviation implied by i.i.d. uniform per-bus
    multipliers on ``load_range``, so g is close to uniform across scenarios.
    """
    p = case.arrays.p_load
    total = p.sum()
    lo, hi = load_range
    if total <= 0 or hi <= lo:
        return 0.5
    s = float(p @ np.asarray(scenario.load_scale)) / total
    sd = (hi - lo) / np.sqrt(12.0) * np.sqrt(float(p @ p)) / total
    return float(ndtr((s - 0.5 * (lo + hi)) / sd))


def noise_sigma(case: GridCase, scenario: Scenario, noise: NoiseSpec) -> float:
    g = load_level(case, scenario, noise.load_range)
    return noise.sigma_base * (1.0 + noise.hetero_gain * g)


def predict_noisy_oracle(case: GridCase, labeled: LabeledScenario, noise: NoiseSpec) -> PredictedLoadings:
    """Surrogate prediction L_hat = L - eps, eps ~ Normal(bias_by_k[k], sigma(z)^2).

    Draws are seeded by ``(noise.seed, scenario id)`` so each scenario's
    prediction is reproducible on its own.
    """
    sc = labeled.scenario
    if sc.k not in noise.bias_by_k:
        raise MissingBias(f"no bias configured for k={sc.k}")
    sigma = noise_sigma(case, sc, noise)
    rng = np.random.default_rng([int(noise.seed), int(sc.id)])
    eps = float(noise.bias_by_k[sc.k]) + sigma * rng.standard_normal(len(labeled.branch_ids))
    return PredictedLoadings(sc.id, labeled.branch_ids, labeled.true_loadings - eps, "noisy_oracle")


@dataclass(frozen=True)
class ResidualTable:
    """Columnar store of residual records, one row per (scenario, in-service branch)."""

    scenario_id: np.ndarray
    k: np.ndarray
    branch_id: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return self.residual.size

    def __iter__(self) -> Iterator[ResidualRecord]:
        for s, k, b, r in zip(self.scenario_id.tolist(), self.k.tolist(),
                              self.branch_id.tolist(), self.residual.tolist()):
            yield ResidualRecord(s, k, b, r)

    def group(self, branch_id: int, k: int) -> np.ndarray:
        """Residuals of stratum (branch_id, k) in record order."""
        mask = (self.branch_id == branch_id) & (self.k == k)
        return self.residual[mask]

    @classmethod
    def from_records(cls, records: Sequence[ResidualRecord]) -> "ResidualTable":
        return cls(
            scenario_id=np.array([r.scenario_id for r in records], dtype=np.int64),
            k=np.array([r.k for r in records], dtype=np.int64),
            branch_id=np.array([r.branch_id for r in records], dtype=np.int64),
            residual=np.array([r.residual for r in records], dtype=float),
        )


def compute_residuals(labeled_set: Sequence[LabeledScenario],
                      predictions: Sequence[PredictedLoadings] | Mapping[int, PredictedLoadings]) -> ResidualTable:
    """R = L - L_hat for every (scenario, in-service branch)."""
    if not isinstance(predictions, Mapping):
        by_id = {}
        for p in predictions:
            if p.scenario_id in by_id:
                raise IndexMismatch(f"scenario {p.scenario_id}: more than one prediction")
            by_id[p.scenario_id] = p
        predictions = by_id
    sids, ks, bids, res = [], [], [], []
    for lab in labeled_set:
        sid = lab.scenario.id
        pred = predictions.get(sid)
        if pred is None:
            raise IndexMismatch(f"scenario {sid}: no prediction")
        if tuple(pred.branch_ids) != tuple(lab.branch_ids):
            raise IndexMismatch(f"scenario {sid}: predicted branch set differs from labelled branch set")
        n = len(lab.branch_ids)
        sids.append(np.full(n, sid, dtype=np.int64))
        ks.append(np.full(n, lab.scenario.k, dtype=np.int64))
        bids.append(np.asarray(lab.branch_ids, dtype=np.int64))
        res.append(np.asarray(lab.true_loadings, dtype=float) - np.asarray(pred.l_hat, dtype=float))
    cat = (lambda parts, dt: np.concatenate(parts) if parts else np.array([], dtype=dt))
    return ResidualTable(cat(sids, np.int64), cat(ks, np.int64), cat(bids, np.int64), cat(res, float))
