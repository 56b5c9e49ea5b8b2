"""N-k contingency scenarios: sampling, ground-truth labelling, embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionMismatch, Diverged, ExhaustedSampling
from .grid_model import GridCase, branch_loadings, is_connected
from .powerflow import ACOptions, ACSolution, solve_ac

OVERSAMPLING_LIMIT = 1000


@dataclass(frozen=True)
class Scenario:
    id: int
    k: int
    outages: tuple[int, ...]
    load_scale: tuple[float, ...]
    gen_scale: tuple[float, ...]
    seed: int = 0

    def to_json(self, **extra) -> str:
        doc = {"id": self.id, "k": self.k, "outages": list(self.outages),
               "load_scale": list(self.load_scale), "gen_scale": list(self.gen_scale),
               "seed": self.seed, **extra}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Scenario":
        d = json.loads(line)
        return cls(id=int(d["id"]), k=int(d["k"]), outages=tuple(int(o) for o in d["outages"]),
                   load_scale=tuple(float(v) for v in d["load_scale"]),
                   gen_scale=tuple(float(v) for v in d["gen_scale"]), seed=int(d["seed"]))


@dataclass(frozen=True)
class ScenarioSpec:
    k_levels: Mapping[int, int]
    load_range: tuple[float, float] = (0.8, 1.2)
    gen_jitter: float = 0.02
    seed: int = 0


@dataclass(frozen=True)
class LabeledScenario:
    scenario: Scenario
    branch_ids: tuple[int, ...]
    true_loadings: np.ndarray
    ac: ACSolution | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Discarded:
    scenario: Scenario
    reason: str


def post_outage_connected(case: GridCase, outages: Iterable[int]) -> bool:
    out = set(outages)
    idx = case.bus_index
    edges = [(idx[br.from_bus], idx[br.to_bus]) for br in case.branches if br.id not in out]
    return is_connected(len(case.buses), edges)


def generate_scenarios(case: GridCase, spec: ScenarioSpec, id_offset: int = 0) -> list[Scenario]:
    """Sample contingency scenarios, rejecting outage sets that island the grid.

    Levels are drawn in ascending k from one seeded stream, so the output is a
    pure function of ``(case, spec)``.
    """
    lo, hi = spec.load_range
    if not 0 < lo <= hi:
        raise ValueError(f"load_range must satisfy 0 < lo <= hi, got {spec.load_range}")
    eligible = np.array([br.id for br in case.branches if br.outage_eligible], dtype=np.int64)
    for k, count in spec.k_levels.items():
        if count <= 0:
            raise ValueError(f"count for k={k} must be > 0")
        if not 0 <= k < eligible.size:
            raise ValueError(f"k={k} must be below the number of outage-eligible branches ({eligible.size})")

    a = case.arrays
    base_load = a.p_load.sum()
    base_gen = a.p_gen.sum()
    rng = np.random.default_rng(spec.seed)
    out: list[Scenario] = []
    next_id = id_offset
    for k in sorted(spec.k_levels):
        count = spec.k_levels[k]
        accepted, attempts = 0, 0
        while accepted < count:
            if attempts >= OVERSAMPLING_LIMIT * count:
                raise ExhaustedSampling(
                    f"k={k}: only {accepted}/{count} connected outage sets after {attempts} draws")
            attempts += 1
            outages = tuple(sorted(int(o) for o in rng.choice(eligible, size=k, replace=False)))
            if not post_outage_connected(case, outages):
                continue
            load_scale = rng.uniform(lo, hi, size=a.n_bus)
            new_load = float(a.p_load @ load_scale)
            ratio = new_load / base_load if base_load > 0 else 1.0
            jitter = rng.uniform(-spec.gen_jitter, spec.gen_jitter, size=a.p_gen.size)
            gen_scale = ratio * (1.0 + jitter) if base_gen != 0 else np.ones(a.p_gen.size)
            out.append(Scenario(id=next_id, k=k, outages=outages,
                                load_scale=tuple(load_scale.tolist()),
                                gen_scale=tuple(gen_scale.tolist()), seed=spec.seed))
            next_id += 1
            accepted += 1
    return out


def apply_scenario(case: GridCase, scenario: Scenario) -> GridCase:
    """Post-contingency case: outaged branches removed, loads and generation rescaled."""
    if len(scenario.load_scale) != len(case.buses) or len(scenario.gen_scale) != len(case.generators):
        raise DimensionMismatch("scenario multipliers do not match the case dimensions")
    out = set(scenario.outages)
    buses = tuple(replace(b, p_load=b.p_load * s, q_load=b.q_load * s)
                  for b, s in zip(case.buses, scenario.load_scale))
    gens = tuple(replace(g, p_set=g.p_set * s) for g, s in zip(case.generators, scenario.gen_scale))
    branches = tuple(br for br in case.branches if br.id not in out)
    return GridCase(buses, branches, gens, case.base_mva, name=case.name)


def label(case: GridCase, scenario: Scenario, options: ACOptions | None = None):
    """Ground-truth AC loadings for one scenario, or :class:`Discarded` on divergence."""
    post = apply_scenario(case, scenario)
    try:
        sol = solve_ac(post, options)
    except Diverged as exc:
        return Discarded(scenario, f"diverged: {exc}")
    loadings = branch_loadings(post, sol.voltage)
    return LabeledScenario(scenario, post.branch_ids, loadings, sol)


# ------------------------------------------------------------------ embedding

def raw_features(case: GridCase, scenarios: Sequence[Scenario]) -> np.ndarray:
    """Unstandardized scenario inputs: P load, Q load, P generation, outage indicators."""
    a = case.arrays
    ls = np.array([s.load_scale for s in scenarios], dtype=float).reshape(len(scenarios), a.n_bus)
    gs = np.array([s.gen_scale for s in scenarios], dtype=float).reshape(len(scenarios), a.p_gen.size)
    outage = np.zeros((len(scenarios), a.n_branch))
    pos = case.branch_index
    for i, s in enumerate(scenarios):
        for o in s.outages:
            outage[i, pos[o]] = 1.0
    return np.hstack([ls * a.p_load, ls * a.q_load, gs * a.p_gen, outage])


@dataclass(frozen=True)
class EmbeddingStats:
    case_fingerprint: str
    n_raw: int
    keep: np.ndarray  # indices of retained raw dimensions
    mean: np.ndarray
    scale: np.ndarray

    def to_dict(self) -> dict:
        return {"case_fingerprint": self.case_fingerprint, "n_raw": self.n_raw,
                "keep": self.keep.tolist(), "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "EmbeddingStats":
        return cls(d["case_fingerprint"], int(d["n_raw"]), np.asarray(d["keep"], dtype=np.int64),
                   np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


def fit_embedding_stats(case: GridCase, scenarios: Sequence[Scenario]) -> EmbeddingStats:
    x = raw_features(case, scenarios)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    keep = np.flatnonzero(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    return EmbeddingStats(case.fingerprint(), x.shape[1], keep, mean[keep], std[keep])


def embed(case: GridCase, scenario: Scenario, stats: EmbeddingStats) -> np.ndarray:
    """Standardized embedding z(x) of one scenario."""
    return embed_many(case, [scenario], stats)[0]


def embed_many(case: GridCase, scenarios: Sequence[Scenario], stats: EmbeddingStats) -> np.ndarray:
    if stats.case_fingerprint != case.fingerprint():
        raise DimensionMismatch("embedding statistics were fitted on a different case")
    x = raw_features(case, scenarios)
    if x.shape[1] != stats.n_raw:
        raise DimensionMismatch(f"expected {stats.n_raw} raw features, got {x.shape[1]}")
    return (x[:, stats.keep] - stats.mean) / stats.scale


class ScenarioEmbedder(TransformerMixin, BaseEstimator):
    """Standardize raw scenario features; fit on the calibration split only.

    Parameters
    ----------
    case : GridCase
        Base case the scenarios refer to.
    """

    def __init__(self, case=None):
        self.case = case

    def fit(self, X, y=None):
        self.stats_ = fit_embedding_stats(self.case, list(X))
        self.n_features_out_ = int(self.stats_.keep.size)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return embed_many(self.case, list(X), self.stats_)
