from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gridcp.errors import DimensionMismatch, ExhaustedSampling
from gridcp.grid_model import Branch, Bus, BusKind, GridCase, Generator, branch_loadings
from gridcp.powerflow import solve_ac
from gridcp.scenario import (Discarded, LabeledScenario, Scenario, ScenarioEmbedder, ScenarioSpec, embed,
                             embed_many, fit_embedding_stats, generate_scenarios, label, raw_features)

from conftest import chain, two_bus
from test_grid_model import UnionFind


def triangle():
    return GridCase(
        buses=[Bus(1, BusKind.SLACK, 1.0), Bus(2, BusKind.PQ, p_load=0.2), Bus(3, BusKind.PQ, p_load=0.3)],
        branches=[Branch(1, 1, 2, 0.01, 0.1), Branch(2, 2, 3, 0.01, 0.1), Branch(3, 1, 3, 0.01, 0.1)],
        generators=[Generator(1, 0.5)],
    )


def identity(case, sid=0):
    return Scenario(sid, 0, (), (1.0,) * len(case.buses), (1.0,) * len(case.generators))


def test_generation_deterministic(rts24):
    spec = ScenarioSpec({1: 5}, seed=42)
    assert generate_scenarios(rts24, spec) == generate_scenarios(rts24, spec)
    other = generate_scenarios(rts24, replace(spec, seed=43))
    assert other != generate_scenarios(rts24, spec)


def test_triangle_single_outages_never_rejected():
    sc = generate_scenarios(triangle(), ScenarioSpec({1: 60}, seed=1))
    assert {s.outages for s in sc} == {(1,), (2,), (3,)}


def test_chain_exhausts():
    with pytest.raises(ExhaustedSampling):
        generate_scenarios(chain(3), ScenarioSpec({1: 2}, seed=0))


def test_invalid_spec_rejected(rts24):
    with pytest.raises(ValueError):
        generate_scenarios(rts24, ScenarioSpec({1: 0}))
    with pytest.raises(ValueError):
        generate_scenarios(rts24, ScenarioSpec({1: 1}, load_range=(1.2, 0.8)))


def test_outages_keep_grid_connected(rts24):
    scenarios = generate_scenarios(rts24, ScenarioSpec({3: 300}, seed=5))
    pos = rts24.bus_index
    for s in scenarios:
        uf = UnionFind(len(rts24.buses))
        for br in rts24.branches:
            if br.id not in s.outages:
                uf.union(pos[br.from_bus], pos[br.to_bus])
        assert uf.n_sets() == 1
        assert len(set(s.outages)) == s.k == 3


def test_perturbation_recipe(rts24):
    spec = ScenarioSpec({1: 50, 2: 50}, load_range=(0.8, 1.2), gen_jitter=0.02, seed=9)
    scenarios = generate_scenarios(rts24, spec, id_offset=100)
    assert [s.id for s in scenarios] == list(range(100, 200))
    assert [s.k for s in scenarios] == [1] * 50 + [2] * 50
    a = rts24.arrays
    for s in scenarios:
        ls = np.array(s.load_scale)
        assert np.all((ls >= 0.8) & (ls <= 1.2))
        ratio = (a.p_load @ ls) / a.p_load.sum()
        rel = np.array(s.gen_scale) / ratio - 1
        assert np.all(np.abs(rel) <= 0.02 + 1e-12)


def test_discard_rate_below_limit(rts24):
    scenarios = generate_scenarios(rts24, ScenarioSpec({3: 200}, seed=11))
    out = [label(rts24, s) for s in scenarios]
    discarded = sum(isinstance(o, Discarded) for o in out)
    assert discarded / len(out) < 0.20


def test_identity_scenario_matches_base_case(rts24):
    lab = label(rts24, identity(rts24))
    base = branch_loadings(rts24, solve_ac(rts24).voltage)
    np.testing.assert_allclose(lab.true_loadings, base, rtol=1e-12)
    assert lab.branch_ids == rts24.branch_ids


def test_zero_load_lossless_zero_flow():
    case = two_bus(p=0.5, r=0.0)
    lab = label(case, Scenario(0, 0, (), (0.0, 0.0), (0.0,)))
    np.testing.assert_allclose(lab.true_loadings, 0.0, atol=1e-12)


def test_heavy_n2_fixture_overloads(rts24):
    # outage pair found by scanning every connected N-2 set at base load with the AC solver
    s = replace(identity(rts24), k=2, outages=(21, 22))
    lab = label(rts24, s)
    assert isinstance(lab, LabeledScenario)
    assert lab.true_loadings.max() > 1.0
    assert 21 not in lab.branch_ids and len(lab.branch_ids) == len(rts24.branches) - 2


def test_divergence_is_a_value():
    case = two_bus(p=0.5, x=0.5)
    out = label(case, Scenario(3, 0, (), (20.0, 20.0), (1.0,)))
    assert isinstance(out, Discarded)
    assert "diverged" in out.reason


def test_scenario_json_round_trip():
    s = Scenario(7, 2, (3, 9), (0.9, 1.1), (1.05,), seed=4)
    assert Scenario.from_json(s.to_json(split="cal")) == s


# ----------------------------------------------------------- embedding

@pytest.fixture(scope="module")
def cal_scenarios(rts24):
    return generate_scenarios(rts24, ScenarioSpec({1: 100, 2: 100}, seed=3))


def test_identical_inputs_identical_embeddings(rts24, cal_scenarios):
    stats = fit_embedding_stats(rts24, cal_scenarios)
    s = cal_scenarios[0]
    twin = replace(s, id=999)
    assert np.array_equal(embed(rts24, s, stats), embed(rts24, twin, stats))


def test_extra_outage_changes_only_indicators(rts24, cal_scenarios):
    s = cal_scenarios[0]
    extra = next(b for b in rts24.branch_ids if b not in s.outages)
    more = replace(s, k=s.k + 1, outages=tuple(sorted(s.outages + (extra,))))
    diff = np.flatnonzero(raw_features(rts24, [s])[0] != raw_features(rts24, [more])[0])
    n_inj = 2 * len(rts24.buses) + len(rts24.generators)
    assert diff.tolist() == [n_inj + rts24.branch_index[extra]]


def test_calibration_moments(rts24, cal_scenarios):
    stats = fit_embedding_stats(rts24, cal_scenarios)
    z = embed_many(rts24, cal_scenarios, stats)
    assert np.max(np.abs(z.mean(axis=0))) <= 1e-9
    np.testing.assert_allclose(z.var(axis=0), 1.0, atol=1e-6)
    # buses without load and never-outaged indicators carry no variance and are dropped
    assert stats.keep.size < stats.n_raw


def test_embedding_case_mismatch(rts24, three_bus, cal_scenarios):
    stats = fit_embedding_stats(rts24, cal_scenarios)
    with pytest.raises(DimensionMismatch):
        embed(three_bus, identity(three_bus), stats)


def test_embedder_estimator_api(rts24, cal_scenarios):
    est = ScenarioEmbedder(case=rts24)
    assert est.get_params() == {"case": rts24}
    with pytest.raises(NotFittedError):
        est.transform(cal_scenarios)
    z = est.fit_transform(cal_scenarios)
    assert z.shape == (len(cal_scenarios), est.n_features_out_)
    fresh = clone(est)
    assert not hasattr(fresh, "stats_")
    np.testing.assert_array_equal(fresh.fit(cal_scenarios).transform(cal_scenarios[:3]), z[:3])
