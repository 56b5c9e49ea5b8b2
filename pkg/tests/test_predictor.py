from dataclasses import replace

import numpy as np
import pytest

from gridcp.errors import IndexMismatch, MissingBias
from gridcp.grid_model import GridCase
from gridcp.predictor import (NoiseSpec, PredictedLoadings, ResidualTable, compute_residuals, load_level,
                              predict_dcpf, predict_noisy_oracle)
from gridcp.scenario import LabeledScenario, Scenario, ScenarioSpec, generate_scenarios, label

from conftest import two_bus


def fake_labels(case, scenarios, value=0.5):
    return [LabeledScenario(s, case.branch_ids, np.full(len(case.branches), value)) for s in scenarios]


@pytest.fixture(scope="module")
def many(rts24):
    return generate_scenarios(rts24, ScenarioSpec({1: 5000}, seed=8))


def test_degenerate_noise_is_identity(rts24, many):
    lab = fake_labels(rts24, many[:5])
    noise = NoiseSpec({1: 0.0}, sigma_base=0.0)
    for lb in lab:
        np.testing.assert_array_equal(predict_noisy_oracle(rts24, lb, noise).l_hat, lb.true_loadings)


def test_pure_shift():
    case = two_bus()
    lab = LabeledScenario(Scenario(1, 2, (), (1.0, 1.0), (1.0,)), (1,), np.array([0.7]))
    pred = predict_noisy_oracle(case, lab, NoiseSpec({2: 0.05}, sigma_base=0.0))
    res = compute_residuals([lab], [pred])
    assert res.residual[0] == pytest.approx(0.05, abs=1e-15)


def test_missing_bias(rts24, many):
    with pytest.raises(MissingBias):
        predict_noisy_oracle(rts24, fake_labels(rts24, many[:1])[0], NoiseSpec({2: 0.0}))


def test_reproducible_per_scenario(rts24, many):
    lab = fake_labels(rts24, many[:20])
    noise = NoiseSpec({1: 0.01}, seed=4)
    a = [predict_noisy_oracle(rts24, lb, noise).l_hat for lb in lab]
    b = [predict_noisy_oracle(rts24, lb, noise).l_hat for lb in reversed(lab)][::-1]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    c = predict_noisy_oracle(rts24, lab[0], replace(noise, seed=5)).l_hat
    assert not np.array_equal(a[0], c)


def test_load_level_roughly_uniform(rts24, many):
    g = np.array([load_level(rts24, s) for s in many])
    assert g.min() >= 0 and g.max() <= 1
    hist, _ = np.histogram(g, bins=10, range=(0, 1))
    assert hist.min() > 0.6 * len(g) / 10


def test_heteroscedastic_spread(rts24, many):
    lab = fake_labels(rts24, many)
    noise = NoiseSpec({1: 0.0}, sigma_base=0.02, hetero_gain=2.0, seed=1)
    res = compute_residuals(lab, [predict_noisy_oracle(rts24, lb, noise) for lb in lab])
    g = np.array([load_level(rts24, s) for s in many])
    lo, hi = np.quantile(g, [0.1, 0.9])
    per_scen = res.residual.reshape(len(many), -1)
    assert per_scen[g >= hi].std() >= 2 * per_scen[g <= lo].std()


def test_mean_residual_matches_bias(rts24, many):
    lab = fake_labels(rts24, many)
    noise = NoiseSpec({1: 0.03}, seed=2)
    res = compute_residuals(lab, [predict_noisy_oracle(rts24, lb, noise) for lb in lab])
    one_line = res.group(rts24.branch_ids[0], 1)
    assert one_line.size == 5000
    se = one_line.std(ddof=1) / np.sqrt(one_line.size)
    assert abs(one_line.mean() - 0.03) <= 3 * se


def test_residual_arithmetic_and_antisymmetry():
    s = Scenario(1, 1, (), (1.0,), ())
    lab = LabeledScenario(s, (1, 2), np.array([1.0, 0.5]))
    pred = PredictedLoadings(1, (1, 2), np.array([0.9, 0.6]), "test")
    res = compute_residuals([lab], [pred])
    np.testing.assert_allclose(res.residual, [0.1, -0.1], atol=1e-15)
    swapped = compute_residuals([LabeledScenario(s, (1, 2), pred.l_hat)],
                                [PredictedLoadings(1, (1, 2), lab.true_loadings, "test")])
    np.testing.assert_array_equal(swapped.residual, -res.residual)
    assert [r.branch_id for r in res] == [1, 2]
    assert ResidualTable.from_records(list(res)).residual.tolist() == res.residual.tolist()


def test_residual_index_mismatch():
    s = Scenario(4, 1, (), (1.0,), ())
    lab = LabeledScenario(s, (1, 2), np.array([1.0, 0.5]))
    with pytest.raises(IndexMismatch, match="scenario 4"):
        compute_residuals([lab], [])
    with pytest.raises(IndexMismatch, match="scenario 4"):
        compute_residuals([lab], [PredictedLoadings(4, (2, 1), np.zeros(2), "x")])


# -------------------------------------------------------------------- DCPF

def test_dcpf_zero_load():
    case = two_bus()
    pred = predict_dcpf(case, Scenario(0, 0, (), (0.0, 0.0), (0.0,)))
    np.testing.assert_array_equal(pred.l_hat, [0.0])


def test_dcpf_close_to_ac_on_lossless_two_bus():
    case = two_bus(p=0.3, q=0.0, r=0.0)
    s = Scenario(0, 0, (), (1.0, 1.0), (1.0,))
    ac = label(case, s).true_loadings[0]
    dc = predict_dcpf(case, s).l_hat[0]
    assert abs(dc - ac) <= 0.05 * ac


def test_dcpf_ignores_reactive_and_voltage_data(rts24):
    s = generate_scenarios(rts24, ScenarioSpec({2: 1}, seed=0))[0]
    altered = GridCase(
        tuple(replace(b, q_load=b.q_load * 3 + 0.1,
                      voltage_setpoint=None if b.voltage_setpoint is None else 0.95) for b in rts24.buses),
        rts24.branches, rts24.generators, rts24.base_mva)
    np.testing.assert_array_equal(predict_dcpf(rts24, s).l_hat, predict_dcpf(altered, s).l_hat)
