"""AC power flow by Newton-Raphson (polar form) and the classical DC power flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, SingularSystem
from .grid_model import Branch, GridCase, admittance_matrix, is_connected

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITER = 30


@dataclass(frozen=True)
class ACOptions:
    tolerance: float = DEFAULT_TOLERANCE
    max_iter: int = DEFAULT_MAX_ITER
    flat_start: bool = True
    enforce_q_limits: bool = True
    # reactive-limit checks start once the mismatch falls below this (p.u.)
    q_check_threshold: float = 1e-3


@dataclass(frozen=True)
class ACSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    # PV buses switched to PQ, mapped to the reactive generation they were pinned at
    q_limited: dict = field(default_factory=dict)
    mismatch_history: tuple = ()

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass(frozen=True)
class DCSolution:
    theta: np.ndarray
    flows: np.ndarray
    slack_injection: float = 0.0


def net_injection(case: GridCase) -> np.ndarray:
    """Scheduled complex injection per bus: generation minus load (gen Q taken as 0)."""
    a = case.arrays
    p_gen = np.bincount(a.gen_bus, weights=a.p_gen, minlength=a.n_bus)
    return p_gen - a.p_load - 1j * a.q_load


def _jacobian(y, v):
    """Dense dS/dVa and dS/dVm."""
    i_bus = y @ v
    vnorm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(y * vnorm[None, :])
    ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(i_bus) * vnorm
    ds_dva = -1j * v[:, None] * np.conj(y * v[None, :])
    ds_dva[np.diag_indices_from(ds_dva)] += 1j * v * np.conj(i_bus)
    return ds_dva, ds_dvm


def solve_ac(case: GridCase, options: ACOptions | None = None, **kwargs) -> ACSolution:
    """Newton-Raphson AC power flow.

    Keyword overrides (``tolerance``, ``max_iter``, ``flat_start``,
    ``enforce_q_limits``) are merged into ``options``. PV buses whose
    reactive output leaves [q_min, q_max] become PQ at the violated limit;
    the check runs once per iteration and a switched bus never reverts.

    Raises :class:`Diverged` if ``max_iter`` is exhausted.
    """
    opts = options or ACOptions()
    if kwargs:
        opts = ACOptions(**{**opts.__dict__, **kwargs})
    a = case.arrays
    nb = a.n_bus
    y = admittance_matrix(case).toarray()
    s_sched = net_injection(case)
    kind = a.kind.copy()

    vm = np.where(kind == 2, 1.0, a.v_set)
    if opts.flat_start:
        va = np.zeros(nb)
    else:
        va = solve_dc(case).theta.copy()
    v = vm * np.exp(1j * va)

    q_max_bus = np.bincount(a.gen_bus, weights=a.q_max, minlength=nb)
    q_min_bus = np.bincount(a.gen_bus, weights=a.q_min, minlength=nb)
    q_limited: dict[int, float] = {}

    def index_sets():
        pv = np.flatnonzero(kind == 1)
        pq = np.flatnonzero(kind == 2)
        return pv, pq, np.concatenate([pv, pq])

    pv, pq, pvpq = index_sets()

    def mismatch(v):
        ds = v * np.conj(y @ v) - s_sched
        return np.concatenate([ds[pvpq].real, ds[pq].imag])

    history = []
    iterations = 0
    while True:
        f = mismatch(v)
        near = f.size == 0 or np.max(np.abs(f)) < opts.q_check_threshold
        if opts.enforce_q_limits and pv.size and near:
            s_calc = v * np.conj(y @ v)
            q_gen = s_calc.imag + a.q_load
            over = pv[q_gen[pv] > q_max_bus[pv]]
            under = pv[q_gen[pv] < q_min_bus[pv]]
            if over.size or under.size:
                for bus_pos, lim in [(i, q_max_bus[i]) for i in over] + [(i, q_min_bus[i]) for i in under]:
                    kind[bus_pos] = 2
                    s_sched[bus_pos] = s_sched[bus_pos].real + 1j * (lim - a.q_load[bus_pos])
                    q_limited[int(a.bus_ids[bus_pos])] = float(lim)
                pv, pq, pvpq = index_sets()
                f = mismatch(v)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(norm)
        if not np.isfinite(norm):
            raise Diverged(iterations, norm)
        if norm <= opts.tolerance:
            break
        if iterations >= opts.max_iter:
            raise Diverged(iterations, norm)
        ds_dva, ds_dvm = _jacobian(y, v)
        jac = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise Diverged(iterations, norm) from None
        npvpq = pvpq.size
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        if np.any(vm <= 0):
            raise Diverged(iterations + 1, np.inf)
        v = vm * np.exp(1j * va)
        iterations += 1

    return ACSolution(
        v_mag=np.abs(v), v_ang=np.angle(v), converged=True, iterations=iterations,
        max_mismatch=history[-1], q_limited=q_limited, mismatch_history=tuple(history),
    )


def solve_dc(case: GridCase) -> DCSolution:
    """DC power flow: B' theta = P with the slack angle grounded at zero.

    Branch flows are (theta_from - theta_to) / x; taps, resistance, shunts and
    reactive power are ignored.
    """
    a = case.arrays
    nb = a.n_bus
    if not is_connected(nb, list(zip(a.f.tolist(), a.t.tolist()))):
        raise SingularSystem("reduced susceptance matrix is singular: network is islanded")
    bser = 1.0 / a.x
    bmat = np.zeros((nb, nb))
    np.add.at(bmat, (a.f, a.f), bser)
    np.add.at(bmat, (a.t, a.t), bser)
    np.add.at(bmat, (a.f, a.t), -bser)
    np.add.at(bmat, (a.t, a.f), -bser)
    p = net_injection(case).real
    slack = a.slack
    keep = np.flatnonzero(np.arange(nb) != slack)
    theta = np.zeros(nb)
    if keep.size:
        try:
            theta[keep] = np.linalg.solve(bmat[np.ix_(keep, keep)], p[keep])
        except np.linalg.LinAlgError:
            raise SingularSystem("reduced susceptance matrix is singular") from None
    flows = (theta[a.f] - theta[a.t]) * bser
    slack_inj = float(bmat[slack] @ theta)
    return DCSolution(theta=theta, flows=flows, slack_injection=slack_inj)


def dc_loading(case: GridCase, dc: DCSolution, branch: Branch | int) -> float:
    """|flow| / rating for one branch (by object or id)."""
    pos = case.branch_index[branch.id if isinstance(branch, Branch) else branch]
    return float(abs(dc.flows[pos]) / case.arrays.rating[pos])


def dc_loadings(case: GridCase, dc: DCSolution) -> np.ndarray:
    return np.abs(dc.flows) / case.arrays.rating
