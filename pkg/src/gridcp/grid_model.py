"""Static grid data model, case-file parsing, admittance matrix and branch loadings.

All quantities inside a :class:`GridCase` are per-unit on ``base_mva``. Unit
conversion happens only in :func:`parse_case`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import CaseSyntaxError, CaseValidationError, UnknownBus

SCHEMA_VERSION = 1


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


class CaseFormat(str, enum.Enum):
    NATIVE_JSON = "NativeJson"
    MATPOWER_SUBSET = "MatpowerSubset"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    voltage_setpoint: float | None = None
    base_kv: float = 1.0
    p_load: float = 0.0
    q_load: float = 0.0
    # fixed shunt admittance at V = 1 p.u. (MATPOWER Gs/Bs)
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    rating: float = 1.0
    outage_eligible: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    q_min: float = -np.inf
    q_max: float = np.inf


@dataclass(frozen=True)
class CaseArrays:
    """Positional numpy view of a case, used by the numerical kernels."""

    bus_ids: np.ndarray
    kind: np.ndarray  # 0 slack, 1 PV, 2 PQ
    v_set: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    y_shunt: np.ndarray
    br_ids: np.ndarray
    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    tap: np.ndarray
    rating: np.ndarray
    gen_bus: np.ndarray
    p_gen: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    @property
    def n_bus(self):
        return self.bus_ids.size

    @property
    def n_branch(self):
        return self.br_ids.size

    @property
    def slack(self):
        return int(np.flatnonzero(self.kind == 0)[0])


_KIND_CODE = {BusKind.SLACK: 0, BusKind.PV: 1, BusKind.PQ: 2}


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        # accept lists from callers but store tuples so the case stays hashable-ish and immutable
        for attr in ("buses", "branches", "generators"):
            value = getattr(self, attr)
            if not isinstance(value, tuple):
                object.__setattr__(self, attr, tuple(value))

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_index(self) -> dict[int, int]:
        return {br.id: i for i, br in enumerate(self.branches)}

    @property
    def branch_ids(self) -> tuple[int, ...]:
        return tuple(br.id for br in self.branches)

    @cached_property
    def arrays(self) -> CaseArrays:
        idx = self.bus_index
        buses, brs, gens = self.buses, self.branches, self.generators
        v_set = np.array([b.voltage_setpoint if b.voltage_setpoint is not None else 1.0 for b in buses])
        return CaseArrays(
            bus_ids=np.array([b.id for b in buses], dtype=np.int64),
            kind=np.array([_KIND_CODE[BusKind(b.kind)] for b in buses], dtype=np.int8),
            v_set=v_set,
            p_load=np.array([b.p_load for b in buses], dtype=float),
            q_load=np.array([b.q_load for b in buses], dtype=float),
            y_shunt=np.array([complex(b.g_shunt, b.b_shunt) for b in buses], dtype=complex),
            br_ids=np.array([br.id for br in brs], dtype=np.int64),
            f=np.array([idx[br.from_bus] for br in brs], dtype=np.int64),
            t=np.array([idx[br.to_bus] for br in brs], dtype=np.int64),
            r=np.array([br.r for br in brs], dtype=float),
            x=np.array([br.x for br in brs], dtype=float),
            b=np.array([br.b_charging for br in brs], dtype=float),
            tap=np.array([br.tap_ratio for br in brs], dtype=float),
            rating=np.array([br.rating for br in brs], dtype=float),
            gen_bus=np.array([idx[g.bus] for g in gens], dtype=np.int64),
            p_gen=np.array([g.p_set for g in gens], dtype=float),
            q_min=np.array([g.q_min for g in gens], dtype=float),
            q_max=np.array([g.q_max for g in gens], dtype=float),
        )

    @cached_property
    def _fingerprint(self) -> str:
        return hashlib.sha256(to_native_json(self).encode()).hexdigest()

    def fingerprint(self) -> str:
        """SHA-256 of the canonical native-JSON encoding."""
        return self._fingerprint


# ---------------------------------------------------------------- validation

def is_connected(n_nodes: int, edges: Sequence[tuple[int, int]]) -> bool:
    if n_nodes == 0:
        return False
    if n_nodes == 1:
        return True
    if len(edges) == 0:
        return False
    e = np.asarray(edges, dtype=np.int64)
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_nodes, n_nodes))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def validate_case(case: GridCase) -> GridCase:
    """Check every GridCase invariant; raise CaseValidationError naming the first violation."""
    if not case.base_mva > 0:
        raise CaseValidationError(f"base_mva must be > 0, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("bus id not unique")
    br_ids = [br.id for br in case.branches]
    if len(set(br_ids)) != len(br_ids):
        raise CaseValidationError("branch id not unique")
    n_slack = sum(BusKind(b.kind) is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise CaseValidationError(f"exactly one Slack bus required, found {n_slack}")
    for b in case.buses:
        if BusKind(b.kind) is not BusKind.PQ:
            if b.voltage_setpoint is None or not b.voltage_setpoint > 0:
                raise CaseValidationError(f"bus {b.id}: voltage_setpoint must be > 0")
    known = set(ids)
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseValidationError(f"branch {br.id}: endpoint bus does not exist")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.id}: from_bus equals to_bus")
        if br.x == 0:
            raise CaseValidationError(f"branch {br.id}: x must be nonzero")
        if not br.rating > 0:
            raise CaseValidationError(f"branch {br.id}: rating must be > 0")
        if not br.tap_ratio > 0:
            raise CaseValidationError(f"branch {br.id}: tap_ratio must be > 0")
    gen_buses = set()
    for g in case.generators:
        if g.bus not in known:
            raise CaseValidationError(f"generator at bus {g.bus}: bus does not exist")
        if g.q_min > g.q_max:
            raise CaseValidationError(f"generator at bus {g.bus}: q_min > q_max")
        gen_buses.add(g.bus)
    for b in case.buses:
        if BusKind(b.kind) is BusKind.PV and b.id not in gen_buses:
            raise CaseValidationError(f"PV bus {b.id} hosts no generator")
    idx = case.bus_index
    edges = [(idx[br.from_bus], idx[br.to_bus]) for br in case.branches]
    if not is_connected(len(case.buses), edges):
        raise CaseValidationError("network is disconnected over in-service branches")
    return case


# ------------------------------------------------------------------- parsing

def parse_case(text: str, format: CaseFormat | str = CaseFormat.NATIVE_JSON, *,
               return_warnings: bool = False):
    """Parse case text into a validated :class:`GridCase`.

    ``format`` is ``"NativeJson"`` or ``"MatpowerSubset"``. Skipped fields in
    MATPOWER input are reported through :mod:`warnings` and, when
    ``return_warnings`` is set, returned as ``(case, warning_list)``.
    """
    fmt = CaseFormat(format)
    if fmt is CaseFormat.NATIVE_JSON:
        case, notes = _parse_native_json(text), []
    else:
        case, notes = _parse_matpower(text)
    validate_case(case)
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return (case, notes) if return_warnings else case


def load_case(path, format: CaseFormat | str | None = None) -> GridCase:
    path = str(path)
    if format is None:
        format = CaseFormat.MATPOWER_SUBSET if path.endswith(".m") else CaseFormat.NATIVE_JSON
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        case = parse_case(text, format)
    name = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    object.__setattr__(case, "name", name)
    return case


def _require(obj, key, where):
    if key not in obj:
        raise CaseValidationError(f"{where}: missing required key '{key}'")
    return obj[key]


def _parse_native_json(text: str) -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise CaseSyntaxError("top-level JSON value must be an object", 1, 1)
    version = _require(doc, "schema_version", "case")
    if version != SCHEMA_VERSION:
        raise CaseValidationError(f"unsupported schema_version {version!r}")
    try:
        buses = [
            Bus(
                id=int(b["id"]), kind=BusKind(b["kind"]),
                voltage_setpoint=None if b.get("voltage_setpoint") is None else float(b["voltage_setpoint"]),
                base_kv=float(b.get("base_kv", 1.0)),
                p_load=float(b.get("p_load", 0.0)), q_load=float(b.get("q_load", 0.0)),
                g_shunt=float(b.get("g_shunt", 0.0)), b_shunt=float(b.get("b_shunt", 0.0)),
            )
            for b in _require(doc, "buses", "case")
        ]
        branches = [
            Branch(
                id=int(br["id"]), from_bus=int(br["from_bus"]), to_bus=int(br["to_bus"]),
                r=float(br["r"]), x=float(br["x"]), b_charging=float(br.get("b_charging", 0.0)),
                tap_ratio=float(br.get("tap_ratio", 1.0)), rating=float(br["rating"]),
                outage_eligible=bool(br.get("outage_eligible", True)),
            )
            for br in _require(doc, "branches", "case")
        ]
        gens = [
            Generator(
                bus=int(g["bus"]), p_set=float(g["p_set"]),
                q_min=float(g.get("q_min", -np.inf)), q_max=float(g.get("q_max", np.inf)),
            )
            for g in _require(doc, "generators", "case")
        ]
    except KeyError as exc:
        raise CaseValidationError(f"missing required field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise CaseValidationError(f"bad field value: {exc}") from None
    return GridCase(buses, branches, gens, float(_require(doc, "base_mva", "case")))


def to_native_json(case: GridCase) -> str:
    """Canonical native-JSON encoding (sorted keys, no whitespace variance)."""

    def num(v):
        v = float(v)
        if np.isinf(v):
            return None
        return v

    doc = {
        "schema_version": SCHEMA_VERSION,
        "base_mva": float(case.base_mva),
        "buses": [
            {"id": b.id, "kind": BusKind(b.kind).value, "voltage_setpoint": b.voltage_setpoint,
             "base_kv": b.base_kv, "p_load": b.p_load, "q_load": b.q_load,
             "g_shunt": b.g_shunt, "b_shunt": b.b_shunt}
            for b in case.buses
        ],
        "branches": [
            {"id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus, "r": br.r, "x": br.x,
             "b_charging": br.b_charging, "tap_ratio": br.tap_ratio, "rating": br.rating,
             "outage_eligible": br.outage_eligible}
            for br in case.branches
        ],
        "generators": [
            {"bus": g.bus, "p_set": g.p_set, "q_min": num(g.q_min), "q_max": num(g.q_max)}
            for g in case.generators
        ],
    }
    # infinite q limits round-trip as absent keys
    for g in doc["generators"]:
        for k in ("q_min", "q_max"):
            if g[k] is None:
                del g[k]
    return json.dumps(doc, sort_keys=True, indent=1)


# MATPOWER column indices (0-based) for the subset we read
_BUS_COLS = dict(BUS_I=0, BUS_TYPE=1, PD=2, QD=3, GS=4, BS=5, VM=7, BASE_KV=9)
_GEN_COLS = dict(GEN_BUS=0, PG=1, QMAX=3, QMIN=4, VG=5, GEN_STATUS=7)
_BRANCH_COLS = dict(F_BUS=0, T_BUS=1, BR_R=2, BR_X=3, BR_B=4, RATE_A=5, TAP=8, SHIFT=9, BR_STATUS=10)
_MIN_COLS = {"bus": 10, "gen": 8, "branch": 11}

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$|^[+-]?(Inf|inf|NaN|nan)$")


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _parse_matpower(text: str):
    lines = text.splitlines()
    notes: list[str] = []
    scalars: dict[str, float] = {}
    matrices: dict[str, list[list[float]]] = {}
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        lineno = i + 1
        i += 1
        if not raw.strip() or raw.lstrip().startswith("function"):
            continue
        m = _ASSIGN.match(raw)
        if m is None:
            raise CaseSyntaxError(f"unexpected statement {raw.strip()!r}", lineno, 1)
        name, rhs = m.group(1), m.group(2).strip()
        col_rhs = raw.index(rhs) + 1 if rhs else len(raw)
        if rhs.startswith("[") or rhs.startswith("{"):
            closer = "]" if rhs[0] == "[" else "}"
            body_parts, body_start = [(rhs[1:], lineno, col_rhs + 1)], lineno
            while closer not in body_parts[-1][0]:
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated matrix mpc.{name}", body_start, col_rhs)
                body_parts.append((_strip_comment(lines[i]), i + 1, 1))
                i += 1
            last, ln, col = body_parts[-1]
            cut = last.index(closer)
            trailing = last[cut + 1:].strip()
            if trailing not in ("", ";"):
                raise CaseSyntaxError(f"unexpected text after mpc.{name}", ln, col + cut + 1)
            body_parts[-1] = (last[:cut], ln, col)
            if name not in ("bus", "gen", "branch"):
                notes.append(f"skipped unknown field mpc.{name}")
                continue
            matrices[name] = _parse_matrix_body(name, body_parts)
        else:
            if name != "baseMVA":
                notes.append(f"skipped unknown field mpc.{name}")
                continue
            value = rhs.rstrip(";").strip()
            if not _NUMBER.match(value):
                raise CaseSyntaxError(f"mpc.baseMVA is not a number: {value!r}", lineno, col_rhs)
            scalars[name] = float(value)
    for key in ("bus", "gen", "branch"):
        if key not in matrices:
            raise CaseValidationError(f"missing required matrix mpc.{key}")
    if "baseMVA" not in scalars:
        raise CaseValidationError("missing required scalar mpc.baseMVA")
    return _matpower_to_case(scalars["baseMVA"], matrices), notes


def _parse_matrix_body(name, parts):
    rows: list[list[float]] = []
    width = None
    for body, lineno, col0 in parts:
        for seg_match in re.finditer(r"[^;]+", body):
            seg = seg_match.group(0)
            tokens = [(t.group(0), t.start()) for t in re.finditer(r"[^\s,]+", seg)]
            if not tokens:
                continue
            row = []
            for tok, off in tokens:
                if not _NUMBER.match(tok):
                    raise CaseSyntaxError(f"mpc.{name}: bad number {tok!r}", lineno,
                                          col0 + seg_match.start() + off)
                row.append(float(tok))
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CaseSyntaxError(f"mpc.{name}: row has {len(row)} columns, expected {width}",
                                      lineno, col0 + seg_match.start() + tokens[0][1])
            if len(row) < _MIN_COLS[name]:
                raise CaseSyntaxError(f"mpc.{name}: row has {len(row)} columns, need at least "
                                      f"{_MIN_COLS[name]}", lineno, col0 + seg_match.start() + tokens[0][1])
            rows.append(row)
    return rows


def _matpower_to_case(base_mva, mats) -> GridCase:
    bc, gc, rc = _BUS_COLS, _GEN_COLS, _BRANCH_COLS
    gens_rows = [g for g in mats["gen"] if g[gc["GEN_STATUS"]] > 0]
    vg_by_bus: dict[int, float] = {}
    for g in gens_rows:
        vg_by_bus.setdefault(int(g[gc["GEN_BUS"]]), g[gc["VG"]])
    kinds = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
    buses = []
    for row in mats["bus"]:
        bus_id = int(row[bc["BUS_I"]])
        code = int(row[bc["BUS_TYPE"]])
        if code == 4:
            raise CaseValidationError(f"bus {bus_id}: isolated buses (type 4) are not supported")
        if code not in kinds:
            raise CaseValidationError(f"bus {bus_id}: unknown bus type {code}")
        kind = kinds[code]
        vset = None
        if kind is not BusKind.PQ:
            vset = vg_by_bus.get(bus_id, row[bc["VM"]])
        buses.append(Bus(
            id=bus_id, kind=kind, voltage_setpoint=vset, base_kv=row[bc["BASE_KV"]],
            p_load=row[bc["PD"]] / base_mva, q_load=row[bc["QD"]] / base_mva,
            g_shunt=row[bc["GS"]] / base_mva, b_shunt=row[bc["BS"]] / base_mva,
        ))
    branches = []
    for n, row in enumerate(mats["branch"], start=1):
        if row[rc["BR_STATUS"]] <= 0:
            continue
        if row[rc["SHIFT"]] != 0:
            raise CaseValidationError(f"branch {n}: phase-shifting transformers are not supported")
        tap = row[rc["TAP"]] or 1.0
        branches.append(Branch(
            id=n, from_bus=int(row[rc["F_BUS"]]), to_bus=int(row[rc["T_BUS"]]),
            r=row[rc["BR_R"]], x=row[rc["BR_X"]], b_charging=row[rc["BR_B"]],
            tap_ratio=tap, rating=row[rc["RATE_A"]] / base_mva,
        ))
    gens = [
        Generator(bus=int(g[gc["GEN_BUS"]]), p_set=g[gc["PG"]] / base_mva,
                  q_min=g[gc["QMIN"]] / base_mva, q_max=g[gc["QMAX"]] / base_mva)
        for g in gens_rows
    ]
    return GridCase(buses, branches, gens, base_mva)


# ------------------------------------------------------- admittance & flows

def branch_admittances(arrays: CaseArrays):
    """Two-port π-model entries (Yff, Yft, Ytf, Ytt), tap on the from side."""
    ys = 1.0 / (arrays.r + 1j * arrays.x)
    half_b = 0.5j * arrays.b
    tap = arrays.tap
    yff = (ys + half_b) / (tap * tap)
    yft = -ys / tap
    ytf = -ys / tap
    ytt = ys + half_b
    return yff, yft, ytf, ytt


def admittance_matrix(case: GridCase) -> sp.csr_matrix:
    """Bus admittance matrix Y (n_bus x n_bus, complex, CSR)."""
    a = case.arrays
    nb = a.n_bus
    yff, yft, ytf, ytt = branch_admittances(a)
    rows = np.concatenate([a.f, a.f, a.t, a.t, np.arange(nb)])
    cols = np.concatenate([a.f, a.t, a.f, a.t, np.arange(nb)])
    vals = np.concatenate([yff, yft, ytf, ytt, a.y_shunt])
    y = sp.coo_matrix((vals, (rows, cols)), shape=(nb, nb)).tocsr()
    y.sum_duplicates()
    return y


def _voltage_array(case: GridCase, voltages) -> np.ndarray:
    if isinstance(voltages, Mapping):
        try:
            return np.array([voltages[b.id] for b in case.buses], dtype=complex)
        except KeyError as exc:
            raise UnknownBus(f"no voltage for bus {exc.args[0]}") from None
    v = np.asarray(voltages, dtype=complex)
    if v.shape != (len(case.buses),):
        raise UnknownBus(f"voltage vector has {v.size} entries for {len(case.buses)} buses")
    return v


def branch_power_flows(case: GridCase, voltages):
    """Complex power injected into every branch at its from and to ends."""
    a = case.arrays
    v = _voltage_array(case, voltages)
    yff, yft, ytf, ytt = branch_admittances(a)
    vf, vt = v[a.f], v[a.t]
    s_from = vf * np.conj(yff * vf + yft * vt)
    s_to = vt * np.conj(ytf * vf + ytt * vt)
    return s_from, s_to


def branch_loadings(case: GridCase, voltages) -> np.ndarray:
    """Loading ratio max(|S_from|, |S_to|) / rating for every branch in case order."""
    s_from, s_to = branch_power_flows(case, voltages)
    return np.maximum(np.abs(s_from), np.abs(s_to)) / case.arrays.rating


def line_loading(case: GridCase, voltages, branch: Branch | int) -> float:
    """Loading ratio of a single branch; >1 means thermal overload.

    ``voltages`` is either a mapping bus id -> complex voltage or a complex
    array in ``case.buses`` order.
    """
    if isinstance(voltages, Mapping):
        br = branch if isinstance(branch, Branch) else case.branches[case.branch_index[branch]]
        for end in (br.from_bus, br.to_bus):
            if end not in voltages:
                raise UnknownBus(f"branch {br.id}: no voltage for bus {end}")
        vf, vt = complex(voltages[br.from_bus]), complex(voltages[br.to_bus])
    else:
        v = np.asarray(voltages, dtype=complex)
        br = branch if isinstance(branch, Branch) else case.branches[case.branch_index[branch]]
        idx = case.bus_index
        if br.from_bus not in idx or br.to_bus not in idx:
            raise UnknownBus(f"branch {br.id}: endpoint not in case")
        i, j = idx[br.from_bus], idx[br.to_bus]
        if max(i, j) >= v.size:
            raise UnknownBus(f"branch {br.id}: voltage vector too short")
        vf, vt = complex(v[i]), complex(v[j])
    ys = 1.0 / complex(br.r, br.x)
    half_b = 0.5j * br.b_charging
    tap = br.tap_ratio
    i_from = (ys + half_b) / (tap * tap) * vf - ys / tap * vt
    i_to = -ys / tap * vf + (ys + half_b) * vt
    s_from = vf * i_from.conjugate()
    s_to = vt * i_to.conjugate()
    return max(abs(s_from), abs(s_to)) / br.rating
