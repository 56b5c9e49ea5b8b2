"""Study configuration, pipeline stages and the on-disk study directory.

A study directory holds every artifact of one run plus ``manifest.json``,
which records the resolved configuration, the case fingerprint, the derived
seeds, record counts and the sha256 of every file each stage read and wrote.
Later stages refuse to run when a recorded hash no longer matches.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .conformal import (CalibrationTable, KernelConformal, StratifiedConformal, build_table,
                        scp_quantile, table_from_json, table_to_json)
from .errors import ConfigError, EmptyStratum, FingerprintMismatch, IndexMismatch
from .grid_model import GridCase, load_case
from .powerflow import ACOptions
from .predictor import (NoiseSpec, PredictedLoadings, compute_residuals, predict_dcpf,
                        predict_noisy_oracle)
from .scenario import (Discarded, EmbeddingStats, LabeledScenario, Scenario, ScenarioSpec,
                       embed_many, fit_embedding_stats, generate_scenarios, label)
from .screening import (BOUND, ScreeningData, Threshold, alpha_sweep, coverage_by_stratum,
                        coverage_csv, evaluate, flag_lines, format_table, report_csv,
                        stratum_coverage_csv, sweep_csv, threshold_sweep)

BUILTIN_PREFIX = "builtin:"
SPLITS = ("cal", "test")
PREDICTORS = ("noisy_oracle", "dcpf")
METHODS = ("Point", "+SCP", "+KCP", "DCPF")


# ------------------------------------------------------------------ config

def _levels(value, name) -> dict[int, int]:
    if not isinstance(value, Mapping) or not value:
        raise ConfigError(name, "expected a non-empty mapping of k to scenario count")
    out = {}
    for k, n in value.items():
        try:
            kk, nn = int(k), int(n)
        except (TypeError, ValueError):
            raise ConfigError(name, f"entry {k!r}: {n!r} is not an integer count") from None
        if kk < 1 or nn < 1:
            raise ConfigError(name, f"k and counts must be positive, got {k!r}: {n!r}")
        out[kk] = nn
    return dict(sorted(out.items()))


def _float(d, key, name, default):
    v = d.get(key, default)
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a number, got {v!r}") from None


def _check_keys(d, allowed, where):
    if not isinstance(d, Mapping):
        raise ConfigError(where or "config", "expected a mapping")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}" if where else str(key), "unknown field")


@dataclass(frozen=True)
class StudyConfig:
    case_path: str
    n_cal: dict
    n_test: dict
    n_train_ignored: int = 0
    seed: int = 0
    load_range: tuple = (0.8, 1.2)
    gen_jitter: float = 0.02
    predictor: str = "noisy_oracle"
    bias_by_k: dict = field(default_factory=dict)
    sigma_base: float = 0.02
    hetero_gain: float = 2.0
    alpha: float = 0.1
    k_nn: int = 20
    n_eff_min: float = 5.0
    bandwidth_floor: float = 1e-12
    test_atom: bool = True
    alpha_grid: tuple = (0.05, 0.1, 0.2)
    tau_grid: tuple = tuple(round(1.5 - 0.05 * i, 10) for i in range(21))
    ac_tolerance: float = 1e-8
    ac_max_iter: int = 30
    workers: int = 1
    output_dir: str = "study"
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_mapping(cls, d: Mapping, base_dir: str | os.PathLike = ".") -> "StudyConfig":
        _check_keys(d, {"case", "seed", "output_dir", "workers", "splits", "scenario", "predictor",
                        "conformal", "screening", "powerflow"}, "")
        if "case" not in d:
            raise ConfigError("case", "required")
        splits = d.get("splits") or {}
        _check_keys(splits, {"n_train_ignored", "n_cal", "n_test"}, "splits")
        sc = d.get("scenario") or {}
        _check_keys(sc, {"load_range", "gen_jitter"}, "scenario")
        pr = d.get("predictor") or {}
        _check_keys(pr, {"kind", "bias_by_k", "sigma_base", "hetero_gain"}, "predictor")
        cp = d.get("conformal") or {}
        _check_keys(cp, {"alpha", "k_nn", "n_eff_min", "bandwidth_floor", "test_atom"}, "conformal")
        scr = d.get("screening") or {}
        _check_keys(scr, {"alpha_grid", "tau_grid"}, "screening")
        pf = d.get("powerflow") or {}
        _check_keys(pf, {"tolerance", "max_iter"}, "powerflow")

        n_cal = _levels(splits.get("n_cal"), "splits.n_cal")
        n_test = _levels(splits.get("n_test"), "splits.n_test")
        lr = sc.get("load_range", (0.8, 1.2))
        if not isinstance(lr, (list, tuple)) or len(lr) != 2:
            raise ConfigError("scenario.load_range", "expected [lo, hi]")
        bias = pr.get("bias_by_k")
        levels = sorted(set(n_cal) | set(n_test))
        bias = {k: 0.0 for k in levels} if bias is None else {int(k): float(v) for k, v in bias.items()}
        defaults = cls.__dataclass_fields__
        try:
            cfg = cls(
                case_path=str(d["case"]),
                n_cal=n_cal,
                n_test=n_test,
                n_train_ignored=int(splits.get("n_train_ignored", 0)),
                seed=int(d.get("seed", 0)),
                load_range=(float(lr[0]), float(lr[1])),
                gen_jitter=_float(sc, "gen_jitter", "scenario.gen_jitter", 0.02),
                predictor=str(pr.get("kind", "noisy_oracle")),
                bias_by_k=dict(sorted(bias.items())),
                sigma_base=_float(pr, "sigma_base", "predictor.sigma_base", 0.02),
                hetero_gain=_float(pr, "hetero_gain", "predictor.hetero_gain", 2.0),
                alpha=_float(cp, "alpha", "conformal.alpha", 0.1),
                k_nn=int(cp.get("k_nn", 20)),
                n_eff_min=_float(cp, "n_eff_min", "conformal.n_eff_min", 5.0),
                bandwidth_floor=_float(cp, "bandwidth_floor", "conformal.bandwidth_floor", 1e-12),
                test_atom=bool(cp.get("test_atom", True)),
                alpha_grid=tuple(float(a) for a in scr.get("alpha_grid", defaults["alpha_grid"].default)),
                tau_grid=tuple(float(t) for t in scr.get("tau_grid", defaults["tau_grid"].default)),
                ac_tolerance=_float(pf, "tolerance", "powerflow.tolerance", 1e-8),
                ac_max_iter=int(pf.get("max_iter", 30)),
                workers=int(d.get("workers", 1)),
                output_dir=str(d.get("output_dir", "study")),
                base_dir=str(base_dir),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StudyConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"not valid YAML/JSON: {exc}") from None
        return cls.from_mapping(doc or {}, base_dir=path.parent)

    def validate(self):
        lo, hi = self.load_range
        if not 0 < lo <= hi:
            raise ConfigError("scenario.load_range", "must satisfy 0 < lo <= hi")
        if self.gen_jitter < 0:
            raise ConfigError("scenario.gen_jitter", "must be >= 0")
        if self.predictor not in PREDICTORS:
            raise ConfigError("predictor.kind", f"must be one of {', '.join(PREDICTORS)}")
        if self.predictor == "noisy_oracle":
            missing = sorted((set(self.n_cal) | set(self.n_test)) - set(self.bias_by_k))
            if missing:
                raise ConfigError("predictor.bias_by_k", f"no bias for k={missing}")
            if self.sigma_base < 0:
                raise ConfigError("predictor.sigma_base", "must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("conformal.alpha", "must lie in (0, 1)")
        if self.k_nn < 1:
            raise ConfigError("conformal.k_nn", "must be >= 1")
        if self.n_eff_min < 1:
            raise ConfigError("conformal.n_eff_min", "must be >= 1")
        if not self.bandwidth_floor > 0:
            raise ConfigError("conformal.bandwidth_floor", "must be > 0")
        if not self.alpha_grid or any(not 0 < a < 1 for a in self.alpha_grid) \
                or list(self.alpha_grid) != sorted(self.alpha_grid):
            raise ConfigError("screening.alpha_grid", "must be ascending values in (0, 1)")
        if not self.tau_grid or list(self.tau_grid) != sorted(self.tau_grid, reverse=True):
            raise ConfigError("screening.tau_grid", "must be sorted in descending order")
        if self.ac_tolerance <= 0 or self.ac_max_iter < 1:
            raise ConfigError("powerflow", "tolerance must be > 0 and max_iter >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.n_train_ignored < 0:
            raise ConfigError("splits.n_train_ignored", "must be >= 0")

    def with_overrides(self, *, seed=None, alpha=None, output_dir=None) -> "StudyConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if alpha is not None:
            cfg = replace(cfg, alpha=float(alpha))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        """Canonical nested form; the output directory is left out so it never affects artifacts."""
        return {
            "case": self.case_path,
            "seed": self.seed,
            "splits": {"n_train_ignored": self.n_train_ignored,
                       "n_cal": {str(k): v for k, v in self.n_cal.items()},
                       "n_test": {str(k): v for k, v in self.n_test.items()}},
            "scenario": {"load_range": list(self.load_range), "gen_jitter": self.gen_jitter},
            "predictor": {"kind": self.predictor, "bias_by_k": {str(k): v for k, v in self.bias_by_k.items()},
                          "sigma_base": self.sigma_base, "hetero_gain": self.hetero_gain},
            "conformal": {"alpha": self.alpha, "k_nn": self.k_nn, "n_eff_min": self.n_eff_min,
                          "bandwidth_floor": self.bandwidth_floor, "test_atom": self.test_atom},
            "screening": {"alpha_grid": list(self.alpha_grid), "tau_grid": list(self.tau_grid)},
            "powerflow": {"tolerance": self.ac_tolerance, "max_iter": self.ac_max_iter},
        }

    @property
    def ac_options(self) -> ACOptions:
        return ACOptions(tolerance=self.ac_tolerance, max_iter=self.ac_max_iter)

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.bias_by_k, self.sigma_base, self.hetero_gain, self.seeds["noise"], self.load_range)

    @property
    def seeds(self) -> dict:
        """Independent seed streams per split, spawned from the study seed."""
        names = ("train", "cal", "test", "noise")
        children = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}

    def scenario_spec(self, split: str) -> ScenarioSpec:
        counts = self.n_cal if split == "cal" else self.n_test
        return ScenarioSpec(counts, self.load_range, self.gen_jitter, self.seeds[split])

    def id_offset(self, split: str) -> int:
        # ids are unique across splits: test ids start after every calibration id
        return 0 if split == "cal" else sum(self.n_cal.values())

    def resolve_case(self) -> str:
        if self.case_path.startswith(BUILTIN_PREFIX):
            return self.case_path
        p = Path(self.case_path)
        return str(p if p.is_absolute() else Path(self.base_dir) / p)

    def load_case(self) -> GridCase:
        src = self.resolve_case()
        if src.startswith(BUILTIN_PREFIX):
            return builtin_case(src[len(BUILTIN_PREFIX):])
        if not Path(src).is_file():
            raise ConfigError("case", f"case file not found: {src}")
        return load_case(src)


def builtin_case(name: str) -> GridCase:
    """Bundled MATPOWER cases: ``case24_ieee_rts`` and ``case118``."""
    ref = resources.files("gridcp") / "data" / f"{name}.m"
    if not ref.is_file():
        raise ConfigError("case", f"no bundled case named {name!r}")
    with resources.as_file(ref) as path:
        case = load_case(path)
    return case


# ------------------------------------------------------------------ stages

@dataclass(frozen=True)
class SplitData:
    labeled: list
    discarded: list


def label_all(case: GridCase, scenarios: Sequence[Scenario], options: ACOptions | None = None,
              workers: int = 1) -> list:
    """Label scenarios in order; results do not depend on ``workers``."""
    fn = functools.partial(label, case, options=options)
    if workers <= 1 or len(scenarios) < 2:
        return [fn(s) for s in scenarios]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, scenarios, chunksize=max(1, len(scenarios) // (8 * workers))))


def generate_split(case: GridCase, cfg: StudyConfig, split: str) -> SplitData:
    scenarios = generate_scenarios(case, cfg.scenario_spec(split), id_offset=cfg.id_offset(split))
    out = label_all(case, scenarios, cfg.ac_options, cfg.workers)
    return SplitData([o for o in out if isinstance(o, LabeledScenario)],
                     [o for o in out if isinstance(o, Discarded)])


def predict(case: GridCase, cfg: StudyConfig, labeled: Sequence[LabeledScenario]) -> list[PredictedLoadings]:
    """Point predictions of the configured predictor."""
    if cfg.predictor == "dcpf":
        return [predict_dcpf(case, lab.scenario) for lab in labeled]
    noise = cfg.noise
    return [predict_noisy_oracle(case, lab, noise) for lab in labeled]


def dcpf_baseline(case: GridCase, labeled: Sequence[LabeledScenario]) -> list[PredictedLoadings]:
    return [predict_dcpf(case, lab.scenario) for lab in labeled]


def calibrate(case: GridCase, cfg: StudyConfig, labeled: Sequence[LabeledScenario],
              predictions: Sequence[PredictedLoadings], alpha: float | None = None,
              meta: dict | None = None) -> CalibrationTable:
    """Residual table plus standardized calibration embeddings."""
    if not labeled:
        raise EmptyStratum("calibration set is empty")
    residuals = compute_residuals(labeled, predictions)
    scenarios = [lab.scenario for lab in labeled]
    stats = fit_embedding_stats(case, scenarios)
    z = embed_many(case, scenarios, stats)
    emb = {s.id: row for s, row in zip(scenarios, z)}
    info = {"case_fingerprint": case.fingerprint(), "embedding": stats.to_dict(),
            "predictor": cfg.predictor, "config": cfg.to_dict(), **(meta or {})}
    return build_table(residuals, emb, alpha=cfg.alpha if alpha is None else alpha,
                       branch_ids=case.branch_ids, levels=sorted(cfg.n_cal), meta=info)


def _flatten(labeled, predictions):
    by_id = {p.scenario_id: p for p in predictions}
    sid, ks, bid, truth, lhat = [], [], [], [], []
    for lab in labeled:
        p = by_id.get(lab.scenario.id)
        if p is None or tuple(p.branch_ids) != tuple(lab.branch_ids):
            raise IndexMismatch(f"scenario {lab.scenario.id}: prediction missing or misaligned")
        n = len(lab.branch_ids)
        sid.append(np.full(n, lab.scenario.id, dtype=np.int64))
        ks.append(np.full(n, lab.scenario.k, dtype=np.int64))
        bid.append(np.asarray(lab.branch_ids, dtype=np.int64))
        truth.append(np.asarray(lab.true_loadings, dtype=float))
        lhat.append(np.asarray(p.l_hat, dtype=float))
    cat = (lambda parts, dt: np.concatenate(parts) if parts else np.array([], dtype=dt))
    return (cat(sid, np.int64), cat(ks, np.int64), cat(bid, np.int64), cat(truth, float), cat(lhat, float))


def screening_data(case: GridCase, table: CalibrationTable, labeled: Sequence[LabeledScenario],
                   predictions: Sequence[PredictedLoadings],
                   dc: Sequence[PredictedLoadings] | None = None) -> ScreeningData:
    """Test records aligned with their embeddings under the table's standardization."""
    fp = table.meta.get("case_fingerprint")
    if fp != case.fingerprint():
        raise FingerprintMismatch("calibration table was built on a different case than the test data")
    sid, ks, bid, truth, lhat = _flatten(labeled, predictions)
    dc_vals = None
    if dc is not None:
        dc_vals = _flatten(labeled, dc)[4]
    stats = EmbeddingStats.from_dict(table.meta["embedding"])
    scenarios = [lab.scenario for lab in labeled]
    z = embed_many(case, scenarios, stats) if scenarios else np.empty((0, stats.keep.size))
    return ScreeningData(sid, ks, bid, truth, lhat, dc_vals, {s.id: row for s, row in zip(scenarios, z)})


@dataclass(frozen=True)
class ScreenResult:
    reports: dict
    coverage: dict
    alpha_points: list
    threshold_points: list
    summary: dict


def _mean_finite(q):
    q = np.asarray(q, dtype=float)
    fin = np.isfinite(q)
    return float(q[fin].mean()) if fin.any() else None


def estimators(cfg: StudyConfig, table: CalibrationTable, alpha: float | None = None):
    a = cfg.alpha if alpha is None else alpha
    scp = StratifiedConformal.from_table(table, alpha=a)
    kcp = KernelConformal.from_table(table, alpha=a, k_nn=cfg.k_nn, n_eff_min=cfg.n_eff_min,
                                     bandwidth_floor=cfg.bandwidth_floor, test_atom=cfg.test_atom)
    return scp, kcp


def sweeps(cfg: StudyConfig, table: CalibrationTable, data: ScreeningData):
    scp, kcp = estimators(cfg, table)
    alpha_points = alpha_sweep(data, scp, kcp, cfg.alpha_grid)
    thr = threshold_sweep(data.l_hat, data.truth, cfg.tau_grid, method="Point")
    if data.dc is not None:
        thr += threshold_sweep(data.dc, data.truth, cfg.tau_grid, method="DCPF")
    return alpha_points, thr


def screen(cfg: StudyConfig, table: CalibrationTable, data: ScreeningData,
           alpha: float | None = None) -> ScreenResult:
    """Table I style report, coverage tables and both sweeps at one alpha."""
    alpha = cfg.alpha if alpha is None else alpha
    scp, kcp = estimators(cfg, table, alpha)
    q_scp = scp.quantile(data.branch_id, data.k)
    q_kcp, info = kcp.quantile(data.scenario_id, data.k, data.branch_id, data.embeddings)
    ids = dict(scenario_id=data.scenario_id, branch_id=data.branch_id, k=data.k)
    flags = {
        "Point": flag_lines(data.l_hat, data.truth, BOUND, method="Point", **ids),
        "+SCP": flag_lines(data.l_hat + q_scp, data.truth, BOUND, method="+SCP", **ids),
        "+KCP": flag_lines(data.l_hat + q_kcp, data.truth, BOUND, method="+KCP", **ids),
    }
    if data.dc is not None:
        flags["DCPF"] = flag_lines(data.dc, data.truth, Threshold(1.0), method="DCPF", **ids)
    reports = {m: evaluate(f) for m, f in flags.items()}
    coverage = {m: coverage_by_stratum(f) for m, f in flags.items()}
    n_eff = np.array([v[0] for v in info.values()]) if info else np.array([])
    methods = [v[1].value for v in info.values()]
    summary = {
        "alpha": alpha,
        "n_test_records": int(data.truth.size),
        "n_test_scenarios": int(np.unique(data.scenario_id).size),
        "scp": {"mean_finite_q": _mean_finite(q_scp), "n_infinite": int(np.sum(~np.isfinite(q_scp)))},
        "kcp": {"mean_finite_q": _mean_finite(q_kcp), "n_infinite": int(np.sum(~np.isfinite(q_kcp))),
                "median_n_eff": float(np.median(n_eff)) if n_eff.size else None,
                "n_fallback_scenarios": sum(m == "KCP_FALLBACK" for m in methods)},
        "coverage": {m: {"strata_equal_weighted": c.equal_weighted, "strata_sample_weighted": c.sample_weighted}
                     for m, c in coverage.items()},
    }
    alpha_points, thr = sweeps(cfg, table, data)
    return ScreenResult(reports, coverage, alpha_points, thr, summary)


def calibration_summary(table: CalibrationTable, alpha: float | None = None) -> dict:
    """Per-stratum sizes and the mean finite SCP q_hat over non-empty strata."""
    alpha = table.alpha_default if alpha is None else alpha
    sizes = table.n_per_stratum
    qs = [scp_quantile(table, b, k, alpha) for (b, k), n in sizes.items() if n]
    fin = [q for q in qs if np.isfinite(q)]
    nonzero = [n for n in sizes.values() if n]
    return {
        "alpha": alpha,
        "n_strata": len(sizes),
        "empty_strata": table.empty_strata,
        "min_size": min(nonzero) if nonzero else 0,
        "median_size": float(np.median(nonzero)) if nonzero else 0.0,
        "max_size": max(nonzero) if nonzero else 0,
        "n_infinite_q": len(qs) - len(fin),
        "mean_scp_q": float(np.mean(fin)) if fin else None,
    }


# -------------------------------------------------------------- file layer

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: Path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _split_of(scenario_id: int, cfg: StudyConfig) -> str:
    return "cal" if scenario_id < cfg.id_offset("test") else "test"


def scenarios_jsonl(data: Mapping[str, SplitData]) -> str:
    items = []
    for split, d in data.items():
        items += [(o.scenario.id, o.scenario.to_json(split=split)) for o in (*d.labeled, *d.discarded)]
    return "".join(line + "\n" for _, line in sorted(items))


def labels_csv(data: Mapping[str, SplitData]) -> str:
    rows = []
    for split, d in data.items():
        for lab in d.labeled:
            s = lab.scenario
            rows += [(s.id, split, s.k, b, repr(float(v))) for b, v in zip(lab.branch_ids, lab.true_loadings)]
    return _csv(["scenario_id", "split", "k", "branch_id", "true_loading"], rows)


def discards_csv(data: Mapping[str, SplitData]) -> str:
    rows = [(o.scenario.id, split, o.scenario.k, o.reason) for split, d in data.items() for o in d.discarded]
    return _csv(["scenario_id", "split", "k", "reason"], sorted(rows))


def predictions_csv(preds: Sequence[PredictedLoadings]) -> str:
    rows = [(p.scenario_id, b, repr(float(v)), p.source) for p in preds for b, v in zip(p.branch_ids, p.l_hat)]
    return _csv(["scenario_id", "branch_id", "l_hat", "source"], rows)


def read_scenarios(path) -> dict[int, Scenario]:
    with open(path) as fh:
        return {s.id: s for s in (Scenario.from_json(line) for line in fh if line.strip())}


def read_labels(path, scenarios: Mapping[int, Scenario]) -> dict[str, list[LabeledScenario]]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = int(row["scenario_id"])
            g = groups.setdefault(sid, (row["split"], [], []))
            g[1].append(int(row["branch_id"]))
            g[2].append(float(row["true_loading"]))
    out = {s: [] for s in SPLITS}
    for sid in sorted(groups):
        split, bids, vals = groups[sid]
        if sid not in scenarios:
            raise IndexMismatch(f"labels refer to unknown scenario {sid}")
        out[split].append(LabeledScenario(scenarios[sid], tuple(bids), np.array(vals)))
    return out


def read_predictions(path) -> list[PredictedLoadings]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = groups.setdefault(int(row["scenario_id"]), (row["source"], [], []))
            g[1].append(int(row["branch_id"]))
            g[2].append(float(row["l_hat"]))
    return [PredictedLoadings(sid, tuple(b), np.array(v), src) for sid, (src, b, v) in sorted(groups.items())]


class StudyDir:
    """Study directory with a manifest that chains stage inputs to outputs."""

    MANIFEST = "manifest.json"

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def has_manifest(self) -> bool:
        return self.path(self.MANIFEST).is_file()

    def manifest(self) -> dict:
        if not self.has_manifest:
            raise ConfigError("--out", f"{self.root} holds no study manifest; run 'generate' first")
        return json.loads(self.path(self.MANIFEST).read_text())

    def write_manifest(self, doc: dict):
        atomic_write(self.path(self.MANIFEST), json.dumps(doc, sort_keys=True, indent=1) + "\n")

    def write(self, name: str, text: str) -> str:
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write(self.path(name), text)
        return hashlib.sha256(text.encode()).hexdigest()

    def verify(self, manifest: dict, stages: Sequence[str]) -> dict:
        """Check recorded output hashes of ``stages``; return them as name -> sha."""
        hashes = {}
        for stage in stages:
            rec = manifest.get("stages", {}).get(stage)
            if rec is None:
                raise ConfigError("--out", f"stage '{stage}' has not been run in {self.root}")
            for name, digest in rec["outputs"].items():
                p = self.path(name)
                if not p.is_file():
                    raise FingerprintMismatch(f"{name} recorded by '{stage}' is missing")
                if sha256_file(p) != digest:
                    raise FingerprintMismatch(f"{name} does not match the hash recorded by '{stage}'")
                hashes[name] = digest
        return hashes


def _data_section(cfg_dict: dict) -> dict:
    # fields that shape generated data and predictions; alpha and grids may vary per stage
    return {k: cfg_dict[k] for k in ("case", "seed", "splits", "scenario", "powerflow", "predictor")}


def check_config(manifest: dict, cfg: StudyConfig, case: GridCase):
    if manifest.get("case_fingerprint") != case.fingerprint():
        raise FingerprintMismatch("case content differs from the case the study was generated from")
    if _data_section(manifest["config"]) != _data_section(cfg.to_dict()):
        raise FingerprintMismatch("config (data or predictor section, or seed) differs from the study manifest")


def run_generate(cfg: StudyConfig, out: Path) -> dict:
    case = cfg.load_case()  # fails before anything is written
    data = {split: generate_split(case, cfg, split) for split in SPLITS}
    sd = StudyDir(out)
    outputs = {
        "scenarios.jsonl": sd.write("scenarios.jsonl", scenarios_jsonl(data)),
        "labels.csv": sd.write("labels.csv", labels_csv(data)),
        "discards.csv": sd.write("discards.csv", discards_csv(data)),
    }
    counts = {}
    for split, d in data.items():
        req = cfg.n_cal if split == "cal" else cfg.n_test
        counts[split] = {
            str(k): {"requested": n,
                     "labeled": sum(lab.scenario.k == k for lab in d.labeled),
                     "discarded": sum(o.scenario.k == k for o in d.discarded)}
            for k, n in req.items()
        }
    n_scen = sum(len(d.labeled) + len(d.discarded) for d in data.values())
    manifest = {
        "tool": "gridcp", "version": __version__,
        "config": cfg.to_dict(),
        "case_fingerprint": case.fingerprint(),
        "seeds": cfg.seeds,
        "counts": counts,
        "rows": {"scenarios.jsonl": n_scen,
                 "labels.csv": sum(len(lab.branch_ids) for d in data.values() for lab in d.labeled),
                 "discards.csv": sum(len(d.discarded) for d in data.values())},
        "stages": {"generate": {"inputs": {}, "outputs": outputs}},
    }
    sd.write_manifest(manifest)
    return manifest


def _load_study(cfg: StudyConfig, out: Path, stages: Sequence[str]):
    sd = StudyDir(out)
    manifest = sd.manifest()
    case = cfg.load_case()
    check_config(manifest, cfg, case)
    hashes = sd.verify(manifest, stages)
    return sd, manifest, case, hashes


def run_predict(cfg: StudyConfig, out: Path) -> dict:
    sd, manifest, case, hashes = _load_study(cfg, out, ["generate"])
    labeled = read_labels(sd.path("labels.csv"), read_scenarios(sd.path("scenarios.jsonl")))
    preds = predict(case, cfg, labeled["cal"] + labeled["test"])
    dc = dcpf_baseline(case, labeled["test"])
    outputs = {"predictions.csv": sd.write("predictions.csv", predictions_csv(preds)),
               "predictions_dcpf.csv": sd.write("predictions_dcpf.csv", predictions_csv(dc))}
    manifest["stages"]["predict"] = {"inputs": hashes, "outputs": outputs}
    sd.write_manifest(manifest)
    return manifest


def run_calibrate(cfg: StudyConfig, out: Path) -> tuple[dict, CalibrationTable]:
    sd, manifest, case, hashes = _load_study(cfg, out, ["generate", "predict"])
    labeled = read_labels(sd.path("labels.csv"), read_scenarios(sd.path("scenarios.jsonl")))
    preds = read_predictions(sd.path("predictions.csv"))
    cal_ids = {lab.scenario.id for lab in labeled["cal"]}
    table = calibrate(case, cfg, labeled["cal"], [p for p in preds if p.scenario_id in cal_ids],
                      meta={"inputs": {n: hashes[n] for n in ("scenarios.jsonl", "labels.csv", "predictions.csv")}})
    outputs = {"calibration.json": sd.write("calibration.json", table_to_json(table))}
    manifest["stages"]["calibrate"] = {"inputs": hashes, "outputs": outputs}
    # a new calibration invalidates earlier screening outputs
    manifest["stages"].pop("screen", None)
    manifest["stages"].pop("sweep", None)
    sd.write_manifest(manifest)
    return manifest, table


def _load_screening(cfg: StudyConfig, out: Path):
    sd, manifest, case, hashes = _load_study(cfg, out, ["generate", "predict", "calibrate"])
    table = table_from_json(sd.path("calibration.json").read_text())
    for name, digest in table.meta.get("inputs", {}).items():
        if hashes.get(name) != digest:
            raise FingerprintMismatch(f"calibration table was built from a different {name}")
    labeled = read_labels(sd.path("labels.csv"), read_scenarios(sd.path("scenarios.jsonl")))
    test_ids = {lab.scenario.id for lab in labeled["test"]}
    preds = [p for p in read_predictions(sd.path("predictions.csv")) if p.scenario_id in test_ids]
    dc = read_predictions(sd.path("predictions_dcpf.csv"))
    data = screening_data(case, table, labeled["test"], preds, dc)
    return sd, manifest, hashes, table, data


def _sweep_outputs(sd: StudyDir, alpha_points, thr) -> dict:
    return {
        "alpha_sweep.csv": sd.write("alpha_sweep.csv", sweep_csv(alpha_points)),
        "threshold_sweep.csv": sd.write("threshold_sweep.csv", sweep_csv(thr)),
        "pareto.csv": sd.write("pareto.csv", sweep_csv(list(alpha_points) + list(thr))),
    }


def run_screen(cfg: StudyConfig, out: Path) -> tuple[dict, ScreenResult]:
    sd, manifest, hashes, table, data = _load_screening(cfg, out)
    res = screen(cfg, table, data)
    outputs = {
        "report.csv": sd.write("report.csv", report_csv(res.reports)),
        "report.txt": sd.write("report.txt", format_table(res.reports)),
        "coverage.csv": sd.write("coverage.csv", coverage_csv(res.coverage)),
        "coverage_strata.csv": sd.write("coverage_strata.csv", stratum_coverage_csv(res.coverage)),
        "summary.json": sd.write("summary.json", json.dumps(res.summary, sort_keys=True, indent=1) + "\n"),
        **_sweep_outputs(sd, res.alpha_points, res.threshold_points),
    }
    manifest["stages"]["screen"] = {"inputs": hashes, "outputs": outputs,
                                    "params": {"alpha": cfg.alpha}}
    sd.write_manifest(manifest)
    return manifest, res


def run_sweep(cfg: StudyConfig, out: Path) -> dict:
    sd, manifest, hashes, table, data = _load_screening(cfg, out)
    alpha_points, thr = sweeps(cfg, table, data)
    outputs = _sweep_outputs(sd, alpha_points, thr)
    manifest["stages"]["sweep"] = {"inputs": hashes, "outputs": outputs,
                                   "params": {"alpha_grid": list(cfg.alpha_grid), "tau_grid": list(cfg.tau_grid)}}
    # sweep rewrites files screen also produced; drop screen's stale hashes for them
    if "screen" in manifest["stages"]:
        for name in outputs:
            manifest["stages"]["screen"]["outputs"].pop(name, None)
    sd.write_manifest(manifest)
    return manifest
