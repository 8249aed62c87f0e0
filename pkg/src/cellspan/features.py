"""Early-cycle features, rank-correlation screening and standardization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .dataset import CellRecord
from .errors import DataError
from .interp import VoltageGrid, fit_rbf, resample

logger = logging.getLogger(__name__)

CANDIDATE_FEATURES = (
    "DeltaQ_logVar",
    "DeltaQ_logMin",
    "DeltaQ_logMean",
    "DeltaQ_logSkew",
    "DeltaQ_logKurt",
    "Slope_capacity_fade_2_100",
    "Slope_capacity_fade_91_100",
    "QD_Max_2",
    "QD_2",
    "Intercept_capacity_fade_2_100",
    "Intercept_capacity_fade_91_100",
    "Min_IR",
    "IR_100_2",
)
N_SELECTED = 5


@dataclass(frozen=True)
class FeatureVector:
    cell_id: str
    split: str
    values: Mapping[str, float]

    def __post_init__(self):
        vals = {k: float(v) for k, v in self.values.items()}
        bad = [k for k, v in vals.items() if not math.isfinite(v)]
        if bad:
            raise DataError(f"cell {self.cell_id}: non-finite feature(s) {', '.join(bad)}")
        object.__setattr__(self, "values", MappingProxyType(vals))

    def __getitem__(self, name: str) -> float:
        return self.values[name]


def delta_q_curve(cell: CellRecord, grid: VoltageGrid | None = None, kernel: str = "cubic", degree: int = 1) -> np.ndarray:
    """Cycle-100 minus cycle-10 discharge capacity on a shared voltage grid."""
    grid = grid or VoltageGrid()
    for cyc in (10, 100):
        if cyc not in cell.early_curves:
            raise DataError(f"cell {cell.cell_id}: missing discharge curve for cycle {cyc}")
    q10 = resample(fit_rbf(cell.early_curves[10], kernel, degree), grid)
    q100 = resample(fit_rbf(cell.early_curves[100], kernel, degree), grid)
    return q100 - q10


def _log10_abs(value: float, name: str, cell_id: str) -> float:
    if not (abs(value) > 0) or not math.isfinite(value):
        raise DataError(f"cell {cell_id}: degenerate cell, {name} is {value!r} before log")
    return math.log10(abs(value))


def _line(cycles: np.ndarray, qd: np.ndarray, first: int, last: int, cell_id: str) -> tuple[float, float]:
    m = (cycles >= first) & (cycles <= last)
    if np.count_nonzero(m) < 3:
        raise DataError(f"cell {cell_id}: fewer than 3 summaries in cycles {first}-{last}")
    slope, intercept = np.polyfit(cycles[m].astype(float), qd[m], 1)
    return float(slope), float(intercept)


def delta_q_stats(dq: np.ndarray, cell_id: str = "?") -> dict[str, float]:
    if np.ptp(dq) == 0:
        # np.var of a constant vector is rounding noise, not zero
        raise DataError(f"cell {cell_id}: degenerate cell, dQ curve is constant")
    return {
        "DeltaQ_logVar": _log10_abs(float(np.var(dq)), "Var(dQ)", cell_id),
        "DeltaQ_logMin": _log10_abs(float(np.min(dq)), "min(dQ)", cell_id),
        "DeltaQ_logMean": _log10_abs(float(np.mean(dq)), "mean(dQ)", cell_id),
        "DeltaQ_logSkew": _log10_abs(float(stats.skew(dq)), "skew(dQ)", cell_id),
        "DeltaQ_logKurt": _log10_abs(float(stats.kurtosis(dq, fisher=True)), "kurtosis(dQ)", cell_id),
    }


def extract_features(cell: CellRecord, grid: VoltageGrid | None = None, kernel: str = "cubic", degree: int = 1) -> FeatureVector:
    """All candidate features of one cell.

    The five ``DeltaQ_log*`` features are ``log10 |statistic|`` of the
    difference curve (variance, minimum, mean, skewness, excess kurtosis);
    the rest come from the per-cycle summaries up to cycle 100.
    """
    cid = cell.cell_id
    s = cell.summaries
    for cyc in (2, 100):
        if s.index_of(cyc) is None:
            raise DataError(f"cell {cid}: missing summary for cycle {cyc}")
    dq = delta_q_curve(cell, grid, kernel, degree)
    values = delta_q_stats(dq, cid)

    early = s.cycle <= 100
    cyc, qd, ir = s.cycle[early], s.qd[early], s.ir[early]
    slope_2, icpt_2 = _line(cyc, qd, 2, 100, cid)
    slope_91, icpt_91 = _line(cyc, qd, 91, 100, cid)
    i2, i100 = s.index_of(2), s.index_of(100)
    qd_2 = float(s.qd[i2])
    values.update({
        "Slope_capacity_fade_2_100": slope_2,
        "Slope_capacity_fade_91_100": slope_91,
        "QD_Max_2": float(np.max(qd)) - qd_2,
        "QD_2": qd_2,
        "Intercept_capacity_fade_2_100": icpt_2,
        "Intercept_capacity_fade_91_100": icpt_91,
        "Min_IR": float(np.min(ir)),
        "IR_100_2": float(s.ir[i100] - s.ir[i2]),
    })
    return FeatureVector(cid, cell.split, {k: values[k] for k in CANDIDATE_FEATURES})


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation; ties get their average rank."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("spearman needs two 1-D sequences of equal length")
    if len(x) < 3:
        raise DataError("spearman needs at least 3 observations")
    rx = stats.rankdata(x) - (len(x) + 1) / 2.0
    ry = stats.rankdata(y) - (len(y) + 1) / 2.0
    sx, sy = math.sqrt(rx @ rx), math.sqrt(ry @ ry)
    if sx == 0 or sy == 0:
        raise DataError("spearman undefined: zero rank variance")
    return float(np.clip((rx @ ry) / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class FeatureScore:
    name: str
    rho_A: float
    rho_B: float
    selected: bool = False

    @property
    def score(self) -> float:
        return max(abs(self.rho_A), abs(self.rho_B))


@dataclass(frozen=True)
class CorrelationReport:
    rows: tuple[FeatureScore, ...]
    n_train: int = 0

    @property
    def selected(self) -> tuple[str, ...]:
        """Selected feature names, strongest first."""
        chosen = [r for r in self.rows if r.selected]
        return tuple(r.name for r in sorted(chosen, key=lambda r: (-r.score, r.name)))

    def row(self, name: str) -> FeatureScore:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_table(self) -> str:
        lines = [f"{'feature':<32}{'rho_A':>8}{'rho_B':>8}  selected"]
        for r in self.rows:
            lines.append(f"{r.name:<32}{r.rho_A:>8.2f}{r.rho_B:>8.2f}  {'*' if r.selected else ''}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "selected": list(self.selected),
            "features": [
                {"name": r.name, "rho_A": r.rho_A, "rho_B": r.rho_B, "selected": r.selected} for r in self.rows
            ],
        }


def select_features(
    features: Sequence[FeatureVector],
    targets: Sequence[tuple[float, float]],
    n_select: int = N_SELECTED,
    names: Sequence[str] | None = None,
) -> CorrelationReport:
    """Rank candidates by ``max(|rho_A|, |rho_B|)`` on the train rows and keep the top ``n_select``.

    Rows whose split is not ``train`` are ignored. Ties break on feature name.
    Features with zero rank variance on the train rows get NaN correlations
    and are never selected.
    """
    if len(features) != len(targets):
        raise DataError("features and targets must be aligned")
    idx = [i for i, f in enumerate(features) if f.split == "train"]
    names = tuple(names or CANDIDATE_FEATURES)
    A = np.array([targets[i][0] for i in idx], dtype=float)
    B = np.array([targets[i][1] for i in idx], dtype=float)
    scored = []
    for name in names:
        col = np.array([features[i][name] for i in idx], dtype=float)
        try:
            scored.append(FeatureScore(name, spearman(col, A), spearman(col, B)))
        except DataError as exc:
            logger.warning("feature %s excluded from selection: %s", name, exc)
            scored.append(FeatureScore(name, math.nan, math.nan))
    valid = [r for r in scored if math.isfinite(r.score)]
    if len(valid) < n_select:
        raise DataError(f"only {len(valid)} usable features on {len(idx)} train cells, need {n_select}")
    top = {r.name for r in sorted(valid, key=lambda r: (-r.score, r.name))[:n_select]}
    rows = tuple(FeatureScore(r.name, r.rho_A, r.rho_B, r.name in top) for r in scored)
    return CorrelationReport(rows, len(idx))


@dataclass(frozen=True)
class Standardizer:
    """Per-feature centering and scaling with statistics from the train split.

    ``sign`` orients every feature so that it increases with the fitted ``A``
    on the train split. The attention block pools features without knowing
    which is which, so oppositely oriented features would cancel.
    """

    names: tuple[str, ...]
    mean: tuple[float, ...]
    sd: tuple[float, ...]
    sign: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.sign:
            object.__setattr__(self, "sign", (1.0,) * len(self.names))
        if not (len(self.names) == len(self.mean) == len(self.sd) == len(self.sign)):
            raise DataError("standardizer fields must have equal length")
        for n, s in zip(self.names, self.sd):
            if not (s > 0):
                raise DataError(f"feature {n} is constant on the train split (sd=0)")

    @classmethod
    def fit(
        cls,
        features: Sequence[FeatureVector],
        names: Sequence[str],
        report: CorrelationReport | None = None,
    ) -> "Standardizer":
        rows = [f for f in features if f.split == "train"]
        if len(rows) < 2:
            raise DataError("standardizer needs at least 2 train cells")
        X = np.array([[f[n] for n in names] for f in rows], dtype=float)
        mean = X.mean(axis=0)
        sd = np.sqrt(((X - mean) ** 2).mean(axis=0))
        sign = tuple(_orientation(report.row(n)) if report else 1.0 for n in names)
        return cls(tuple(names), tuple(map(float, mean)), tuple(map(float, sd)), sign)

    def transform(self, features: Sequence[FeatureVector]) -> np.ndarray:
        try:
            X = np.array([[f[n] for n in self.names] for f in features], dtype=float)
        except KeyError as exc:
            raise DataError(f"feature {exc.args[0]!r} unknown to this feature vector") from None
        X = X.reshape(len(features), len(self.names))
        return np.array(self.sign) * ((X - np.array(self.mean)) / np.array(self.sd))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": list(self.mean), "sd": list(self.sd), "sign": list(self.sign)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            tuple(d["names"]),
            tuple(map(float, d["mean"])),
            tuple(map(float, d["sd"])),
            tuple(map(float, d.get("sign", ()))),
        )


def _orientation(row: FeatureScore) -> float:
    if math.isfinite(row.rho_A) and row.rho_A != 0:
        return 1.0 if row.rho_A > 0 else -1.0
    if math.isfinite(row.rho_B) and row.rho_B != 0:
        return -1.0 if row.rho_B > 0 else 1.0
    return 1.0


def standardize(features: Sequence[FeatureVector], standardizer: Standardizer) -> np.ndarray:
    return standardizer.transform(features)


# --- feature table ------------------------------------------------------------


@dataclass
class FeatureRow:
    features: FeatureVector
    A: float | None = None
    B: float | None = None
    C: float | None = None
    cycle_life: int | None = None
    extra: dict = field(default_factory=dict)


TABLE_TAIL = ("A", "B", "C", "cycle_life")


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def write_feature_table(rows: Sequence[FeatureRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "split", *CANDIDATE_FEATURES, *TABLE_TAIL])
        for r in rows:
            fv = r.features
            w.writerow([fv.cell_id, fv.split, *(_fmt(fv[n]) for n in CANDIDATE_FEATURES),
                        _fmt(r.A), _fmt(r.B), _fmt(r.C), _fmt(r.cycle_life)])


def read_feature_table(path) -> list[FeatureRow]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read feature table {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = {"cell_id", "split", *CANDIDATE_FEATURES, *TABLE_TAIL} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: feature table missing column(s) {sorted(missing)}")
        out = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                vals = {n: float(rec[n]) for n in CANDIDATE_FEATURES}
                opt = {k: (float(rec[k]) if rec[k] else None) for k in ("A", "B", "C")}
                life = int(float(rec["cycle_life"])) if rec["cycle_life"] else None
            except ValueError as exc:
                raise DataError(f"{path}, line {lineno}: {exc}") from None
            out.append(FeatureRow(FeatureVector(rec["cell_id"], rec["split"], vals), cycle_life=life, **opt))
    return out
