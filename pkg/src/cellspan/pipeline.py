"""Orchestration shared by the CLI and the end-to-end tests.

Per-cell work runs through :func:`pmap`, a thread pool capped by the
``CELLSPAN_THREADS`` environment variable, and results always come back
sorted by ``cell_id`` whatever the completion order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .attention import AttentionModel, init_model
from .dataset import DEFAULT_THRESHOLD, CellRecord, capacity_loss_series
from .errors import CellspanError, DataError, NumericalError
from .features import (
    CorrelationReport,
    FeatureRow,
    FeatureVector,
    Standardizer,
    extract_features,
    select_features,
)
from .interp import VoltageGrid
from .physics import FitReport, PhysicsParams, cycle_life, fit_cell, initial_loss_C
from .training import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_L1_GRID,
    ElasticNetModel,
    EvalReport,
    GridPoint,
    HistoryRow,
    TrainConfig,
    TrainingData,
    evaluate,
    grid_search_elastic_net,
    predict_lives,
    set_output_map,
    train_two_stage,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    raw = os.environ.get("CELLSPAN_THREADS", "").strip()
    if not raw:
        return min(8, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"CELLSPAN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise DataError(f"CELLSPAN_THREADS must be a positive integer, got {raw!r}")
    return n


def pmap(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Order-preserving parallel map."""
    n = thread_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def by_id(cells: Iterable[CellRecord]) -> list[CellRecord]:
    return sorted(cells, key=lambda c: c.cell_id)


# --- curve fitting --------------------------------------------------------------


@dataclass(frozen=True)
class CellFit:
    cell: CellRecord
    report: FitReport | None
    error: str | None = None
    error_kind: str | None = None  # "data" | "numerical"

    @property
    def ok(self) -> bool:
        return self.report is not None and self.report.converged


def _fit_one(cell: CellRecord) -> CellFit:
    try:
        return CellFit(cell, fit_cell(cell))
    except DataError as exc:
        return CellFit(cell, None, str(exc), "data")
    except NumericalError as exc:
        return CellFit(cell, None, str(exc), "numerical")


def fit_all(cells: Sequence[CellRecord]) -> list[CellFit]:
    return pmap(_fit_one, by_id(cells))


def observed_life(cell: CellRecord, threshold: float = DEFAULT_THRESHOLD) -> int | None:
    """The recorded label at the default threshold, else the first summary cycle whose loss reaches ``threshold``."""
    if threshold == DEFAULT_THRESHOLD:
        return cell.cycle_life
    if not len(cell.summaries):
        return None
    series = capacity_loss_series(cell)
    hit = np.flatnonzero(series.loss >= threshold)
    return int(series.cycles[hit[0]]) if len(hit) else None


def fitted_life(report: FitReport, threshold: float) -> float | None:
    try:
        return cycle_life(report.params, threshold)
    except CellspanError:
        return None


# --- features -------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSettings:
    grid_points: int = 1000
    v_min: float = 2.0
    v_max: float = 3.6
    kernel: str = "cubic"
    degree: int = 1

    def grid(self) -> VoltageGrid:
        return VoltageGrid(self.v_min, self.v_max, self.grid_points)


def _features_one(args) -> FeatureVector | str:
    cell, settings = args
    try:
        return extract_features(cell, settings.grid(), settings.kernel, settings.degree)
    except (DataError, NumericalError) as exc:
        return str(exc)


def extract_all(cells: Sequence[CellRecord], settings: FeatureSettings) -> tuple[list[FeatureVector], list[str]]:
    """Feature vectors for every usable cell plus a warning per skipped cell."""
    results = pmap(_features_one, [(c, settings) for c in by_id(cells)])
    vectors = [r for r in results if isinstance(r, FeatureVector)]
    skipped = [r for r in results if isinstance(r, str)]
    for msg in skipped:
        logger.warning("skipped: %s", msg)
    return vectors, skipped


def build_feature_rows(vectors: Sequence[FeatureVector], fits: Sequence[CellFit]) -> list[FeatureRow]:
    fit_by_id = {f.cell.cell_id: f for f in fits}
    rows = []
    for fv in vectors:
        f = fit_by_id.get(fv.cell_id)
        if f is None:
            rows.append(FeatureRow(fv))
            continue
        ok = f.ok
        p = f.report.params if ok else None
        rows.append(FeatureRow(
            fv,
            A=p.A if ok else None,
            B=p.B if ok else None,
            C=initial_loss_C(f.cell) if len(f.cell.summaries) else None,
            cycle_life=f.cell.cycle_life,
        ))
    return rows


def correlation_report(rows: Sequence[FeatureRow]) -> CorrelationReport:
    usable = [r for r in rows if r.A is not None]
    return select_features([r.features for r in usable], [(r.A, r.B) for r in usable])


# --- checkpoint -----------------------------------------------------------------


@dataclass
class Checkpoint:
    model: AttentionModel
    standardizer: Standardizer
    features: FeatureSettings
    train_config: TrainConfig
    baseline: ElasticNetModel | None = None

    @property
    def selected(self) -> tuple[str, ...]:
        return self.standardizer.names

    def to_dict(self) -> dict:
        return {
            "format": "cellspan-checkpoint/1",
            "model": self.model.to_dict(),
            "standardizer": self.standardizer.to_dict(),
            "selected_features": list(self.selected),
            "feature_settings": asdict(self.features),
            "train_config": self.train_config.to_dict(),
            "baseline": None if self.baseline is None else self.baseline.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        try:
            if d.get("format") != "cellspan-checkpoint/1":
                raise DataError(f"unsupported checkpoint format {d.get('format')!r}")
            std = Standardizer.from_dict(d["standardizer"])
            model = AttentionModel.from_dict(d["model"])
            if model.n_features != len(std.names):
                raise DataError("checkpoint model and standardizer disagree on the feature count")
            base = d.get("baseline")
            return cls(
                model,
                std,
                FeatureSettings(**d["feature_settings"]),
                TrainConfig(**d["train_config"]),
                None if base is None else ElasticNetModel.from_dict(base),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed checkpoint: {exc!r}") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(d)


# --- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[HistoryRow]
    report: CorrelationReport
    baseline_grid: list[GridPoint]


def _complete(rows: Sequence[FeatureRow], split: str) -> list[FeatureRow]:
    return [
        r for r in rows
        if r.features.split == split and r.A is not None and r.C is not None and r.cycle_life is not None
    ]


def train_pipeline(
    rows: Sequence[FeatureRow],
    config: TrainConfig,
    settings: FeatureSettings,
    alphas: Sequence[float] = DEFAULT_ALPHA_GRID,
    l1_ratios: Sequence[float] = DEFAULT_L1_GRID,
    with_baseline: bool = True,
) -> TrainResult:
    """Select features, standardize, train the attention model and (optionally) the elastic-net baseline."""
    report = correlation_report(rows)
    train = _complete(rows, "train")
    if len(train) < 2:
        raise DataError(f"need at least 2 complete train cells, found {len(train)}")
    std = Standardizer.fit([r.features for r in train], report.selected, report)
    data = TrainingData(
        std.transform([r.features for r in train]),
        [(r.A, r.B) for r in train],
        [r.C for r in train],
        [r.cycle_life for r in train],
        [r.features.cell_id for r in train],
    )
    model = init_model(len(std.names), config.embed_dim, 2, config.rng_seed)
    set_output_map(model, data.targets)
    trained, history = train_two_stage(model, data, config)

    baseline, grid = None, []
    if with_baseline:
        sel = _complete(rows, "primary_test")
        if not sel:
            logger.warning("no primary_test cells with labels; elastic-net grid selects on train")
            sel = train
        baseline, grid = grid_search_elastic_net(
            data.Z, data.targets,
            std.transform([r.features for r in sel]),
            np.array([r.C for r in sel]),
            np.array([r.cycle_life for r in sel], dtype=float),
            alphas, l1_ratios, config.threshold,
        )
    return TrainResult(Checkpoint(trained, std, settings, config, baseline), history, report, grid)


# --- prediction -----------------------------------------------------------------


@dataclass(frozen=True)
class PreparedCell:
    cell: CellRecord
    z: np.ndarray  # (1, n_selected)
    C: float
    fit: FitReport | None


def _prepare_one(args) -> PreparedCell | str:
    cell, ckpt = args
    try:
        fv = extract_features(cell, ckpt.features.grid(), ckpt.features.kernel, ckpt.features.degree)
        z = ckpt.standardizer.transform([fv])
        C = initial_loss_C(cell)
    except (DataError, NumericalError) as exc:
        return str(exc)
    fit = _fit_one(cell)
    return PreparedCell(cell, z, C, fit.report if fit.ok else None)


def prepare_cells(ckpt: Checkpoint, cells: Sequence[CellRecord]) -> tuple[list[PreparedCell], list[str]]:
    results = pmap(_prepare_one, [(c, ckpt) for c in by_id(cells)])
    ok = [r for r in results if isinstance(r, PreparedCell)]
    skipped = [r for r in results if isinstance(r, str)]
    for msg in skipped:
        logger.warning("skipped: %s", msg)
    return ok, skipped


def evaluate_prepared(predictor, prepared: Sequence[PreparedCell], threshold: float, name: str) -> EvalReport:
    if not prepared:
        return EvalReport(name, threshold, {}, [], ["no evaluable cells"])
    return evaluate(
        predictor,
        np.vstack([p.z for p in prepared]),
        [p.cell.cell_id for p in prepared],
        [p.cell.split for p in prepared],
        [p.C for p in prepared],
        [observed_life(p.cell, threshold) for p in prepared],
        threshold,
        [None if p.fit is None else (p.fit.params.A, p.fit.params.B) for p in prepared],
        name,
    )


def predict_one(predictor, prepared: PreparedCell, threshold: float) -> tuple[float, float, float]:
    """(A_hat, B_hat, life) through the exact code path ``evaluate`` uses."""
    P = predictor.predict_params(prepared.z)
    life = float(predict_lives(P, np.array([prepared.C]), threshold)[0])
    return float(P[0, 0]), float(P[0, 1]), life


def loss_curve_samples(A: float, B: float, C: float, last_cycle: float, n: int = 50) -> list[tuple[int, float]]:
    """Predicted capacity loss on ~``n`` integer cycles from 1 to ``last_cycle``."""
    if not math.isfinite(last_cycle) or last_cycle < 1:
        last_cycle = 1
    if not B > 0:
        return []
    params = PhysicsParams(A, B, C)
    xs = np.unique(np.round(np.linspace(1, last_cycle, n)).astype(int))
    return [(int(x), float(v)) for x, v in zip(xs, np.atleast_1d(_safe_q_loss(params, xs)))]


def _safe_q_loss(params: PhysicsParams, xs: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(np.minimum(params.A + params.B * np.log(xs.astype(float)), 709.0)) + params.C
