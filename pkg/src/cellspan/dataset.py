"""Cell records, the JSON interchange format, and the synthetic oracle generator.

Dataset file layout (UTF-8 JSON)::

    {"cells": [
        {"cell_id": "b1c0", "split": "train", "nominal_capacity_ah": 1.1,
         "charge_policy": "3.6C(80%)-3.6C", "cycle_life": 1852,
         "summaries": {"cycle": [...], "qd": [...], "ir": [...],
                       "t_avg": [...], "t_max": [...]},
         "early_curves": {"10": {"v": [...], "qd": [...]},
                          "100": {"v": [...], "qd": [...]}}},
        ...
    ]}

The truth sidecar written next to synthetic datasets maps
``cell_id -> {"A", "B", "C", "cycle_life_true", ...}``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "primary_test", "secondary_test")
V_MIN = 2.0
V_MAX = 3.6
DEFAULT_THRESHOLD = 0.2


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CycleSummary:
    cycle: int
    discharge_capacity: float
    internal_resistance: float
    avg_temperature: float
    max_temperature: float


class SummaryTable:
    """Column-oriented per-cycle summaries of one cell.

    Behaves as an ordered sequence of :class:`CycleSummary` but keeps the
    columns as read-only numpy arrays, since real cells carry thousands of
    cycles.
    """

    __slots__ = ("cycle", "qd", "ir", "t_avg", "t_max")

    def __init__(self, cycle, qd, ir=None, t_avg=None, t_max=None):
        n = len(cycle)
        fill = np.zeros(n)
        self.cycle = _frozen(cycle, dtype=np.int64)
        self.qd = _frozen(qd)
        self.ir = _frozen(fill if ir is None else ir)
        self.t_avg = _frozen(fill if t_avg is None else t_avg)
        self.t_max = _frozen(fill if t_max is None else t_max)
        for name in ("qd", "ir", "t_avg", "t_max"):
            if len(getattr(self, name)) != n:
                raise DataError(f"summaries.{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.cycle)

    def __iter__(self) -> Iterator[CycleSummary]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> CycleSummary:
        return CycleSummary(
            int(self.cycle[i]),
            float(self.qd[i]),
            float(self.ir[i]),
            float(self.t_avg[i]),
            float(self.t_max[i]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SummaryTable):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__slots__)

    def window(self, first: int, last: int) -> "SummaryTable":
        """Rows with ``first <= cycle <= last``."""
        m = (self.cycle >= first) & (self.cycle <= last)
        return SummaryTable(self.cycle[m], self.qd[m], self.ir[m], self.t_avg[m], self.t_max[m])

    def index_of(self, cycle: int) -> int | None:
        i = int(np.searchsorted(self.cycle, cycle))
        if i < len(self.cycle) and self.cycle[i] == cycle:
            return i
        return None


@dataclass(frozen=True, eq=False)
class DischargeCurve:
    """Discharged capacity vs. voltage for one discharge. Voltages are clipped to [2.0, 3.6] V."""

    voltage: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        v = np.clip(np.asarray(self.voltage, dtype=float), V_MIN, V_MAX)
        q = np.asarray(self.capacity, dtype=float)
        if v.ndim != 1 or v.shape != q.shape:
            raise DataError("discharge curve voltage/capacity must be 1-D arrays of equal length")
        if len(v) < 4:
            raise DataError(f"discharge curve needs at least 4 points, got {len(v)}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(q))):
            raise DataError("discharge curve contains non-finite values")
        if np.any(q < 0):
            raise DataError("discharge curve capacity must be non-negative")
        object.__setattr__(self, "voltage", _frozen(v))
        object.__setattr__(self, "capacity", _frozen(q))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DischargeCurve):
            return NotImplemented
        return np.array_equal(self.voltage, other.voltage) and np.array_equal(self.capacity, other.capacity)


@dataclass(frozen=True, eq=False)
class CellRecord:
    cell_id: str
    split: str
    nominal_capacity: float
    charge_policy: str
    cycle_life: int | None
    summaries: SummaryTable
    early_curves: Mapping[int, DischargeCurve] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        cid = self.cell_id
        if self.split not in SPLITS:
            raise DataError(f"cell {cid}: split {self.split!r} not one of {SPLITS}")
        if not (self.nominal_capacity > 0):
            raise DataError(f"cell {cid}: nominal_capacity must be > 0")
        cyc = self.summaries.cycle
        if len(cyc):
            if cyc[0] < 1:
                raise DataError(f"cell {cid}: cycle numbers must be >= 1")
            steps = np.diff(cyc)
            if np.any(steps <= 0):
                k = int(np.argmax(steps <= 0))
                if steps[k] == 0:
                    raise DataError(f"cell {cid}: duplicate cycle {int(cyc[k])} in summaries")
                raise DataError(f"cell {cid}: summaries not increasing at cycle {int(cyc[k + 1])}")
        if np.any(self.summaries.qd < 0):
            raise DataError(f"cell {cid}: discharge_capacity must be >= 0")
        if self.cycle_life is not None:
            if self.cycle_life < 1:
                raise DataError(f"cell {cid}: cycle_life must be >= 1")
            if not len(cyc) or cyc[-1] < 100:
                raise DataError(f"cell {cid}: cycle_life present but summaries do not reach cycle 100")
        for k in self.early_curves:
            if int(k) < 1:
                raise DataError(f"cell {cid}: early curve cycle {k} must be positive")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CellRecord):
            return NotImplemented
        return (
            self.cell_id == other.cell_id
            and self.split == other.split
            and self.nominal_capacity == other.nominal_capacity
            and self.charge_policy == other.charge_policy
            and self.cycle_life == other.cycle_life
            and self.summaries == other.summaries
            and dict(self.early_curves) == dict(other.early_curves)
        )


@dataclass(frozen=True)
class CapacityLossSeries:
    cycles: np.ndarray
    loss: np.ndarray
    clamped: int = 0  # points where raw QD exceeded nominal


def capacity_loss_series(cell: CellRecord) -> CapacityLossSeries:
    """Fractional capacity loss ``1 - QD / nominal`` per recorded cycle, clamped at 0."""
    if not len(cell.summaries):
        raise DataError(f"cell {cell.cell_id}: no cycle summaries")
    raw = 1.0 - cell.summaries.qd / cell.nominal_capacity
    n_clamped = int(np.sum(raw < 0))
    if n_clamped:
        logger.debug("cell %s: %d cycles above nominal capacity, loss clamped to 0", cell.cell_id, n_clamped)
    return CapacityLossSeries(_frozen(cell.summaries.cycle, dtype=np.int64), _frozen(np.maximum(raw, 0.0)), n_clamped)


# --- interchange format -------------------------------------------------------


def _require(obj, key, where):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise DataError(f"{where}: missing field {key!r}") from None


def _numbers(seq, where, dtype=float):
    if not isinstance(seq, list):
        raise DataError(f"{where}: expected an array")
    try:
        arr = np.array(seq, dtype=dtype)
    except (TypeError, ValueError):
        raise DataError(f"{where}: non-numeric entry") from None
    if arr.ndim != 1:
        raise DataError(f"{where}: expected a flat array")
    if dtype is float and not np.all(np.isfinite(arr)):
        raise DataError(f"{where}: non-finite entry")
    return arr


def cell_from_dict(obj: dict, where: str = "cell") -> CellRecord:
    cid = _require(obj, "cell_id", where)
    where = f"{where} ({cid})"
    summ = _require(obj, "summaries", where)
    cols = {k: _numbers(_require(summ, k, f"{where}.summaries"), f"{where}.summaries.{k}")
            for k in ("qd", "ir", "t_avg", "t_max")}
    cyc_raw = _numbers(_require(summ, "cycle", f"{where}.summaries"), f"{where}.summaries.cycle")
    if np.any(cyc_raw != np.round(cyc_raw)):
        raise DataError(f"{where}.summaries.cycle: non-integer cycle number")
    table = SummaryTable(cyc_raw.astype(np.int64), **cols)
    curves = {}
    for key, c in (obj.get("early_curves") or {}).items():
        try:
            cyc = int(key)
        except ValueError:
            raise DataError(f"{where}.early_curves: key {key!r} is not a cycle number") from None
        curves[cyc] = DischargeCurve(
            _numbers(_require(c, "v", f"{where}.early_curves.{key}"), f"{where}.early_curves.{key}.v"),
            _numbers(_require(c, "qd", f"{where}.early_curves.{key}"), f"{where}.early_curves.{key}.qd"),
        )
    life = obj.get("cycle_life")
    if life is not None and (not isinstance(life, (int, float)) or life != int(life)):
        raise DataError(f"{where}.cycle_life: expected integer or null")
    return CellRecord(
        cell_id=str(cid),
        split=_require(obj, "split", where),
        nominal_capacity=float(_require(obj, "nominal_capacity_ah", where)),
        charge_policy=str(obj.get("charge_policy", "")),
        cycle_life=None if life is None else int(life),
        summaries=table,
        early_curves=dict(sorted(curves.items())),
    )


def cell_to_dict(cell: CellRecord) -> dict:
    s = cell.summaries
    return {
        "cell_id": cell.cell_id,
        "split": cell.split,
        "nominal_capacity_ah": cell.nominal_capacity,
        "charge_policy": cell.charge_policy,
        "cycle_life": cell.cycle_life,
        "summaries": {
            "cycle": s.cycle.tolist(),
            "qd": s.qd.tolist(),
            "ir": s.ir.tolist(),
            "t_avg": s.t_avg.tolist(),
            "t_max": s.t_max.tolist(),
        },
        "early_curves": {
            str(k): {"v": c.voltage.tolist(), "qd": c.capacity.tolist()}
            for k, c in sorted(cell.early_curves.items())
        },
    }


def parse_dataset(text: str, source: str = "<string>") -> list[CellRecord]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    cells = _require(doc, "cells", source)
    if not isinstance(cells, list):
        raise DataError(f"{source}: field 'cells' must be an array")
    records = [cell_from_dict(c, f"{source}: cells[{i}]") for i, c in enumerate(cells)]
    seen = set()
    for r in records:
        if r.cell_id in seen:
            raise DataError(f"{source}: duplicate cell_id {r.cell_id!r}")
        seen.add(r.cell_id)
    return records


def load_dataset(path) -> list[CellRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    return parse_dataset(text, str(path))


def dumps_dataset(cells: Sequence[CellRecord]) -> str:
    return json.dumps({"cells": [cell_to_dict(c) for c in cells]}, separators=(",", ":")) + "\n"


def save_dataset(cells: Sequence[CellRecord], path) -> None:
    Path(path).write_text(dumps_dataset(cells), encoding="utf-8")


def save_truth(truth: Mapping[str, dict], path) -> None:
    Path(path).write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_truth(path) -> dict[str, dict]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read truth file {path}: {exc}") from None


# --- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic oracle dataset.

    Capacity loss follows ``exp(A) * x**B + C`` with (A, B, C) drawn uniformly
    from the ranges; ``noise_sd`` adds i.i.d. Gaussian noise to the loss.
    """

    n_cells: int = 124
    A_range: tuple[float, float] = (-14.5, -12.5)
    B_range: tuple[float, float] = (1.9, 2.1)
    C_range: tuple[float, float] = (0.005, 0.03)
    noise_sd: float = 0.002
    max_cycles: int = 3000
    rng_seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    nominal_capacity: float = 1.1
    # |min dQ| of the 100-10 difference curve is dq_scale / cycle_life
    dq_scale: float = 10.0

    def validate(self) -> None:
        if self.n_cells < 0:
            raise DataError("n_cells must be non-negative")
        for name in ("A_range", "B_range", "C_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise DataError(f"{name} must be a non-empty finite interval, got {(lo, hi)}")
        if self.B_range[0] <= 0:
            raise DataError("B_range must lie in (0, inf)")
        if self.C_range[0] < 0 or self.C_range[1] >= self.threshold:
            raise DataError("C_range must lie in [0, threshold)")
        if self.noise_sd < 0:
            raise DataError("noise_sd must be non-negative")
        if self.max_cycles < 100:
            raise DataError("max_cycles must be >= 100")
        if not (0 < self.threshold < 1):
            raise DataError("threshold must lie in (0, 1)")
        if min(self.split_fractions) < 0 or not math.isclose(sum(self.split_fractions), 1.0):
            raise DataError("split_fractions must be non-negative and sum to 1")


# Discharge-curve construction for synthetic cells. The cycle-10 curve is a
# smooth LFP-like profile; the cycle-100 curve adds a Gaussian dip whose depth
# is dq_scale / life, so shorter-lived cells sag more.
DQ_CENTER = 3.15
DQ_WIDTH = 0.07


def dq_template(v, amplitude: float, width: float, center: float = DQ_CENTER) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return -amplitude * np.exp(-0.5 * ((v - center) / width) ** 2)


def _base_curve(v: np.ndarray, q_full: float) -> np.ndarray:
    from scipy.special import ndtr

    shape = 0.9 * ndtr((3.2 - v) / 0.06) + 0.1 * (V_MAX - v) / (V_MAX - V_MIN)
    return q_full * shape


def _node_voltages(rng: np.random.Generator) -> np.ndarray:
    # Sparse on the tails, dense on the 3.0-3.2 V plateau.
    v = np.concatenate([
        rng.uniform(2.0, 3.0, 30),
        rng.uniform(3.0, 3.2, 60),
        rng.uniform(3.2, 3.6, 20),
        [V_MIN, V_MAX],
    ])
    return np.unique(np.round(v, 6))


def true_cycle_life(A: float, B: float, C: float, threshold: float) -> float:
    return math.exp((math.log(threshold - C) - A) / B)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[CellRecord], dict[str, dict]]:
    """Draw a synthetic dataset and its truth sidecar, deterministic in ``spec.rng_seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    n = spec.n_cells
    A = rng.uniform(*spec.A_range, size=n)
    B = rng.uniform(*spec.B_range, size=n)
    C = rng.uniform(*spec.C_range, size=n)

    n_train = round(spec.split_fractions[0] * n)
    n_primary = round(spec.split_fractions[1] * n)
    labels = ["train"] * n_train + ["primary_test"] * n_primary
    labels += ["secondary_test"] * (n - len(labels))
    labels = [labels[i] for i in rng.permutation(n)]

    cells, truth = [], {}
    for i in range(n):
        cid = f"syn-{i:04d}"
        life = true_cycle_life(A[i], B[i], C[i], spec.threshold)
        crossing = math.ceil(life)
        # exp(A) x^B + C >= threshold from ceil(life) on; guard the float edge
        if math.exp(A[i] + B[i] * math.log(crossing)) + C[i] < spec.threshold:
            crossing += 1
        last = max(100, min(spec.max_cycles, crossing))
        x = np.arange(1, last + 1)
        loss = np.exp(A[i] + B[i] * np.log(x)) + C[i]
        if spec.noise_sd > 0:
            loss = loss + rng.normal(0.0, spec.noise_sd, size=last)
        qd = spec.nominal_capacity * (1.0 - loss)
        qd = np.maximum(qd, 0.0)
        ir = 0.016 + 0.0005 * rng.standard_normal(last)
        t_avg = 31.0 + 0.5 * rng.standard_normal(last)
        t_max = t_avg + 4.0 + 0.5 * np.abs(rng.standard_normal(last))

        v = _node_voltages(rng)
        amp = spec.dq_scale / life
        width = DQ_WIDTH
        q10 = _base_curve(v, spec.nominal_capacity * (1.0 - (math.exp(A[i] + B[i] * math.log(10)) + C[i])))
        q10 = q10 + amp  # keeps the cycle-100 curve non-negative where the dip sits
        q100 = q10 + dq_template(v, amp, width)

        cells.append(CellRecord(
            cell_id=cid,
            split=labels[i],
            nominal_capacity=spec.nominal_capacity,
            charge_policy="synthetic",
            cycle_life=crossing if crossing <= spec.max_cycles else None,
            summaries=SummaryTable(x, qd, ir, t_avg, t_max),
            early_curves={10: DischargeCurve(v, q10), 100: DischargeCurve(v, q100)},
        ))
        truth[cid] = {
            "A": float(A[i]),
            "B": float(B[i]),
            "C": float(C[i]),
            "cycle_life_true": life,
            "dq_amplitude": amp,
            "dq_center": DQ_CENTER,
            "dq_width": float(width),
        }
    return cells, truth
