"""Power-law capacity-loss model and its inversion to cycle life.

The model is ``Q_loss(x) = exp(A) * x**B + C`` over cycle number ``x``. It is
the isothermal reduction of an Arrhenius-type law ``D * exp(-Ea / (R T)) * x**B``:
with temperature treated as constant, the exponential factor folds into ``D``
and ``A = ln D`` is carried instead of ``D`` to keep magnitudes manageable.
``C`` is the initial capacity loss and is fixed per cell, not fitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import DEFAULT_THRESHOLD, CapacityLossSeries, CellRecord
from .errors import DataError, NumericalError

B_FLOOR = 1e-6
_LOG_MAX = 709.0  # exp() overflows float64 above this


@dataclass(frozen=True)
class PhysicsParams:
    A: float
    B: float
    C: float = 0.0

    def __post_init__(self):
        if not (self.B > 0):
            raise DataError(f"B must be > 0, got {self.B}")
        if not (self.C >= 0):
            raise DataError(f"C must be >= 0, got {self.C}")
        if not (math.isfinite(self.A) and self.A < _LOG_MAX):
            raise DataError(f"exp(A) must be finite, got A={self.A}")


@dataclass(frozen=True)
class FitReport:
    params: PhysicsParams
    r_squared: float
    rmse_loss: float
    iterations: int
    converged: bool
    grad_norm: float = 0.0
    objective_trace: tuple[float, ...] = field(default=(), repr=False)


def q_loss(params: PhysicsParams, x):
    """Evaluate ``exp(A) * x**B + C`` in log space. ``x = 0`` gives ``C``."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0):
        raise DataError("cycle number must be non-negative")
    with np.errstate(divide="ignore", over="ignore"):
        growth = np.where(xa > 0, np.exp(params.A + params.B * np.log(np.where(xa > 0, xa, 1.0))), 0.0)
    out = growth + params.C
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"q_loss overflow for A={params.A}, B={params.B}")
    return float(out) if np.ndim(x) == 0 else out


def cycle_life(params: PhysicsParams, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Cycle at which the modelled loss reaches ``threshold``."""
    if not (threshold < 1):
        raise DataError(f"threshold must be < 1, got {threshold}")
    if not (threshold > params.C):
        raise DataError(f"threshold {threshold} <= initial loss C={params.C}: end of life already passed at cycle 0")
    log_life = (math.log(threshold - params.C) - params.A) / params.B
    if log_life > _LOG_MAX:
        raise NumericalError(f"cycle life overflows (log life {log_life:.4g})")
    return math.exp(log_life)


def initial_loss_C(cell: CellRecord) -> float:
    if not len(cell.summaries):
        raise DataError(f"cell {cell.cell_id}: no cycle summaries")
    return max(0.0, 1.0 - float(cell.summaries.qd[0]) / cell.nominal_capacity)


def residuals(theta, x, y, C):
    """Residuals ``exp(A) x^B + C - y`` and their Jacobian w.r.t. (A, B)."""
    A, B = theta
    lx = np.log(x)
    f = np.exp(A + B * lx)
    return f + C - y, np.column_stack([f, f * lx])


def _log_linear_init(x, y, C):
    m = y > C + 1e-6
    if np.count_nonzero(m) < 3:
        raise DataError(f"need at least 3 points with loss above C={C:.6g}, got {np.count_nonzero(m)}")
    X = np.column_stack([np.ones(np.count_nonzero(m)), np.log(x[m])])
    (A, B), *_ = np.linalg.lstsq(X, np.log(y[m] - C), rcond=None)
    return np.array([A, max(B, B_FLOOR)])


def fit_params(
    series: CapacityLossSeries,
    C: float,
    max_iter: int = 200,
    rtol: float = 1e-12,
    gtol: float = 1e-10,
) -> FitReport:
    """Least-squares fit of (A, B) with ``C`` held fixed.

    Levenberg-Marquardt on the original loss scale, started from the
    log-linear OLS solution. Only steps that reduce the objective are
    accepted, so the recorded objective trace is non-increasing. ``B`` is
    projected onto ``[1e-6, inf)`` after every step.
    """
    x = np.asarray(series.cycles, dtype=float)
    y = np.asarray(series.loss, dtype=float)
    keep = x >= 1
    x, y = x[keep], y[keep]
    if len(x) < 5:
        raise DataError(f"need at least 5 cycles to fit, got {len(x)}")

    theta = _log_linear_init(x, y, C)
    r, J = residuals(theta, x, y, C)
    obj = float(r @ r)
    trace = [obj]
    mu = 1e-3
    converged = False
    it = 0
    grad = 2.0 * (J.T @ r)
    while it < max_iter:
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in capacity-loss fit")
        if obj == 0.0 or np.max(np.abs(grad)) < gtol:
            converged = True
            break
        it += 1
        JtJ = J.T @ J
        step = np.linalg.solve(JtJ + mu * np.diag(np.diag(JtJ) + 1e-300), -(J.T @ r))
        cand = theta + step
        cand[1] = max(cand[1], B_FLOOR)
        if cand[0] + cand[1] * math.log(x.max()) > _LOG_MAX:
            mu *= 4.0
            continue
        r_new, J_new = residuals(cand, x, y, C)
        obj_new = float(r_new @ r_new)
        if np.isfinite(obj_new) and obj_new <= obj:
            rel = (obj - obj_new) / obj
            theta, r, J, obj = cand, r_new, J_new, obj_new
            grad = 2.0 * (J.T @ r)
            trace.append(obj)
            mu = max(mu / 3.0, 1e-15)
            if rel < rtol:
                converged = True
                break
        else:
            mu *= 4.0
            if mu > 1e20:
                break

    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - obj / ss_tot if ss_tot > 0 else (1.0 if obj == 0 else -math.inf)
    return FitReport(
        params=PhysicsParams(float(theta[0]), float(theta[1]), float(C)),
        r_squared=r_squared,
        rmse_loss=math.sqrt(obj / len(x)),
        iterations=it,
        converged=converged,
        grad_norm=float(np.max(np.abs(grad))),
        objective_trace=tuple(trace),
    )


def fit_cell(cell: CellRecord, **kwargs) -> FitReport:
    """Fit a cell's full capacity-loss history, with ``C`` from its first recorded cycle."""
    from .dataset import capacity_loss_series

    return fit_params(capacity_loss_series(cell), initial_loss_C(cell), **kwargs)
