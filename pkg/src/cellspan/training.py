"""Two-stage training of the attention regressor, the elastic-net baseline, and evaluation.

Stage 1 minimizes the parameter RMSE
``sqrt(mean(w_A (A - A_hat)^2 + w_B (B - B_hat)^2))`` from a random start;
stage 2 fine-tunes on the cycle-life RMSE ``sqrt(mean((l - l_hat)^2))`` where
``l_hat = [exp(-A_hat) (threshold - C)]^(1 / B_hat)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .attention import AttentionModel, backward_batch, forward_batch, output_params, softplus_inv
from .dataset import DEFAULT_THRESHOLD, SPLITS
from .errors import DataError, NumericalError
from .physics import B_FLOOR

logger = logging.getLogger(__name__)

_LOG_LIFE_MAX = 700.0


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 800
    stage1_lr: float = 1e-3
    stage2_epochs: int = 3000
    stage2_lr: float = 5e-5
    w_A: float = 1.0
    w_B: float = 1.0
    rng_seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    embed_dim: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise DataError("epoch counts must be non-negative")
        if not (self.stage1_lr > 0 and self.stage2_lr > 0):
            raise DataError("learning rates must be positive")
        if not (self.w_A > 0 and self.w_B > 0):
            raise DataError("loss weights w_A, w_B must be positive")
        if not (0 < self.threshold < 1):
            raise DataError("threshold must lie in (0, 1)")
        if self.embed_dim < 1:
            raise DataError("embed_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossValue:
    kind: str  # "param_loss" | "cycle_life_loss"
    value: float


# --- losses --------------------------------------------------------------------


def _param_loss_grad(P: np.ndarray, T: np.ndarray, w_A: float, w_B: float) -> tuple[float, np.ndarray]:
    if len(P) == 0:
        raise DataError("parameter loss of an empty batch")
    E = P - T
    n = len(P)
    value = math.sqrt(float(np.mean(w_A * E[:, 0] ** 2 + w_B * E[:, 1] ** 2)))
    if value == 0.0:
        return 0.0, np.zeros_like(P)
    grad = np.column_stack([w_A * E[:, 0], w_B * E[:, 1]]) / (n * value)
    return value, grad


def param_loss(preds, targets, w_A: float = 1.0, w_B: float = 1.0) -> LossValue:
    P = np.asarray(preds, dtype=float).reshape(-1, 2)
    T = np.asarray(targets, dtype=float).reshape(-1, 2)
    if P.shape != T.shape:
        raise DataError("predictions and targets must be aligned")
    value, _ = _param_loss_grad(P, T, w_A, w_B)
    return LossValue("param_loss", value)


def predicted_log_lives(P: np.ndarray, C: np.ndarray, threshold: float, cell_ids: Sequence[str] | None = None) -> np.ndarray:
    """``log l_hat`` per cell; raises naming the first offending cell."""
    ids = cell_ids if cell_ids is not None else [str(i) for i in range(len(P))]
    bad_b = np.flatnonzero(~(P[:, 1] > 0))
    if len(bad_b):
        i = bad_b[0]
        raise DataError(f"cell {ids[i]}: predicted B_hat={P[i, 1]!r} is not positive")
    bad_c = np.flatnonzero(~(C < threshold))
    if len(bad_c):
        i = bad_c[0]
        raise DataError(f"cell {ids[i]}: C={C[i]!r} is not below threshold {threshold}")
    return (np.log(threshold - C) - P[:, 0]) / P[:, 1]


def _cycle_life_loss_grad(P, C, lives, threshold, cell_ids=None) -> tuple[float, np.ndarray]:
    if len(P) == 0:
        raise DataError("cycle-life loss of an empty batch")
    log_l = predicted_log_lives(P, C, threshold, cell_ids)
    blown = np.flatnonzero(~(log_l < _LOG_LIFE_MAX))
    if len(blown):
        ids = cell_ids if cell_ids is not None else [str(i) for i in range(len(P))]
        names = ", ".join(str(ids[i]) for i in blown[:5])
        raise NumericalError(f"predicted cycle life overflows for cell(s) {names} (B_hat near 0?)")
    l_hat = np.exp(log_l)
    r = l_hat - lives
    n = len(P)
    value = math.sqrt(float(np.mean(r**2)))
    if not math.isfinite(value):
        raise NumericalError("non-finite cycle-life loss")
    if value == 0.0:
        return 0.0, np.zeros_like(P)
    g = r / (n * value)
    # d l_hat / dA_hat = -l_hat / B_hat ; d l_hat / dB_hat = -l_hat log(l_hat) / B_hat
    grad = np.column_stack([-g * l_hat / P[:, 1], -g * l_hat * log_l / P[:, 1]])
    return value, grad


def cycle_life_loss(preds, C_list, true_lives, threshold: float = DEFAULT_THRESHOLD, cell_ids=None) -> LossValue:
    P = np.asarray(preds, dtype=float).reshape(-1, 2)
    C = np.asarray(C_list, dtype=float)
    L = np.asarray(true_lives, dtype=float)
    if not (len(P) == len(C) == len(L)):
        raise DataError("predictions, C values and lives must be aligned")
    value, _ = _cycle_life_loss_grad(P, C, L, threshold, cell_ids)
    return LossValue("cycle_life_loss", value)


# --- optimizer and training loop ----------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainingData:
    """Aligned per-cell training arrays (train split only)."""

    Z: np.ndarray  # (n, N) standardized features
    targets: np.ndarray  # (n, 2) fitted (A, B)
    C: np.ndarray
    lives: np.ndarray
    cell_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 2)
        self.C = np.asarray(self.C, dtype=float)
        self.lives = np.asarray(self.lives, dtype=float)
        n = len(self.Z)
        if not (len(self.targets) == len(self.C) == len(self.lives) == n):
            raise DataError("training arrays must be aligned")
        if not self.cell_ids:
            self.cell_ids = [str(i) for i in range(n)]


@dataclass(frozen=True)
class HistoryRow:
    stage: int
    epoch: int
    param_loss: float
    cycle_life_loss: float


def set_output_map(model: AttentionModel, targets: np.ndarray) -> AttentionModel:
    """Centre the raw outputs on the train-target statistics (see module docs of ``attention``)."""
    T = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(T) < 2:
        raise DataError("need at least 2 targets to set the output map")
    if np.any(T[:, 1] <= 0):
        raise DataError("fitted B must be positive")
    sd = T.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    model.out_shift = np.array([T[:, 0].mean(), softplus_inv(T[:, 1].mean())])
    model.out_scale = sd
    return model


def _losses_and_grads(model, data, config, stage):
    Y, cache = forward_batch(model, data.Z)
    a, b, db = output_params(model, Y)
    P = np.column_stack([a, b])
    p_val, p_grad = _param_loss_grad(P, data.targets, config.w_A, config.w_B)
    try:
        l_val, l_grad = _cycle_life_loss_grad(P, data.C, data.lives, config.threshold, data.cell_ids)
    except NumericalError:
        if stage == 2:
            raise
        l_val, l_grad = math.nan, None
    dP = p_grad if stage == 1 else l_grad
    dY = np.column_stack([dP[:, 0] * model.out_scale[0], dP[:, 1] * db])
    return p_val, l_val, backward_batch(model, cache, dY)


def train_two_stage(model: AttentionModel, data: TrainingData, config: TrainConfig):
    """Run both stages on a copy of ``model``; returns ``(trained_model, history)``.

    Full-batch Adam with fresh optimizer state per stage; the final-epoch
    weights are kept. Each stage contributes a row for epoch 0 (before any
    update) and one row per epoch holding the losses after that update.
    """
    model = model.copy()
    history: list[HistoryRow] = []
    for stage, epochs, lr in ((1, config.stage1_epochs, config.stage1_lr), (2, config.stage2_epochs, config.stage2_lr)):
        if epochs == 0:
            continue
        opt = Adam(model.weights(), lr, config.beta1, config.beta2, config.eps)
        for epoch in range(epochs + 1):
            try:
                p_val, l_val, grads = _losses_and_grads(model, data, config, stage)
            except NumericalError as exc:
                raise NumericalError(f"stage {stage}, epoch {epoch}: training diverged ({exc})") from None
            watched = p_val if stage == 1 else l_val
            if not math.isfinite(watched) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"stage {stage}, epoch {epoch}: non-finite loss or gradient (exploding gradients)")
            history.append(HistoryRow(stage, epoch, p_val, l_val))
            if epoch < epochs:
                opt.step(grads)
    return model, history


def write_history(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "stage", "param_loss", "cycle_life_loss"])
        for h in history:
            w.writerow([h.epoch, h.stage, repr(h.param_loss), repr(h.cycle_life_loss)])


def stage_history(history: Sequence[HistoryRow], stage: int) -> list[HistoryRow]:
    return [h for h in history if h.stage == stage]


# --- elastic-net baseline -------------------------------------------------------


@dataclass
class ElasticNetModel:
    """Linear map from standardized features to (A, B), one coordinate-descent fit per output."""

    coef: np.ndarray  # (2, k)
    intercept: np.ndarray  # (2,)
    alpha: float
    l1_ratio: float
    n_iter: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float).reshape(2, -1)
        self.intercept = np.asarray(self.intercept, dtype=float).reshape(2)
        if not (np.all(np.isfinite(self.coef)) and np.all(np.isfinite(self.intercept))):
            raise NumericalError("elastic net produced non-finite coefficients")

    def predict_params(self, Z) -> np.ndarray:
        """(A_hat, B_hat) per row; B_hat is floored at 1e-6 to keep the life formula defined."""
        P = np.atleast_2d(Z) @ self.coef.T + self.intercept
        P[:, 1] = np.maximum(P[:, 1], B_FLOOR)
        return P

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "intercept": self.intercept.tolist(),
                "alpha": self.alpha, "l1_ratio": self.l1_ratio, "n_iter": list(self.n_iter)}

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticNetModel":
        return cls(np.array(d["coef"]), np.array(d["intercept"]), float(d["alpha"]), float(d["l1_ratio"]),
                   tuple(d.get("n_iter", (0, 0))))


def _soft_threshold(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def coordinate_descent(X: np.ndarray, y: np.ndarray, alpha: float, l1_ratio: float,
                       tol: float = 1e-8, max_sweeps: int = 10_000) -> tuple[np.ndarray, int]:
    """Minimize ``(1/2n)||y - X b||^2 + alpha (rho ||b||_1 + (1 - rho)/2 ||b||^2)``; X, y centred."""
    n, k = X.shape
    beta = np.zeros(k)
    r = y.astype(float).copy()
    col_sq = (X**2).sum(axis=0) / n
    l1 = alpha * l1_ratio
    l2 = alpha * (1.0 - l1_ratio)
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(k):
            denom = col_sq[j] + l2
            if denom == 0:
                continue
            old = beta[j]
            rho_j = X[:, j] @ r / n + col_sq[j] * old
            new = _soft_threshold(rho_j, l1) / denom
            if new != old:
                r -= X[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            return beta, sweep
    raise NumericalError(f"elastic net did not converge in {max_sweeps} sweeps (alpha={alpha}, l1_ratio={l1_ratio})")


def fit_elastic_net(X, targets, alpha: float, l1_ratio: float, tol: float = 1e-8, max_sweeps: int = 10_000) -> ElasticNetModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(targets, dtype=float).reshape(-1, 2)
    if alpha < 0:
        raise DataError("alpha must be non-negative")
    if not (0 <= l1_ratio <= 1):
        raise DataError("l1_ratio must lie in [0, 1]")
    if len(X) != len(T) or len(X) == 0:
        raise DataError("features and targets must be aligned and non-empty")
    x_mean = X.mean(axis=0)
    Xc = X - x_mean
    coef, intercept, iters = [], [], []
    for k in range(2):
        y_mean = T[:, k].mean()
        b, it = coordinate_descent(Xc, T[:, k] - y_mean, alpha, l1_ratio, tol, max_sweeps)
        coef.append(b)
        intercept.append(y_mean - x_mean @ b)
        iters.append(it)
    return ElasticNetModel(np.array(coef), np.array(intercept), alpha, l1_ratio, tuple(iters))


DEFAULT_ALPHA_GRID = tuple(np.logspace(0, 1, 5))
DEFAULT_L1_GRID = tuple(np.logspace(-5, 0, 6))


def clamp_l1_grid(values: Sequence[float]) -> list[float]:
    out = []
    for v in values:
        if v > 1:
            logger.warning("l1_ratio %g > 1 is undefined for elastic net; clamped to 1", v)
            v = 1.0
        if v < 0:
            raise DataError(f"l1_ratio {v} must be non-negative")
        if v not in out:
            out.append(float(v))
    return out


@dataclass(frozen=True)
class GridPoint:
    alpha: float
    l1_ratio: float
    rmse_select: float


def grid_search_elastic_net(
    X_train, T_train, X_sel, C_sel, lives_sel,
    alphas: Sequence[float] = DEFAULT_ALPHA_GRID,
    l1_ratios: Sequence[float] = DEFAULT_L1_GRID,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[ElasticNetModel, list[GridPoint]]:
    """Fit every (alpha, l1_ratio) pair on train; keep the lowest cycle-life RMSE on the selection rows."""
    best, best_rmse, grid = None, math.inf, []
    for alpha in alphas:
        for rho in clamp_l1_grid(l1_ratios):
            model = fit_elastic_net(X_train, T_train, float(alpha), rho)
            lives = predict_lives(model.predict_params(X_sel), C_sel, threshold)
            rmse = rmse_cycles(lives, lives_sel)
            grid.append(GridPoint(float(alpha), rho, rmse))
            if rmse < best_rmse or best is None:
                best, best_rmse = model, rmse
    return best, grid


# --- evaluation -----------------------------------------------------------------


class ParamPredictor(Protocol):
    def predict_params(self, Z) -> np.ndarray: ...


def predict_lives(P: np.ndarray, C: np.ndarray, threshold: float) -> np.ndarray:
    """Cycle lives for predicted (A_hat, B_hat); ``inf`` where the formula overflows or is undefined."""
    P = np.atleast_2d(P)
    C = np.asarray(C, dtype=float)
    out = np.full(len(P), math.inf)
    ok = (P[:, 1] > 0) & (C < threshold)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_l = (np.log(threshold - C[ok]) - P[ok, 0]) / P[ok, 1]
        out[ok] = np.where(log_l < _LOG_LIFE_MAX, np.exp(np.minimum(log_l, _LOG_LIFE_MAX)), math.inf)
    return out


def rmse_cycles(pred, true) -> float:
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if len(pred) == 0:
        return math.nan
    with np.errstate(over="ignore", invalid="ignore"):
        return float(math.sqrt(np.mean((pred - true) ** 2)))


def r_squared(pred, true) -> float:
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    with np.errstate(over="ignore", invalid="ignore"):
        ss_res = float(np.sum((true - pred) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan


@dataclass(frozen=True)
class CellPrediction:
    cell_id: str
    split: str
    A_hat: float
    B_hat: float
    C: float
    life_pred: float
    life_true: float | None = None
    A_fit: float | None = None
    B_fit: float | None = None


@dataclass(frozen=True)
class SplitMetrics:
    n: int
    rmse_cycles: float
    rmse_params: float | None
    r_squared: float


@dataclass
class EvalReport:
    model: str
    threshold: float
    splits: dict[str, SplitMetrics]
    cells: list[CellPrediction]
    notices: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "threshold": self.threshold,
            "splits": {k: asdict(v) for k, v in self.splits.items()},
            "cells": [asdict(c) for c in self.cells],
            "notices": list(self.notices),
        }


def evaluate(
    predictor: ParamPredictor,
    Z: np.ndarray,
    cell_ids: Sequence[str],
    splits: Sequence[str],
    C: Sequence[float],
    true_lives: Sequence[float | None],
    threshold: float = DEFAULT_THRESHOLD,
    fitted: Sequence[tuple[float, float] | None] | None = None,
    name: str = "model",
) -> EvalReport:
    """Per-split cycle-life and parameter RMSE at ``threshold`` for any (A_hat, B_hat) predictor.

    Predictions are made row by row so that a single-cell call reproduces
    the same numbers bit for bit.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    C = np.asarray(C, dtype=float)
    fitted = fitted if fitted is not None else [None] * len(cell_ids)
    cells = []
    for i, cid in enumerate(cell_ids):
        P = predictor.predict_params(Z[i : i + 1])
        life = float(predict_lives(P, C[i : i + 1], threshold)[0])
        fit = fitted[i]
        cells.append(CellPrediction(
            cid, splits[i], float(P[0, 0]), float(P[0, 1]), float(C[i]), life,
            None if true_lives[i] is None else float(true_lives[i]),
            None if fit is None else float(fit[0]),
            None if fit is None else float(fit[1]),
        ))

    report = EvalReport(name, threshold, {}, cells)
    for split in SPLITS:
        rows = [c for c in cells if c.split == split and c.life_true is not None]
        if not rows:
            report.notices.append(f"split {split} absent; omitted")
            continue
        pred = np.array([c.life_pred for c in rows])
        true = np.array([c.life_true for c in rows])
        with_fit = [c for c in rows if c.A_fit is not None]
        rmse_p = None
        if with_fit:
            rmse_p = param_loss([(c.A_hat, c.B_hat) for c in with_fit], [(c.A_fit, c.B_fit) for c in with_fit]).value
        report.splits[split] = SplitMetrics(len(rows), rmse_cycles(pred, true), rmse_p, r_squared(pred, true))
    return report
