"""Radial-basis-function interpolation of discharge-voltage curves.

The interpolant is ``p_m(V) + sum_i w_i * phi(|V - V_i|)`` where ``p_m`` is a
degree-``m`` polynomial trend. Weights and polynomial coefficients come from
the usual augmented system::

    [ Phi  P ] [w]   [q]
    [ P^T  0 ] [c] = [0]

whose second block row enforces ``sum_i w_i V_i**k = 0`` for ``k <= m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import V_MAX, V_MIN, DischargeCurve
from .errors import DataError, NumericalError

KERNELS = ("cubic", "thin_plate", "linear")
# smallest polynomial degree making each kernel conditionally positive definite
_MIN_DEGREE = {"cubic": 1, "thin_plate": 1, "linear": 0}


def kernel_fn(kernel: str, r: np.ndarray) -> np.ndarray:
    if kernel == "cubic":
        return r**3
    if kernel == "linear":
        return r
    if kernel == "thin_plate":
        out = np.zeros_like(r)
        nz = r > 0
        out[nz] = r[nz] ** 2 * np.log(r[nz])
        return out
    raise DataError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


@dataclass(frozen=True, eq=False)
class RBFInterpolant:
    nodes: np.ndarray
    weights: np.ndarray
    poly_coeffs: np.ndarray  # c_0 ... c_m, lowest power first
    kernel: str = "cubic"

    @property
    def degree(self) -> int:
        return len(self.poly_coeffs) - 1

    def __call__(self, v) -> np.ndarray:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        phi = kernel_fn(self.kernel, np.abs(v[:, None] - self.nodes[None, :]))
        return phi @ self.weights + np.polynomial.polynomial.polyval(v, self.poly_coeffs)


@dataclass(frozen=True)
class VoltageGrid:
    v_min: float = V_MIN
    v_max: float = V_MAX
    n_points: int = 1000

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise DataError("voltage grid needs v_min < v_max")
        if self.n_points < 2:
            raise DataError("voltage grid needs at least 2 points")

    def voltages(self) -> np.ndarray:
        """Grid voltages in descending order (discharge direction)."""
        return np.linspace(self.v_max, self.v_min, self.n_points)


def _collapse_duplicates(v: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((q, v))
    v, q = v[order], q[order]
    nodes, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    if len(nodes) == len(v):
        return v, q
    sums = np.zeros(len(nodes))
    np.add.at(sums, inverse, q)
    return nodes, sums / counts


def fit_rbf(curve: DischargeCurve, kernel: str = "cubic", degree: int = 1) -> RBFInterpolant:
    """Fit the interpolant through every (voltage, capacity) node of ``curve``."""
    return fit_rbf_points(curve.voltage, curve.capacity, kernel, degree)


def fit_rbf_points(v, q, kernel: str = "cubic", degree: int = 1) -> RBFInterpolant:
    if kernel not in KERNELS:
        raise DataError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    if degree < _MIN_DEGREE[kernel]:
        raise DataError(f"kernel {kernel!r} needs polynomial degree >= {_MIN_DEGREE[kernel]}")
    nodes, values = _collapse_duplicates(np.asarray(v, dtype=float), np.asarray(q, dtype=float))
    n, m1 = len(nodes), degree + 1
    if n < degree + 2:
        raise DataError(f"RBF fit with degree {degree} needs at least {degree + 2} distinct nodes, got {n}")

    phi = kernel_fn(kernel, np.abs(nodes[:, None] - nodes[None, :]))
    P = np.vander(nodes, m1, increasing=True)
    lhs = np.zeros((n + m1, n + m1))
    lhs[:n, :n] = phi
    lhs[:n, n:] = P
    lhs[n:, :n] = P.T
    rhs = np.concatenate([values, np.zeros(m1)])

    try:
        sol = np.linalg.solve(lhs, rhs)
        resid = np.abs(lhs @ sol - rhs)
        # one step of iterative refinement, kept only if it helps
        refined = sol + np.linalg.solve(lhs, rhs - lhs @ sol)
        resid_refined = np.abs(lhs @ refined - rhs)
        if resid_refined.max() < resid.max():
            sol, resid = refined, resid_refined
        ok = bool(np.all(np.isfinite(sol)))
    except np.linalg.LinAlgError:
        ok = False
    if ok:
        ok = bool(np.all(resid[:n] < 1e-8 * np.maximum(1.0, np.abs(values))))
    if not ok:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(lhs)
        raise NumericalError(
            f"singular or ill-conditioned RBF system: cond={cond:.3e}, {n} nodes on "
            f"[{nodes[0]:.4g}, {nodes[-1]:.4g}] V, kernel {kernel}, degree {degree}"
        )
    return RBFInterpolant(nodes, sol[:n], sol[n:], kernel)


def resample(interp: RBFInterpolant, grid: VoltageGrid) -> np.ndarray:
    """Evaluate ``interp`` on ``grid``, from ``v_max`` down to ``v_min``."""
    return interp(grid.voltages())
