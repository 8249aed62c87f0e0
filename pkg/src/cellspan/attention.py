"""Single-head self-attention regressor with hand-written gradients.

Each of the ``N`` input features is a length-1 token. For one input ``z``::

    Q = z W_Q^T    K = z W_K^T    V = z W_V^T        (N x D, N x D, N x D_v)
    A = softmax_rows(Q K^T / sqrt(D))
    H = A V
    y = H^T m,  m = (1/N, ..., 1/N)

``y`` is the raw output. :func:`output_params` maps it to the curve
parameters: ``A_hat = shift_A + scale_A * y[0]`` and
``B_hat = softplus(shift_B + scale_B * y[1])``, which keeps ``B_hat > 0``.
With the default shift 0 / scale 1 the mapping is the identity on ``A_hat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .physics import PhysicsParams, cycle_life


@dataclass
class AttentionModel:
    W_Q: np.ndarray  # (D, 1)
    W_K: np.ndarray  # (D, 1)
    W_V: np.ndarray  # (D_v, 1)
    n_features: int
    rng_seed: int = 0
    out_shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    out_scale: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        for name in ("W_Q", "W_K", "W_V", "out_shift", "out_scale"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite entries in {name}")
            setattr(self, name, arr)
        self.W_Q = self.W_Q.reshape(-1, 1)
        self.W_K = self.W_K.reshape(-1, 1)
        self.W_V = self.W_V.reshape(-1, 1)
        if self.W_Q.shape != self.W_K.shape:
            raise DataError("W_Q and W_K must have the same embedding dimension")
        if self.W_V.shape[0] != 2 or self.out_shift.shape != (2,) or self.out_scale.shape != (2,):
            raise DataError("value dimension must be 2 (outputs A_hat, B_hat)")

    @property
    def D(self) -> int:
        return self.W_Q.shape[0]

    @property
    def D_v(self) -> int:
        return self.W_V.shape[0]

    def weights(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}

    def predict_params(self, Z) -> np.ndarray:
        return predict_params(self, Z)

    def copy(self) -> "AttentionModel":
        return AttentionModel(self.W_Q.copy(), self.W_K.copy(), self.W_V.copy(), self.n_features,
                              self.rng_seed, self.out_shift.copy(), self.out_scale.copy())

    def to_dict(self) -> dict:
        return {
            "N": self.n_features,
            "D": self.D,
            "D_v": self.D_v,
            "rng_seed": self.rng_seed,
            "W_Q": self.W_Q.ravel().tolist(),
            "W_K": self.W_K.ravel().tolist(),
            "W_V": self.W_V.ravel().tolist(),
            "out_shift": self.out_shift.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionModel":
        D, Dv = int(d["D"]), int(d["D_v"])
        return cls(
            np.reshape(d["W_Q"], (D, 1)),
            np.reshape(d["W_K"], (D, 1)),
            np.reshape(d["W_V"], (Dv, 1)),
            int(d["N"]),
            int(d.get("rng_seed", 0)),
            np.array(d.get("out_shift", [0.0, 0.0])),
            np.array(d.get("out_scale", [1.0, 1.0])),
        )


@dataclass(frozen=True)
class ForwardTrace:
    z: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    A: np.ndarray
    H: np.ndarray


def init_model(n_features: int = 5, embed_dim: int = 8, value_dim: int = 2, rng_seed: int = 0) -> AttentionModel:
    """Weights i.i.d. uniform on ``[-1/sqrt(D), 1/sqrt(D)]``."""
    if n_features < 1 or embed_dim < 1 or value_dim < 1:
        raise DataError("model dimensions must be positive")
    rng = np.random.default_rng(rng_seed)
    b = 1.0 / math.sqrt(embed_dim)
    return AttentionModel(
        W_Q=rng.uniform(-b, b, (embed_dim, 1)),
        W_K=rng.uniform(-b, b, (embed_dim, 1)),
        W_V=rng.uniform(-b, b, (value_dim, 1)),
        n_features=n_features,
        rng_seed=rng_seed,
    )


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    E = np.exp(S - S.max(axis=-1, keepdims=True))
    return E / E.sum(axis=-1, keepdims=True)


def _check(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in attention layer {name}")


def forward(model: AttentionModel, z) -> tuple[np.ndarray, ForwardTrace]:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != model.n_features:
        raise DataError(f"expected {model.n_features} features, got {z.shape[0]}")
    _check("input", z)
    zc = z[:, None]
    Q = zc @ model.W_Q.T
    K = zc @ model.W_K.T
    V = zc @ model.W_V.T
    with np.errstate(over="ignore", invalid="ignore"):
        S = Q @ K.T / math.sqrt(model.D)
    _check("scores", S)
    A = _softmax_rows(S)
    H = A @ V
    m = np.full(len(z), 1.0 / len(z))
    y = H.T @ m
    _check("output", y)
    return y, ForwardTrace(z, Q, K, V, A, H)


def backward(model: AttentionModel, trace: ForwardTrace, loss_grad_y) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the weights given ``dL/dy``."""
    g = np.asarray(loss_grad_y, dtype=float).reshape(-1)
    if g.shape[0] != model.D_v or trace.V.shape[1] != model.D_v or trace.Q.shape[1] != model.D:
        raise DataError("trace / gradient shape does not match the model")
    N = len(trace.z)
    zc = trace.z[:, None]
    dH = np.outer(np.full(N, 1.0 / N), g)  # y = H^T m
    dA = dH @ trace.V.T
    dV = trace.A.T @ dH
    dS = trace.A * (dA - np.sum(dA * trace.A, axis=1, keepdims=True))
    dQ = dS @ trace.K / math.sqrt(model.D)
    dK = dS.T @ trace.Q / math.sqrt(model.D)
    return {"W_Q": dQ.T @ zc, "W_K": dK.T @ zc, "W_V": dV.T @ zc}


# --- batched versions used by training ----------------------------------------


def forward_batch(model: AttentionModel, Z: np.ndarray) -> tuple[np.ndarray, dict]:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != model.n_features:
        raise DataError(f"expected an (n, {model.n_features}) input matrix, got shape {Z.shape}")
    Q = Z[:, :, None] * model.W_Q[:, 0]
    K = Z[:, :, None] * model.W_K[:, 0]
    V = Z[:, :, None] * model.W_V[:, 0]
    with np.errstate(over="ignore", invalid="ignore"):
        S = np.einsum("bid,bjd->bij", Q, K) / math.sqrt(model.D)
    _check("scores", S)
    A = _softmax_rows(S)
    H = A @ V
    Y = H.mean(axis=1)
    _check("output", Y)
    return Y, {"Z": Z, "Q": Q, "K": K, "V": V, "A": A}


def backward_batch(model: AttentionModel, cache: dict, dY: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients summed over the batch."""
    Z, Q, K, V, A = (cache[k] for k in ("Z", "Q", "K", "V", "A"))
    N = Z.shape[1]
    dH = np.broadcast_to(dY[:, None, :] / N, V.shape)
    dA = dH @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dH
    dS = A * (dA - np.sum(dA * A, axis=2, keepdims=True))
    rs = math.sqrt(model.D)
    dQ = dS @ K / rs
    dK = dS.transpose(0, 2, 1) @ Q / rs
    return {
        "W_Q": np.einsum("bid,bi->d", dQ, Z)[:, None],
        "W_K": np.einsum("bid,bi->d", dK, Z)[:, None],
        "W_V": np.einsum("bik,bi->k", dV, Z)[:, None],
    }


# --- output mapping and cycle-life prediction ---------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    if y <= 0:
        raise DataError("softplus inverse needs a positive value")
    return y + math.log(-math.expm1(-y))


def output_params(model: AttentionModel, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map raw outputs to (A_hat, B_hat); also returns dB_hat/dy[1]."""
    Y = np.atleast_2d(Y)
    a = model.out_shift[0] + model.out_scale[0] * Y[:, 0]
    pre = model.out_shift[1] + model.out_scale[1] * Y[:, 1]
    b = softplus(pre)
    db = model.out_scale[1] / (1.0 + np.exp(-pre))
    return a, b, db


def predict_params(model: AttentionModel, Z: np.ndarray) -> np.ndarray:
    """``(n, 2)`` array of predicted (A_hat, B_hat) for standardized inputs."""
    Y, _ = forward_batch(model, np.atleast_2d(Z))
    a, b, _ = output_params(model, Y)
    return np.column_stack([a, b])


def predict_cycle_life(model: AttentionModel, z, C: float, threshold: float = 0.2) -> float:
    y, _ = forward(model, z)
    a, b, _ = output_params(model, y)
    if not b[0] > 0:
        raise NumericalError(f"predicted B_hat={b[0]} is not positive")
    return cycle_life(PhysicsParams(float(a[0]), float(b[0]), C), threshold)
