"""Projected modern continuous Hopfield retrieval layer.

Vectors are rows. For a batch ``Z`` (N x C_l) of encoder features::

    Q      = Z @ W_q                 (N x C_s)
    K      = M @ W_k                 (M_N x C_s)
    A      = softmax(tau * Q @ K.T)  (N x M_N), row-wise
    V      = M @ W_v                 (M_N x C_l)
    Z_hat  = A @ V                   (N x C_l)

``W_v`` is C_l x C_l so the retrieved feature has the width the classifier
expects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blob
from .errors import InvalidInputError, ParameterError

PARAM_NAMES = ("M", "W_q", "W_k", "W_v")
FROZEN_NAMES = ("M", "W_k", "W_v")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class HopfieldMemory:
    M: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    tau: float = 1.0
    frozen: bool = False

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m_n, c_l = self.M.shape
        if m_n < 1:
            raise ParameterError("memory needs at least one stored pattern")
        c_s = self.W_q.shape[1]
        if self.W_q.shape != (c_l, c_s) or self.W_k.shape != (c_l, c_s):
            raise ParameterError(
                f"W_q/W_k must be {c_l}x{c_s}, got {self.W_q.shape} and {self.W_k.shape}")
        if self.W_v.shape != (c_l, c_l):
            raise ParameterError(f"W_v must be {c_l}x{c_l}, got {self.W_v.shape}")
        if c_s > c_l:
            raise ParameterError(f"projection width {c_s} exceeds feature width {c_l}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")

    @classmethod
    def init(cls, memory_size: int = 64, feature_dim: int = 64, proj_dim: int = 32,
             tau: float = 1.0, rng: Optional[np.random.Generator] = None) -> "HopfieldMemory":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            M=uniform_init(rng, feature_dim, (memory_size, feature_dim)),
            W_q=uniform_init(rng, feature_dim, (feature_dim, proj_dim)),
            W_k=uniform_init(rng, feature_dim, (feature_dim, proj_dim)),
            W_v=uniform_init(rng, feature_dim, (feature_dim, feature_dim)),
            tau=tau,
        )

    @property
    def memory_size(self) -> int:
        return self.M.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.M.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.W_q.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def trainable(self) -> tuple[str, ...]:
        return ("W_q",) if self.frozen else PARAM_NAMES

    def copy(self) -> "HopfieldMemory":
        return HopfieldMemory(*(getattr(self, n).copy() for n in PARAM_NAMES),
                              tau=self.tau, frozen=self.frozen)

    def to_bytes(self) -> bytes:
        header = {"M_N": self.memory_size, "C_l": self.feature_dim, "C_s": self.proj_dim,
                  "tau": self.tau, "frozen": self.frozen}
        return blob.pack(header, ((n, getattr(self, n)) for n in PARAM_NAMES),
                         shapes_in_header=False)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HopfieldMemory":
        header, _ = blob.unpack_header(data)
        m_n, c_l, c_s = header["M_N"], header["C_l"], header["C_s"]
        shapes = [("M", (m_n, c_l)), ("W_q", (c_l, c_s)), ("W_k", (c_l, c_s)), ("W_v", (c_l, c_l))]
        _, arrays = blob.unpack(data, shapes)
        return cls(**arrays, tau=float(header["tau"]), frozen=bool(header["frozen"]))


def freeze(memory: HopfieldMemory) -> HopfieldMemory:
    """Mark M, W_k and W_v as fixed; W_q stays trainable. Idempotent."""
    memory.frozen = True
    return memory


def _check_z(memory: HopfieldMemory, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != memory.feature_dim:
        raise InvalidInputError(f"feature width {z.shape[-1]} != memory width {memory.feature_dim}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("features must be finite")
    return z


def similarity(memory: HopfieldMemory, z: np.ndarray) -> np.ndarray:
    """Softmax attention of each query over the stored patterns.

    ``z`` may be a single vector or an N x C_l batch.
    """
    z = _check_z(memory, z)
    keys = memory.M @ memory.W_k
    return softmax(memory.tau * (z @ memory.W_q) @ keys.T)


def retrieve(memory: HopfieldMemory, z: np.ndarray) -> np.ndarray:
    sim = similarity(memory, z)
    return sim @ (memory.M @ memory.W_v)


def forward(memory: HopfieldMemory, Z: np.ndarray):
    """Batched retrieval that also returns the cache for :func:`backward`."""
    Z = _check_z(memory, Z)
    Q = Z @ memory.W_q
    K = memory.M @ memory.W_k
    A = softmax(memory.tau * Q @ K.T)
    V = memory.M @ memory.W_v
    return A @ V, (Z, Q, K, A, V)


def backward(memory: HopfieldMemory, cache, dZ_hat: np.ndarray):
    """Gradients of a scalar loss w.r.t. the input batch and each parameter.

    Frozen parameters get exact zero gradients.
    """
    Z, Q, K, A, V = cache
    dA = dZ_hat @ V.T
    dV = A.T @ dZ_hat
    dlogits = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
    dQ = memory.tau * dlogits @ K
    dK = memory.tau * dlogits.T @ Q
    grads = {
        "W_q": Z.T @ dQ,
        "W_k": memory.M.T @ dK,
        "W_v": memory.M.T @ dV,
        "M": dK @ memory.W_k.T + dV @ memory.W_v.T,
    }
    if memory.frozen:
        for name in FROZEN_NAMES:
            grads[name] = np.zeros_like(grads[name])
    return dQ @ memory.W_q.T, grads


def hopfield_backward(memory: HopfieldMemory, z: np.ndarray, upstream: np.ndarray):
    """Recompute the forward pass for ``z`` and backpropagate ``upstream``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None] if single else z
    _, cache = forward(memory, Z)
    dZ, grads = backward(memory, cache, np.asarray(upstream, dtype=np.float64).reshape(Z.shape))
    return (dZ[0] if single else dZ), grads


def mchn_iterate(memory: HopfieldMemory, q: np.ndarray, max_iters: int = 10, tol: float = 1e-6):
    """Classic unprojected update ``z <- M.T softmax(tau * M z)`` until it settles.

    Returns the final state and the number of updates it took to reach a
    state that the next update moves by less than ``tol`` (at least 1). If
    ``max_iters`` updates run without settling, returns ``max_iters``.
    """
    if max_iters < 1:
        raise ParameterError("max_iters must be >= 1")
    if not tol > 0:
        raise ParameterError("tol must be positive")
    z = _check_z(memory, q)
    M = memory.M
    for it in range(1, max_iters + 1):
        nxt = softmax(memory.tau * (M @ z)) @ M
        if np.max(np.abs(nxt - z)) < tol:
            return nxt, max(1, it - 1)
        z = nxt
    return z, max_iters


def energy(memory: HopfieldMemory, q: np.ndarray) -> float:
    """Diagnostic energy ``0.5 q.q - logsumexp(tau M q) / tau`` of the unprojected net."""
    q = _check_z(memory, q)
    logits = memory.tau * (memory.M @ q)
    top = np.max(logits)
    lse = top + np.log(np.sum(np.exp(logits - top)))
    return float(0.5 * q @ q - lse / memory.tau)
