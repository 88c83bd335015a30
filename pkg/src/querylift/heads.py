"""Trainable query-embedding transformations: linear and 2-hidden-layer FFN.

Both heads initialize weight matrices to the identity and biases to zero,
so an untrained linear head reproduces base-model rankings exactly. The FFN
applies GELU after its first two layers and nothing after the third; at
identity init its output is therefore gelu(gelu(x)), not x.

Parameters are float32 (matching the checkpoint format bit for bit);
forward and backward upcast to float64 for all products. GELU is the exact
erf form t * Phi(t), so gradient checks have a single unambiguous target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ContractError, FormatError, StorageError

_MAGIC = b"HEAD"
_KIND_BYTES = {"linear": 1, "ffn": 2}
_KIND_NAMES = {v: k for k, v in _KIND_BYTES.items()}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(t: np.ndarray) -> np.ndarray:
    """Exact GELU: t * Phi(t) with the Gaussian CDF in erf form."""
    t = np.asarray(t, dtype=np.float64)
    return t * 0.5 * (1.0 + erf(t * _INV_SQRT2))


def gelu_grad(t: np.ndarray) -> np.ndarray:
    """d/dt gelu(t) = Phi(t) + t * phi(t)."""
    t = np.asarray(t, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(t * _INV_SQRT2))
    pdf = np.exp(-0.5 * t * t) * _INV_SQRT_2PI
    return cdf + t * pdf


@dataclass
class HeadGradients:
    params: dict[str, np.ndarray]  # same keys and shapes as the head's params
    d_input: np.ndarray  # (n, dim)


def _check_batch(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractError(f"expected batch of width {dim}, got shape {x.shape}")
    return x


class LinearHead:
    kind = "linear"

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.W = np.eye(dim, dtype=np.float32)
        self.b = np.zeros(dim, dtype=np.float32)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_batch(x, self.dim)
        return x @ self.W.astype(np.float64).T + self.b.astype(np.float64)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> HeadGradients:
        x = _check_batch(x, self.dim)
        g = _check_batch(grad_out, self.dim)
        if g.shape[0] != x.shape[0]:
            raise ContractError(f"batch mismatch: x {x.shape} vs grad {g.shape}")
        w64 = self.W.astype(np.float64)
        return HeadGradients(
            params={"W": g.T @ x, "b": g.sum(axis=0)},
            d_input=g @ w64,
        )

    def describe(self) -> str:
        return f"linear(dim={self.dim})"


class FfnHead:
    """W3 . gelu(W2 . gelu(W1 x + b1) + b2) + b3, hidden width == dim."""

    kind = "ffn"

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.W1 = np.eye(dim, dtype=np.float32)
        self.b1 = np.zeros(dim, dtype=np.float32)
        self.W2 = np.eye(dim, dtype=np.float32)
        self.b2 = np.zeros(dim, dtype=np.float32)
        self.W3 = np.eye(dim, dtype=np.float32)
        self.b3 = np.zeros(dim, dtype=np.float32)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {
            "W1": self.W1, "b1": self.b1,
            "W2": self.W2, "b2": self.b2,
            "W3": self.W3, "b3": self.b3,
        }

    def _stages(self, x: np.ndarray):
        z1 = x @ self.W1.astype(np.float64).T + self.b1.astype(np.float64)
        h1 = gelu(z1)
        z2 = h1 @ self.W2.astype(np.float64).T + self.b2.astype(np.float64)
        h2 = gelu(z2)
        y = h2 @ self.W3.astype(np.float64).T + self.b3.astype(np.float64)
        return z1, h1, z2, h2, y

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_batch(x, self.dim)
        return self._stages(x)[-1]

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> HeadGradients:
        x = _check_batch(x, self.dim)
        g3 = _check_batch(grad_out, self.dim)
        if g3.shape[0] != x.shape[0]:
            raise ContractError(f"batch mismatch: x {x.shape} vs grad {g3.shape}")
        z1, h1, z2, h2, _ = self._stages(x)
        g_h2 = g3 @ self.W3.astype(np.float64)
        g2 = g_h2 * gelu_grad(z2)
        g_h1 = g2 @ self.W2.astype(np.float64)
        g1 = g_h1 * gelu_grad(z1)
        return HeadGradients(
            params={
                "W1": g1.T @ x, "b1": g1.sum(axis=0),
                "W2": g2.T @ h1, "b2": g2.sum(axis=0),
                "W3": g3.T @ h2, "b3": g3.sum(axis=0),
            },
            d_input=g1 @ self.W1.astype(np.float64),
        )

    def describe(self) -> str:
        return f"ffn(dim={self.dim})"


Head = LinearHead | FfnHead


def new_head(kind: str, dim: int) -> Head:
    if kind == "linear":
        return LinearHead(dim)
    if kind == "ffn":
        return FfnHead(dim)
    raise ContractError(f"unknown head kind {kind!r}")


def clone_head(head: Head) -> Head:
    out = new_head(head.kind, head.dim)
    for name, arr in head.param_arrays().items():
        out.param_arrays()[name][...] = arr
    return out


def save_head(head: Head, path: str | Path) -> None:
    """HEAD magic, kind byte, u32 dim, then params as float32 LE in order."""
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(bytes([_KIND_BYTES[head.kind]]))
            f.write(np.array(head.dim, dtype="<u4").tobytes())
            for arr in head.param_arrays().values():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as e:
        raise StorageError(f"cannot write head to {path}: {e}") from e


def load_head(path: str | Path) -> Head:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read head from {path}: {e}") from e
    if len(blob) < 9 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a head checkpoint")
    kind_byte = blob[4]
    if kind_byte not in _KIND_NAMES:
        raise FormatError(f"{path}: unknown head kind byte {kind_byte}")
    dim = int(np.frombuffer(blob, dtype="<u4", count=1, offset=5)[0])
    head = new_head(_KIND_NAMES[kind_byte], dim)
    payload = blob[9:]
    expected = sum(arr.size for arr in head.param_arrays().values()) * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} != expected {expected}"
        )
    offset = 0
    for arr in head.param_arrays().values():
        flat = np.frombuffer(payload, dtype="<f4", count=arr.size, offset=offset)
        arr[...] = flat.reshape(arr.shape)
        offset += arr.size * 4
    return head
