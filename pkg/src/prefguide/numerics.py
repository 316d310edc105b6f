"""Fixed 3-layer MLP epsilon-predictor with hand-written reverse mode, Adam, and a
finite-difference gradient oracle.

The network is

    inp = [x, emb(t)]
    h1  = tanh(W1 inp + b1)
    h2  = tanh(W2 h1 + b2)
    out = W3 h2 + b3

All arithmetic is float64.  Batched inputs have shape (n, data_dim); a single
point of shape (data_dim,) is also accepted and returned unbatched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

ARRAY_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
MAGIC = b"PGD1"


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def time_embedding(t, schedule_len: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t/T at geometrically spaced frequencies.

    Returns an array of shape (n, dim) for t of shape (n,).
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / float(schedule_len)
    if dim == 0:
        return np.zeros((s.shape[0], 0))
    freqs = np.pi * 2.0 ** np.linspace(0.0, 6.0, dim // 2)
    ang = s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(eq=False)
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        for name in ARRAY_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, d_in = self.W1.shape
        d_out = self.W3.shape[0]
        expected = {
            "b1": (h,),
            "W2": (h, h),
            "b2": (h,),
            "W3": (d_out, h),
            "b3": (d_out,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if d_in < d_out or (d_in - d_out) % 2:
            raise ValueError(f"input width {d_in} incompatible with data dim {d_out}")

    # architecture -------------------------------------------------------
    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def data_dim(self) -> int:
        return self.W3.shape[0]

    @property
    def emb_dim(self) -> int:
        return self.W1.shape[1] - self.data_dim

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self.arrays())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def arch(self) -> dict:
        return {"data_dim": self.data_dim, "emb_dim": self.emb_dim, "hidden": self.hidden}

    # vector space -------------------------------------------------------
    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in ARRAY_NAMES]

    def _check(self, other: "ModelParams"):
        if not isinstance(other, ModelParams) or other.shapes != self.shapes:
            raise ValueError("ModelParams shape mismatch")

    def _map2(self, other, fn) -> "ModelParams":
        self._check(other)
        return ModelParams(*(fn(a, b) for a, b in zip(self.arrays(), other.arrays())))

    def __add__(self, other):
        return self._map2(other, np.add)

    def __sub__(self, other):
        return self._map2(other, np.subtract)

    def __mul__(self, c):
        return self.scale(c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, c: float) -> "ModelParams":
        c = float(c)
        return ModelParams(*(c * a for a in self.arrays()))

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def identical(self, other: "ModelParams") -> bool:
        """Bitwise equality of every entry."""
        return other.shapes == self.shapes and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}")
        out, i = [], 0
        for a in self.arrays():
            out.append(flat[i : i + a.size].reshape(a.shape).copy())
            i += a.size
        return ModelParams(*out)

    # serialization ------------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(ARRAY_NAMES))]
        for a in self.arrays():
            parts.append(struct.pack("<I", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        for a in self.arrays():
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if data[:4] != MAGIC:
            raise ValueError("not a PGD1 checkpoint (bad magic bytes)")
        off = 4
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        if count != len(ARRAY_NAMES):
            raise ValueError(f"expected {len(ARRAY_NAMES)} arrays, header says {count}")
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shapes.append(struct.unpack_from(f"<{ndim}I", data, off))
            off += 4 * ndim
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            if off + 8 * n > len(data):
                raise ValueError("truncated checkpoint")
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
            off += 8 * n
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(*arrays)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def init_params(seed: int | np.random.Generator = 0, data_dim: int = 2, emb_dim: int = 32, hidden: int = 128) -> ModelParams:
    """Per-layer uniform init in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)

    def layer(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    W1, b1 = layer(hidden, data_dim + emb_dim)
    W2, b2 = layer(hidden, hidden)
    W3, b3 = layer(data_dim, hidden)
    return ModelParams(W1, b1, W2, b2, W3, b3)


def save_params(path, params: ModelParams, provenance: dict | None = None) -> str:
    """Write the binary checkpoint plus a ``<path>.json`` sidecar. Returns the checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = params.to_bytes()
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    sidecar = {"format": "PGD1", "arch": params.arch(), "sha256": digest}
    if provenance:
        sidecar["provenance"] = provenance
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return digest


def load_params(path) -> ModelParams:
    return ModelParams.from_bytes(Path(path).read_bytes())


# forward / backward -------------------------------------------------------

def _batch_inputs(params: ModelParams, x, t, schedule_len: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(-1, params.data_dim)
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(X.shape[0], int(t))
    if t.shape != (X.shape[0],):
        raise ValueError(f"t has shape {t.shape}, expected ({X.shape[0]},)")
    if t.size and (t.min() < 1 or t.max() > schedule_len):
        raise ValueError(f"step index out of range [1, {schedule_len}]")
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise NumericalError(f"non-finite network input at row {bad}: {X[bad]}")
    return X, t, single


def forward_cache(params: ModelParams, X: np.ndarray, t: np.ndarray, schedule_len: int):
    """Batched forward pass; returns (out, cache) for :func:`backward_cache`."""
    inp = np.concatenate([X, time_embedding(t, schedule_len, params.emb_dim)], axis=1)
    h1 = np.tanh(inp @ params.W1.T + params.b1)
    h2 = np.tanh(h1 @ params.W2.T + params.b2)
    out = h2 @ params.W3.T + params.b3
    return out, (inp, h1, h2)


def backward_cache(params: ModelParams, cache, G: np.ndarray):
    """Gradients of sum(G * out) w.r.t. params and the network input rows."""
    inp, h1, h2 = cache
    dW3 = G.T @ h2
    db3 = G.sum(axis=0)
    dz2 = (G @ params.W3) * (1.0 - h2 * h2)
    dW2 = dz2.T @ h1
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ params.W2) * (1.0 - h1 * h1)
    dW1 = dz1.T @ inp
    db1 = dz1.sum(axis=0)
    dinp = dz1 @ params.W1
    return ModelParams(dW1, db1, dW2, db2, dW3, db3), dinp


def mlp_forward(params: ModelParams, x, t, schedule_len: int) -> np.ndarray:
    X, t, single = _batch_inputs(params, x, t, schedule_len)
    out, _ = forward_cache(params, X, t, schedule_len)
    return out[0] if single else out


def mlp_backward(params: ModelParams, x, t, schedule_len: int, upstream) -> tuple[ModelParams, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * eps_theta(x, t))``.

    Returns (parameter gradients summed over the batch, gradient w.r.t. x).
    """
    X, t, single = _batch_inputs(params, x, t, schedule_len)
    G = np.asarray(upstream, dtype=np.float64).reshape(X.shape)
    if not np.isfinite(G).all():
        raise NumericalError("non-finite upstream gradient")
    _, cache = forward_cache(params, X, t, schedule_len)
    grads, dinp = backward_cache(params, cache, G)
    dx = dinp[:, : params.data_dim]
    return grads, (dx[0] if single else dx)


# optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, params: ModelParams, lr: float = 1e-3, **kw) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), lr=lr, **kw)


def adam_step(state: OptimizerState, params: ModelParams, grads: ModelParams) -> tuple[OptimizerState, ModelParams]:
    """One bias-corrected Adam update. Weight decay, when nonzero, is decoupled."""
    if grads.shapes != params.shapes or state.m.shapes != params.shapes:
        raise ValueError("adam_step: shape mismatch between state, params and grads")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = p - state.lr * upd
        if state.weight_decay:
            p = p - state.lr * state.weight_decay * p
        new_m.append(m)
        new_v.append(v)
        new_p.append(p)
    new_state = replace(state, m=ModelParams(*new_m), v=ModelParams(*new_v), step=step)
    return new_state, ModelParams(*new_p)


def numerical_gradient(f: Callable[[ModelParams], float], params: ModelParams, h: float = 1e-6) -> ModelParams:
    """Central-difference gradient of a scalar function, entry by entry."""
    if h <= 0:
        raise ValueError("h must be positive")
    flat = params.flatten()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(params.unflatten(flat))
        flat[i] = orig - h
        fm = f(params.unflatten(flat))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return params.unflatten(grad)


def relative_error(a: ModelParams, b: ModelParams) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    fa, fb = a.flatten(), b.flatten()
    denom = max(np.linalg.norm(fa), np.linalg.norm(fb))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(fa - fb) / denom)
