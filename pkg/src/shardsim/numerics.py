"""Dense numeric buffers, a layered feed-forward model with analytic
gradients, named PRNG streams, and optimizers that act elementwise on
(sharded) flat parameter buffers.

Full precision is float64, low precision float32 — a 2x element-width pair
standing in for FP32/FP16.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

DTYPES = {"full": np.float64, "low": np.float32}
ITEMSIZE = {"full": 8, "low": 4}


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# buffers
# ---------------------------------------------------------------------------

class DenseTensor:
    """A shaped view over a contiguous 1-d buffer.

    Views never copy: `view(offset, shape)` shares storage, so writing
    through a view mutates the owning flat buffer at that offset.
    """

    __slots__ = ("data", "shape")

    def __init__(self, data: np.ndarray, shape: tuple[int, ...]):
        data = np.asarray(data)
        if data.ndim != 1:
            raise NumericsError("DenseTensor storage must be 1-d")
        if data.size != math.prod(shape):
            raise NumericsError(
                f"storage length {data.size} != prod(shape {shape})")
        self.data = data
        self.shape = tuple(shape)

    @classmethod
    def zeros(cls, shape: tuple[int, ...], dtype: str = "full") -> "DenseTensor":
        return cls(np.zeros(math.prod(shape), dtype=DTYPES[dtype]), shape)

    @property
    def dtype(self) -> str:
        return "full" if self.data.dtype == np.float64 else "low"

    @property
    def numel(self) -> int:
        return self.data.size

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)  # a view, never a copy

    def view(self, offset: int, shape: tuple[int, ...]) -> "DenseTensor":
        n = math.prod(shape)
        if offset < 0 or offset + n > self.data.size:
            raise NumericsError(
                f"view [{offset}, {offset + n}) outside buffer of "
                f"{self.data.size}")
        return DenseTensor(self.data[offset:offset + n], shape)


def named_stream(seed: int, name: str) -> np.random.Generator:
    """A PRNG stream keyed by (seed, name): stable across runs and platforms,
    independent of the order in which other streams are drawn."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Feed-forward stack: Linear layers joined by one activation kind,
    grouped into units (consecutive linears that shard together)."""

    dims: tuple[int, ...] = (4, 8, 8, 2)
    activation: str = "relu"          # relu | tanh
    unit_sizes: tuple[int, ...] | None = None  # linears per unit; default 1 each
    init: str = "dyadic"              # see deferred_init styles
    bias: bool = True

    @property
    def num_linears(self) -> int:
        return len(self.dims) - 1

    @property
    def units(self) -> list[list[int]]:
        sizes = self.unit_sizes or tuple(1 for _ in range(self.num_linears))
        if sum(sizes) != self.num_linears:
            raise NumericsError(
                f"unit_sizes {sizes} must cover {self.num_linears} linears")
        out, nxt = [], 0
        for s in sizes:
            out.append(list(range(nxt, nxt + s)))
            nxt += s
        return out

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for i in range(self.num_linears):
            fan_out, fan_in = self.dims[i + 1], self.dims[i]
            shapes.append((f"linear{i}.weight", (fan_out, fan_in)))
            if self.bias:
                shapes.append((f"linear{i}.bias", (fan_out,)))
        return shapes

    def unit_param_names(self) -> list[list[str]]:
        per_linear: dict[int, list[str]] = {}
        for name, _ in self.param_shapes():
            idx = int(name.split(".")[0][len("linear"):])
            per_linear.setdefault(idx, []).append(name)
        return [[n for li in unit for n in per_linear[li]]
                for unit in self.units]


def _act_forward(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return z * (z > 0)
    if kind == "tanh":
        return np.tanh(z)
    raise NumericsError(f"unknown activation '{kind}'")


def _act_backward(kind: str, z: np.ndarray, dout: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dout * (z > 0)
    if kind == "tanh":
        t = np.tanh(z)
        return dout * (1.0 - t * t)
    raise NumericsError(f"unknown activation '{kind}'")


class LayeredModel:
    """Forward/backward over externally owned parameter views.

    `params` maps fully qualified names to DenseTensors; the tensors are
    typically views into flat parameter buffers, so sharding machinery can
    swap storage under the model without it noticing.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, DenseTensor]):
        self.spec = spec
        self.params = params

    def _linear(self, i: int, x: np.ndarray) -> np.ndarray:
        w = self.params[f"linear{i}.weight"].array
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise NumericsError(
                f"linear{i}: input shape {x.shape} does not match fan-in "
                f"{w.shape[1]}")
        y = x @ w.T
        if self.spec.bias:
            y = y + self.params[f"linear{i}.bias"].array
        return y

    def forward_unit(self, unit: int, x: np.ndarray
                     ) -> tuple[np.ndarray, list]:
        """Run one unit's linears; cache holds what backward needs."""
        cache = []
        for i in self.spec.units[unit]:
            z = self._linear(i, x)
            last = (i == self.spec.num_linears - 1)
            a = z if last else _act_forward(self.spec.activation, z)
            cache.append((i, x, z, last))
            x = a
        return x, cache

    def backward_unit(self, unit: int, cache: list, dout: np.ndarray
                      ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if cache is None:
            raise NumericsError("backward called without a forward cache")
        grads: dict[str, np.ndarray] = {}
        for i, x, z, last in reversed(cache):
            dz = dout if last else _act_backward(self.spec.activation, z, dout)
            w = self.params[f"linear{i}.weight"].array
            grads[f"linear{i}.weight"] = dz.T @ x
            if self.spec.bias:
                grads[f"linear{i}.bias"] = dz.sum(axis=0)
            dout = dz @ w
        return dout, grads

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[list]]:
        caches = []
        for u in range(len(self.spec.units)):
            x, cache = self.forward_unit(u, x)
            caches.append(cache)
        return x, caches

    def backward(self, caches: list[list], dout: np.ndarray
                 ) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        for u in reversed(range(len(self.spec.units))):
            dout, unit_grads = self.backward_unit(u, caches[u], dout)
            grads.update(unit_grads)
        return grads

    def unit_flops(self, unit: int, batch: int, backward: bool = False) -> float:
        flops = 0.0
        for i in self.spec.units[unit]:
            flops += 2.0 * batch * self.spec.dims[i] * self.spec.dims[i + 1]
        return flops * (2.0 if backward else 1.0)

    def unit_activation_elements(self, unit: int, batch: int) -> int:
        return sum(batch * (self.spec.dims[i] + self.spec.dims[i + 1])
                   for i in self.spec.units[unit])


def mse_loss(pred: np.ndarray, target: np.ndarray,
             reduction: str = "mean") -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise NumericsError(
            f"mse_loss: shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    if reduction == "mean":
        return float((diff * diff).mean()), (2.0 / diff.size) * diff
    if reduction == "sum":
        return float((diff * diff).sum()), 2.0 * diff
    raise NumericsError(f"unknown reduction '{reduction}'")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 0.03125):
        self.lr = lr

    def init_state(self, n: int, dtype: str = "full") -> dict:
        return {}

    def step(self, param: np.ndarray, grad: np.ndarray, state: dict) -> None:
        if param.shape != grad.shape:
            raise NumericsError(
                f"optimizer step: param length {param.size} != grad "
                f"{grad.size}")
        param -= self.lr * grad

    def state_elements(self, n: int) -> int:
        return 0


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def init_state(self, n: int, dtype: str = "full") -> dict:
        return {"m": np.zeros(n, dtype=DTYPES[dtype]),
                "v": np.zeros(n, dtype=DTYPES[dtype]),
                "t": 0}

    def step(self, param: np.ndarray, grad: np.ndarray, state: dict) -> None:
        if param.shape != grad.shape or param.shape != state["m"].shape:
            raise NumericsError(
                f"optimizer step: param/grad/state lengths differ "
                f"({param.size}/{grad.size}/{state['m'].size})")
        b1, b2 = self.betas
        state["t"] += 1
        t = state["t"]
        state["m"] = b1 * state["m"] + (1.0 - b1) * grad
        state["v"] = b2 * state["v"] + (1.0 - b2) * grad * grad
        m_hat = state["m"] / (1.0 - b1 ** t)
        v_hat = state["v"] / (1.0 - b2 ** t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_elements(self, n: int) -> int:
        return 2 * n


def make_optimizer(kind: str, lr: float | None = None) -> SGD | Adam:
    if kind == "sgd":
        return SGD() if lr is None else SGD(lr)
    if kind == "adam":
        return Adam() if lr is None else Adam(lr)
    raise NumericsError(f"unknown optimizer '{kind}'")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def batch_stream(seed: int, steps: int, batch: int, dim_in: int,
                 dim_out: int, regime: str = "integer"
                 ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Deterministic per-step (input, target) batches.

    'integer' draws small integers (exactly representable, keeps training
    arithmetic dyadic); 'uniform' draws floats in [-1, 1).
    """
    rng = named_stream(seed, "data")
    for _ in range(steps):
        if regime == "integer":
            x = rng.integers(-3, 4, size=(batch, dim_in)).astype(np.float64)
            y = rng.integers(-3, 4, size=(batch, dim_out)).astype(np.float64)
        elif regime == "uniform":
            x = rng.uniform(-1.0, 1.0, size=(batch, dim_in))
            y = rng.uniform(-1.0, 1.0, size=(batch, dim_out))
        else:
            raise NumericsError(f"unknown data regime '{regime}'")
        yield x, y
