"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery for the transformer policy and its losses: numpy
holds the data, every operation records a closure that maps the output
gradient to input gradients, and ``Tensor.backward`` replays the closures
in reverse topological order with additive accumulation across fan-out.
The graph is rebuilt on every forward pass, so variable sequence lengths
cost nothing.

Conventions baked in here and relied on by the tests:

* masked softmax writes minus infinity into forbidden slots before the
  exp, so forbidden probabilities are exactly 0.0 and their logits get
  exactly zero gradient;
* ``stop_gradient`` and the ``no_grad`` context produce constants, which
  the backward pass never visits;
* everything is float64 (gradient checks against central differences are
  the point of this module, and they need the headroom).
"""

from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager

import numpy as np


class NonFiniteError(RuntimeError):
    """A value that must be finite (loss, gradient, parameter) is not."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or of an unknown version."""


# Per-thread so concurrent rollout workers cannot corrupt each other's state.
_grad_state = threading.local()


@contextmanager
def no_grad():
    """Disable graph recording inside the block; results become constants."""
    old = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = old


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def check_finite(self, what="tensor"):
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"{what} contains non-finite values")
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires gradient.

        The loss must be scalar.  Each graph node is visited exactly once;
        fan-out contributions accumulate by addition.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("backward() on a non-finite loss")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {x.shape}")

    def backward(g):
        return (g.T,)

    return _make(x.data.T, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(x, indices) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = x.data[indices]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        return (gx,)

    return _make(out, (x,), backward)


def take_cols(x, indices) -> Tensor:
    """Select columns along axis 1; repeated indices accumulate gradient."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"take_cols expects a 2-D tensor, got {x.shape}")
    indices = np.asarray(indices, dtype=np.intp)
    out = x.data[:, indices]
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, indices[None, :]), g)
        return (gx,)

    return _make(out, (x,), backward)


def embedding_lookup(table, ids) -> Tensor:
    """Rows of an embedding table by integer id (same contract as take_rows)."""
    ids = np.asarray(ids)
    table = as_tensor(table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id out of range for table of {table.shape[0]} rows")
    return take_rows(table, ids)


def take_per_row(x, column_ids) -> Tensor:
    """out[r] = x[r, column_ids[r]]; the log-prob gather for sampled actions."""
    x = as_tensor(x)
    column_ids = np.asarray(column_ids, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = x.data[rows, column_ids]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, column_ids), g)
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _make(np.maximum(x.data, 0.0), (x,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """tanh-approximation GELU; smooth, so finite-difference checks behave."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v**2)
        dx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        return (g * dx,)

    return _make(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to mean 0, variance 1, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        dxhat = g * gain.data
        # standard layer-norm backward, everything row-local
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, _unbroadcast(dgain, gain.shape), _unbroadcast(dbias, bias.shape)

    return _make(out, (x, gain, bias), backward)


def masked_softmax(logits, mask=None) -> Tensor:
    """Row softmax over the last axis with optional boolean mask (True = allow).

    Forbidden entries get exactly zero probability and exactly zero logit
    gradient; a row with nothing allowed is an error.
    """
    logits = as_tensor(logits)
    if mask is None:
        shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("masked_softmax row with every entry forbidden")
        shifted = np.where(mask, logits.data, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # p is exactly 0 on forbidden entries, so their gradient is exactly 0
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), backward)


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; on ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(np.minimum(a.data, b.data), (a, b), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the interior and boundary."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def tsum(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(), (x,), backward)


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(x.data.mean(), (x,), backward)


def stop_gradient(x) -> Tensor:
    """Constant copy of the value; backward never crosses it."""
    return Tensor(as_tensor(x).data.copy())


# ---------------------------------------------------------------------------
# Parameter registry
# ---------------------------------------------------------------------------


class Parameters:
    """Named trainable tensors with stable insertion order."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._store:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; parameters off the graph get zeros."""
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._store.items()
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._store.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._store) - set(state)
        extra = set(state) - set(self._store)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in self._store.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def check_finite(self) -> None:
        for name, t in self._store.items():
            if not np.isfinite(t.data).all():
                raise NonFiniteError(f"parameter {name!r} contains non-finite values")


def backward(loss: Tensor, params: Parameters) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every registered parameter."""
    params.zero_grad()
    loss.backward()
    return params.gradients()


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(loss_fn, params: Parameters, epsilon: float = 1e-5,
               max_coords_per_param: int = 20, rng=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must be deterministic and read parameter values live, so
    in-place perturbation of ``params`` is visible to it.  Large parameters
    are subsampled coordinate-wise.
    """
    rng = np.random.default_rng(rng)
    analytic = backward(loss_fn(), params)

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + epsilon
            hi = loss_fn().item()
            flat[c] = keep - epsilon
            lo = loss_fn().item()
            flat[c] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"non-finite loss while probing {name!r}")
            numeric = (hi - lo) / (2.0 * epsilon)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Single binary file, all integers little-endian:
#   magic   4 bytes  b"STLM"
#   version u32      currently 1
#   meta    u64 length + that many UTF-8 bytes of JSON
#   count   u32      number of arrays
#   then per array:
#   name    u32 length + UTF-8 bytes
#   ndim    u32, dims as i64 each
#   data    product(dims) float64 values, little-endian, row-major

CHECKPOINT_MAGIC = b"STLM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    if isinstance(arrays, Parameters):
        arrays = arrays.state_dict()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            # note: ascontiguousarray would flatten 0-d arrays; asarray keeps them
            arr = np.asarray(arr, dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt meta block ({exc})") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            dims = struct.unpack(f"<{ndim}q", _read_exact(fh, 8 * ndim, "dims"))
            n_values = int(np.prod(dims)) if ndim else 1
            raw = _read_exact(fh, 8 * n_values, f"data for {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last array")
    return arrays, meta
