"""Dense float64 arrays with taped reverse-mode differentiation.

Everything above this layer (encoders, attention, decoding, training) is
composed from the primitives defined here.  Values are numpy float64 in
row-major order; gradients are plain numpy buffers accumulated in place
while a Tape is active.  Broadcasting is deliberately restricted to
scalar-with-array so shape bugs fail loudly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "ShapeError",
    "MaskError",
    "ContractError",
    "CheckpointError",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "matmul",
    "tensor_sum",
    "stack",
    "row",
    "concat",
    "tile_rows",
    "transpose",
    "take_rows",
    "pluck",
    "apply_dropout",
    "backward",
    "check_gradients",
    "GradCheckReport",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """A boolean mask leaves no valid positions."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or inconsistent."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all dispatch to the taped primitives below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward()."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], pullback: Callable[[], None]) -> None:
        self._nodes.append((out, inputs, pullback))

    def clear(self) -> None:
        """Drop all nodes and zero the grads of every tensor they touched."""
        for out, inputs, _ in self._nodes:
            out.zero_grad()
            for t in inputs:
                t.zero_grad()
        self._nodes.clear()

    def __len__(self) -> int:
        return len(self._nodes)


_TAPE_STACK: list[Tape | None] = []


def _tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Suspend recording inside the block (decoding, finite differences)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(float(x))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise TypeError(f"cannot treat {type(x).__name__} as a Tensor")


def _needs_grad(*tensors: Tensor) -> bool:
    return _tape() is not None and any(t.requires_grad for t in tensors)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_scalar, b_scalar = a.values.ndim == 0, b.values.ndim == 0
    if not (a.shape == b.shape or a_scalar or b_scalar):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are neither equal nor scalar-with-array")
    out = Tensor(a.values + b.values, requires_grad=_needs_grad(a, b))
    if out.requires_grad:

        def pull():
            g = out.grad
            if a.requires_grad:
                a.grad += g.sum() if a_scalar and g.ndim else g
            if b.requires_grad:
                b.grad += g.sum() if b_scalar and g.ndim else g

        _tape().record(out, (a, b), pull)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_scalar, b_scalar = a.values.ndim == 0, b.values.ndim == 0
    if not (a.shape == b.shape or a_scalar or b_scalar):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are neither equal nor scalar-with-array")
    out = Tensor(a.values * b.values, requires_grad=_needs_grad(a, b))
    if out.requires_grad:

        def pull():
            g = out.grad
            if a.requires_grad:
                contrib = g * b.values
                a.grad += contrib.sum() if a_scalar and contrib.ndim else contrib
            if b.requires_grad:
                contrib = g * a.values
                b.grad += contrib.sum() if b_scalar and contrib.ndim else contrib

        _tape().record(out, (a, b), pull)
    return out


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.tanh(x.values), requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            x.grad += out.grad * (1.0 - out.values * out.values)

        _tape().record(out, (x,), pull)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    # Stable in both tails.
    vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(vals, requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            y = out.values
            x.grad += out.grad * y * (1.0 - y)

        _tape().record(out, (x,), pull)
    return out


def softmax(e, mask=None) -> Tensor:
    """Probability vector over the unmasked positions of a 1-D energy vector.

    Masked positions are exactly zero in the output.  Stable under large
    energies via max subtraction, hence shift-invariant.
    """
    e = _as_tensor(e)
    if e.values.ndim != 1 or e.size < 1:
        raise ShapeError(f"softmax expects a nonempty 1-D tensor, got shape {e.shape}")
    if mask is None:
        m = np.ones(e.size, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != e.shape:
            raise ShapeError(f"softmax mask shape {m.shape} does not match energies {e.shape}")
    if not m.any():
        raise MaskError("softmax: every position is masked")
    vals = np.zeros_like(e.values)
    shifted = e.values[m] - e.values[m].max()
    ex = np.exp(shifted)
    vals[m] = ex / ex.sum()
    out = Tensor(vals, requires_grad=_needs_grad(e))
    if out.requires_grad:

        def pull():
            y = out.values
            g = out.grad
            e.grad += y * (g - float(np.dot(g, y)))

        _tape().record(out, (e,), pull)
    return out


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 1 or x.size < 1:
        raise ShapeError(f"log_softmax expects a nonempty 1-D tensor, got shape {x.shape}")
    m = x.values.max()
    lse = m + np.log(np.exp(x.values - m).sum())
    out = Tensor(x.values - lse, requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            p = np.exp(out.values)
            g = out.grad
            x.grad += g - p * g.sum()

        _tape().record(out, (x,), pull)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    an, bn = a.values.ndim, b.values.ndim
    if an not in (1, 2) or bn not in (1, 2):
        raise ShapeError(f"matmul supports rank 1 and 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.values @ b.values, requires_grad=_needs_grad(a, b))
    if out.requires_grad:

        def pull():
            g = out.grad
            if an == 2 and bn == 2:
                if a.requires_grad:
                    a.grad += g @ b.values.T
                if b.requires_grad:
                    b.grad += a.values.T @ g
            elif an == 2 and bn == 1:
                if a.requires_grad:
                    a.grad += np.outer(g, b.values)
                if b.requires_grad:
                    b.grad += a.values.T @ g
            elif an == 1 and bn == 2:
                if a.requires_grad:
                    a.grad += b.values @ g
                if b.requires_grad:
                    b.grad += np.outer(a.values, g)
            else:
                if a.requires_grad:
                    a.grad += g * b.values
                if b.requires_grad:
                    b.grad += g * a.values

        _tape().record(out, (a, b), pull)
    return out


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.values.sum(), requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            x.grad += out.grad

        _tape().record(out, (x,), pull)
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-0 or rank-1 tensors along a new leading axis."""
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    parts = [_as_tensor(p) for p in parts]
    base = parts[0].shape
    if any(p.shape != base for p in parts) or parts[0].values.ndim > 1:
        raise ShapeError(f"stack needs same-shape rank<=1 parts, got {[p.shape for p in parts]}")
    out = Tensor(np.stack([p.values for p in parts]), requires_grad=_needs_grad(*parts))
    if out.requires_grad:

        def pull():
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p.grad += out.grad[i]

        _tape().record(out, tuple(parts), pull)
    return out


def row(x, i: int) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"row expects a rank-2 tensor, got shape {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"row index {i} out of range for shape {x.shape}")
    out = Tensor(x.values[i].copy(), requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            x.grad[i] += out.grad

        _tape().record(out, (x,), pull)
    return out


def concat(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 1 or b.values.ndim != 1:
        raise ShapeError(f"concat expects rank-1 tensors, got shapes {a.shape} and {b.shape}")
    na = a.size
    out = Tensor(np.concatenate([a.values, b.values]), requires_grad=_needs_grad(a, b))
    if out.requires_grad:

        def pull():
            if a.requires_grad:
                a.grad += out.grad[:na]
            if b.requires_grad:
                b.grad += out.grad[na:]

        _tape().record(out, (a, b), pull)
    return out


def tile_rows(v, n: int) -> Tensor:
    """Repeat a 1-D tensor as n identical rows (explicit, not silent broadcast)."""
    v = _as_tensor(v)
    if v.values.ndim != 1:
        raise ShapeError(f"tile_rows expects a rank-1 tensor, got shape {v.shape}")
    if n < 1:
        raise ContractError(f"tile_rows needs n >= 1, got {n}")
    out = Tensor(np.tile(v.values, (n, 1)), requires_grad=_needs_grad(v))
    if out.requires_grad:

        def pull():
            v.grad += out.grad.sum(axis=0)

        _tape().record(out, (v,), pull)
    return out


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got shape {x.shape}")
    out = Tensor(x.values.T.copy(), requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            x.grad += out.grad.T

        _tape().record(out, (x,), pull)
    return out


def take_rows(x, ids) -> Tensor:
    """Gather rows of a rank-2 tensor; gradient flows only to the taken rows."""
    x = _as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if x.values.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"take_rows expects rank-2 source and rank-1 ids, got {x.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.values[ids], requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            np.add.at(x.grad, ids, out.grad)

        _tape().record(out, (x,), pull)
    return out


def pluck(x, rows, cols) -> Tensor:
    """Select elements x[rows[i], cols[i]] into a 1-D tensor."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if x.values.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError(f"pluck expects rank-2 source and aligned 1-D indices, got {x.shape}")
    out = Tensor(x.values[rows, cols], requires_grad=_needs_grad(x))
    if out.requires_grad:

        def pull():
            np.add.at(x.grad, (rows, cols), out.grad)

        _tape().record(out, (x,), pull)
    return out


def apply_dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dt into every requires_grad tensor reachable from loss."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.values.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    if not loss.requires_grad:
        return  # constant graph: nothing reachable carries grads
    loss.grad[...] += 1.0
    for _out, _inputs, pull in reversed(tape._nodes):
        pull()


@dataclass
class GradCheckReport:
    max_rel_err: float
    step: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare the taped gradient of a scalar function against central differences.

    Relative error uses max(|analytic|, |numeric|, 1) as denominator so
    near-zero gradients are compared absolutely.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    if not x.requires_grad:
        raise ContractError("check_gradients needs a requires_grad tensor")
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        if out.values.ndim != 0:
            raise ContractError(f"check_gradients needs a scalar-valued f, got shape {out.shape}")
        backward(out)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.values)
        tape.clear()

    flat = x.values.reshape(-1)
    numeric = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1.0)
    max_rel = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, step=step, tol=tol)


# --- checkpoint serialization -------------------------------------------------
# Layout: magic "MASTCKPT", version u32, then per-tensor records until EOF.
# Record: u32 name length, UTF-8 name, u32 rank, u64 extents, f64 values
# (little-endian, row-major).  Round-trips are bit exact.

CHECKPOINT_MAGIC = b"MASTCKPT"
CHECKPOINT_VERSION = 1


def write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def read_record(fh) -> tuple[str, np.ndarray] | None:
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    values = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, values.astype(np.float64)


def write_header(fh) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))


def read_header(fh) -> None:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")


def save_tensors(path, tensors: Mapping[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        write_header(fh)
        for name, t in tensors.items():
            write_record(fh, name, t.values if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64))


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        read_header(fh)
        while True:
            rec = read_record(fh)
            if rec is None:
                break
            name, values = rec
            out[name] = values
    return out
