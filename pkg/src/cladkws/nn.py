"""Reverse-mode autodiff on float64 numpy buffers.

Deliberately small: the ops the encoders and losses need, a tape-style
backward pass, plain SGD, and a binary checkpoint format. Broadcasting is
limited to what numpy does for same-rank operands with size-1 axes (and
plain vectors against matrix rows); gradients are summed back down to the
operand's shape.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParseError

Array = np.ndarray

CHECKPOINT_MAGIC = b"CLADCKPT"
CHECKPOINT_VERSION = 1

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the autodiff graph.

    ``data`` is always float64. ``grad`` is populated on leaf tensors
    (parameters) by :meth:`backward` and accumulates additively until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: Array) -> None:
        self.grad = np.array(g) if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Backpropagate from a scalar node, accumulating into leaf grads."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        _backward_engine(self, np.ones_like(self.data))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A tensor that never tracks gradients."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Parameter init: uniform on +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return parameter(rng.uniform(-bound, bound, size=shape))


def init_normal(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 1.0) -> Tensor:
    """Unit-scale Gaussian init (embedding lookup tables, not linear maps)."""
    return parameter(rng.normal(size=shape) * scale)


def _make(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward_fn=backward_fn)
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering, iteratively (graphs can be deep)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _backward_engine(root: Tensor, seed: Array) -> None:
    order = _toposort(root)
    grads: dict[int, Array] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                node._accum(g)
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(data: Array, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ContractError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ContractError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), bw)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    data = a.data * factor

    def bw(g):
        return (g * factor,)

    return _make(data, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (g.T,)

    return _make(a.data.T, (a,), bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view shape {a.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise ContractError("concat: empty part list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bw)


def slice_rows(a, start: int, stop: int) -> Tensor:
    return slice_block(a, start, stop, None, None)


def slice_block(a, r0: int, r1: int, c0: int | None = None, c1: int | None = None) -> Tensor:
    """Contiguous block slice of a 2-D tensor; gradient pads with zeros."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ContractError(f"slice_block: expected 2-D tensor, got shape {a.shape}")
    rows, cols = a.shape
    c0 = 0 if c0 is None else c0
    c1 = cols if c1 is None else c1
    if not (0 <= r0 <= r1 <= rows and 0 <= c0 <= c1 <= cols):
        raise ContractError(f"slice_block: [{r0}:{r1}, {c0}:{c1}] out of bounds for shape {a.shape}")
    data = a.data[r0:r1, c0:c1]

    def bw(g):
        z = np.zeros_like(a.data)
        z[r0:r1, c0:c1] = g
        return (z,)

    return _make(data, (a,), bw)


def take_rows(a, indices) -> Tensor:
    """Gather rows by index; gradient scatter-adds (rows may repeat)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2:
        raise ContractError(f"take_rows: expected 2-D tensor, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"take_rows: index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "tanh")
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "sigmoid")
    # tanh form is stable for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.data, "relu")
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _make(data, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw)


def pow_const(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    data = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(data, (a,), bw)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), bw)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax along ``axis`` (max-subtraction)."""
    a = _as_tensor(a)
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# ---------------------------------------------------------------------------
# recurrent cell


class GRUCell:
    """Gated recurrent cell.

    update/reset gates ``z, r = sigmoid(x W_zr + h U_zr + b_zr)``,
    candidate ``c = tanh(x W_c + (r * h) U_c + b_c)``, next state
    ``h' = z * h + (1 - z) * c``. With all-zero weights ``h'`` does not
    depend on ``x``.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_zr = init_uniform(rng, (input_dim, 2 * hidden_dim), input_dim)
        self.u_zr = init_uniform(rng, (hidden_dim, 2 * hidden_dim), hidden_dim)
        self.b_zr = parameter(np.zeros(2 * hidden_dim))
        self.w_c = init_uniform(rng, (input_dim, hidden_dim), input_dim)
        self.u_c = init_uniform(rng, (hidden_dim, hidden_dim), hidden_dim)
        self.b_c = parameter(np.zeros(hidden_dim))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_zr": self.w_zr,
            f"{prefix}.u_zr": self.u_zr,
            f"{prefix}.b_zr": self.b_zr,
            f"{prefix}.w_c": self.w_c,
            f"{prefix}.u_c": self.u_c,
            f"{prefix}.b_c": self.b_c,
        }

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ContractError(f"GRUCell.step: input shape {x.shape}, expected (B, {self.input_dim})")
        if h.shape != (x.shape[0], self.hidden_dim):
            raise ContractError(f"GRUCell.step: state shape {h.shape}, expected ({x.shape[0]}, {self.hidden_dim})")
        hd = self.hidden_dim
        zr = sigmoid(add(add(matmul(x, self.w_zr), matmul(h, self.u_zr)), self.b_zr))
        z = slice_block(zr, 0, zr.shape[0], 0, hd)
        r = slice_block(zr, 0, zr.shape[0], hd, 2 * hd)
        c = tanh(add(add(matmul(x, self.w_c), matmul(mul(r, h), self.u_c)), self.b_c))
        one_minus_z = add(scale(z, -1.0), constant(1.0))
        return add(mul(z, h), mul(one_minus_z, c))

    def project_inputs(self, x_all: Tensor) -> tuple[Tensor, Tensor]:
        """Input-side projections for a whole sequence at once.

        ``x_all`` stacks the per-step inputs time-major ([T*B, input_dim]);
        the recurrence then only needs the hidden-side matmuls per step."""
        return (
            add(matmul(x_all, self.w_zr), self.b_zr),
            add(matmul(x_all, self.w_c), self.b_c),
        )

    def step_projected(self, xzr: Tensor, xc: Tensor, h: Tensor) -> Tensor:
        """One step given this step's rows of the projected inputs."""
        hd = self.hidden_dim
        zr = sigmoid(add(xzr, matmul(h, self.u_zr)))
        z = slice_block(zr, 0, zr.shape[0], 0, hd)
        r = slice_block(zr, 0, zr.shape[0], hd, 2 * hd)
        c = tanh(add(xc, matmul(mul(r, h), self.u_c)))
        one_minus_z = add(scale(z, -1.0), constant(1.0))
        return add(mul(z, h), mul(one_minus_z, c))

    def sequence(self, xzr_all: Tensor, xc_all: Tensor, t_len: int, b: int,
                 reverse: bool = False) -> Tensor:
        """Whole recurrence as one graph node (states stacked time-major).

        Equivalent to chaining :meth:`step_projected` over all steps but with
        the backward pass written out as backprop-through-time, which keeps
        the graph small. ``reverse=True`` runs right-to-left; row ordering of
        the output is unchanged.
        """
        return gru_sequence(self, xzr_all, xc_all, t_len, b, reverse)


def gru_sequence(cell: "GRUCell", xzr_all: Tensor, xc_all: Tensor, t_len: int, b: int,
                 reverse: bool = False) -> Tensor:
    hd = cell.hidden_dim
    if xzr_all.shape != (t_len * b, 2 * hd) or xc_all.shape != (t_len * b, hd):
        raise ContractError(
            f"gru_sequence: projected inputs {xzr_all.shape}/{xc_all.shape} do not match "
            f"T={t_len}, B={b}, hidden={hd}"
        )
    _check_finite(xzr_all.data, "gru_sequence")
    u_zr, u_c = cell.u_zr, cell.u_c
    uzr, uc = u_zr.data, u_c.data
    xzr3 = xzr_all.data.reshape(t_len, b, 2 * hd)
    xc3 = xc_all.data.reshape(t_len, b, hd)
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)

    z_cache = np.empty((t_len, b, hd))
    r_cache = np.empty((t_len, b, hd))
    c_cache = np.empty((t_len, b, hd))
    hprev_cache = np.empty((t_len, b, hd))
    states = np.empty((t_len, b, hd))
    h = np.zeros((b, hd))
    for t in order:
        zr = 0.5 * (1.0 + np.tanh(0.5 * (xzr3[t] + h @ uzr)))
        z, r = zr[:, :hd], zr[:, hd:]
        c = np.tanh(xc3[t] + (r * h) @ uc)
        hprev_cache[t] = h
        z_cache[t], r_cache[t], c_cache[t] = z, r, c
        h = z * h + (1.0 - z) * c
        states[t] = h

    def bw(g):
        g3 = g.reshape(t_len, b, hd)
        dxzr = np.empty((t_len, b, 2 * hd))
        dxc = np.empty((t_len, b, hd))
        duzr = np.zeros_like(uzr)
        duc = np.zeros_like(uc)
        carry = np.zeros((b, hd))
        for t in reversed(order):
            gh = g3[t] + carry
            z, r, c, hprev = z_cache[t], r_cache[t], c_cache[t], hprev_cache[t]
            dz = gh * (hprev - c)
            dpre_c = gh * (1.0 - z) * (1.0 - c * c)
            dxc[t] = dpre_c
            duc += (r * hprev).T @ dpre_c
            drh = dpre_c @ uc.T
            dpre_z = dz * z * (1.0 - z)
            dpre_r = (drh * hprev) * r * (1.0 - r)
            dxzr[t, :, :hd] = dpre_z
            dxzr[t, :, hd:] = dpre_r
            dpre_zr = dxzr[t]
            duzr += hprev.T @ dpre_zr
            carry = gh * z + drh * r + dpre_zr @ uzr.T
        return dxzr.reshape(t_len * b, 2 * hd), dxc.reshape(t_len * b, hd), duzr, duc

    return _make(states.reshape(t_len * b, hd), (xzr_all, xc_all, u_zr, u_c), bw)


def recurrent_cell_forward(cell: GRUCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One recurrent step; differentiable w.r.t. inputs and cell parameters."""
    return cell.step(x_t, h_prev)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Iterable[Tensor], grads: Iterable[Array | None], lr: float) -> None:
    """In-place plain SGD: p <- p - lr * g."""
    if lr <= 0:
        raise ContractError(f"sgd_step: lr must be positive, got {lr}")
    for p, g in zip(params, grads):
        if g is not None:
            p.data -= lr * g


def apply_gradients(params: Iterable[Tensor], lr: float) -> None:
    """SGD step using each parameter's accumulated ``grad``."""
    ps = list(params)
    sgd_step(ps, [p.grad for p in ps], lr)


def zero_gradients(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, count u32, then per tensor
# name (u32 length + utf-8), ndim u32, dims u32..., float64 little-endian payload


def save_tensors(path, named: dict[str, Array]) -> None:
    """Write a named-tensor table. Entries are sorted by name so identical
    contents always produce identical bytes."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, n: int) -> bytes:
        if offset + n > len(blob):
            raise ParseError("truncated checkpoint", offset=offset)
        return blob[offset : offset + n]

    if need(0, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", offset=0)
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack("<II", need(pos, 8))
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=pos - 8)
    out: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(pos, 4))
        pos += 4
        name = need(pos, name_len).decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack("<I", need(pos, 4))
        pos += 4
        shape = struct.unpack(f"<{ndim}I", need(pos, 4 * ndim))
        pos += 4 * ndim
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        arr = np.frombuffer(need(pos, n_bytes), dtype="<f8").reshape(shape)
        pos += n_bytes
        out[name] = arr.astype(np.float64)
    return out
