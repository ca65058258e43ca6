"""Minimal dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is how inference and the teacher path run.

There is no implicit broadcasting: binary elementwise ops demand equal
shapes, and callers expand vectors with :func:`broadcast_rows`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateInputError, DomainError, InvalidArgumentError, ShapeError, TapeError

DEFAULT_DTYPE = np.float64

_local = threading.local()


# ---------------------------------------------------------------------------
# allocation accounting

class _Arena:
    """Byte counters for live tensor payloads (thread-local use only)."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def free(self, nbytes: int) -> None:
        self.current -= nbytes


_arena = _Arena()


def memory_stats() -> dict[str, int]:
    """Current and peak bytes held by live Tensor payloads."""
    return {"current_bytes": _arena.current, "peak_bytes": _arena.peak}


def reset_peak_memory() -> None:
    _arena.peak = _arena.current


# ---------------------------------------------------------------------------
# core types

class Tensor:
    """Dense real array with optional gradient-tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "tape_node", "retains_grad", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data), copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_node: Node | None = None
        self.retains_grad = False
        self._nbytes = arr.nbytes
        _arena.alloc(self._nbytes)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.tape_node = None
        t.retains_grad = False
        t._nbytes = arr.nbytes
        _arena.alloc(t._nbytes)
        return t

    def __del__(self):
        try:
            _arena.free(self._nbytes)
        except Exception:
            pass

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def retain_grad(self) -> "Tensor":
        """Ask backward to also store this (non-leaf) tensor's gradient."""
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __getitem__(self, key): return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


class Node:
    """One recorded primitive: its inputs, its output and a vector-Jacobian product."""

    __slots__ = ("inputs", "output", "vjp", "tape", "name")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]], tape: "Tape"):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp
        self.tape = tape


class Tape:
    """Ordered record of primitive operations; single use per backward.

    Use as a context manager::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse guard
            stack.remove(self)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_node is None or loss.tape_node.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if self.consumed:
            raise TapeError("tape already consumed by backward()")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            out = node.output
            if out.retains_grad:
                out.grad = g_out if out.grad is None else out.grad + g_out
            in_grads = node.vjp(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.tape_node is None:
                    # leaf
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = g if prev is None else prev + g
        self.consumed = True
        for node in self.nodes:
            node.output.tape_node = None
        self.nodes.clear()


def _stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_node is None:
        raise TapeError("loss is detached: no recording tape")
    loss.tape_node.tape.backward(loss)


def _emit(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(name, inputs, out, vjp, tape)
        out.tape_node = node
        tape.record(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# construction

def tensor_new(shape: Sequence[int], fill: str = "zeros", *, value: float = 0.0,
               low: float = 0.0, high: float = 1.0, mean: float = 0.0, std: float = 1.0,
               seed: int | None = None, rng: np.random.Generator | None = None,
               requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Allocate a tensor.

    ``fill`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (``low``/``high``) or ``normal`` (``mean``/``std``). Random fills draw from
    ``rng`` if given, else from a fresh generator seeded with ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill in ("uniform", "normal"):
        gen = rng if rng is not None else np.random.default_rng(seed)
        if fill == "uniform":
            data = gen.uniform(low, high, size=shape).astype(dtype)
        else:
            data = gen.normal(mean, std, size=shape).astype(dtype)
    else:
        raise InvalidArgumentError(f"unknown fill rule {fill!r}")
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _emit("silu", x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(x)
    return _emit("sqrt", y, (a,), lambda g: (g * 0.5 / np.where(y > 0, y, np.inf),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    x = a.data
    keep = x >= floor
    return _emit("clamp_min", np.where(keep, x, floor).astype(a.dtype), (a,), lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)  # stable for large |x|, keeps dtype


_UNARY = {"sigmoid": sigmoid, "silu": silu, "relu": relu, "log": log, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: add|sub|mul take a tensor ``b``; scale takes a float ``b``."""
    if op in _BINARY:
        if b is None:
            raise InvalidArgumentError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op == "scale":
        if b is None:
            raise InvalidArgumentError("scale needs a constant")
        return scale(a, float(b))
    if op in _UNARY:
        return _UNARY[op](a)
    raise InvalidArgumentError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and reshaping

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ bd.T if need_a else None, ad.T @ g if need_b else None)

    return _emit("matmul", ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(src, g, dtype=a.dtype),))
    ax = axis % a.ndim
    out = a.data.sum(axis=ax)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Explicitly tile a vector ``[k]`` into ``[n, k]``."""
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows expects a vector, got {v.shape}")
    out = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return _emit("broadcast_rows", out, (v,), lambda g: (g.sum(axis=0),))


def flip(a: Tensor, axis: int) -> Tensor:
    return _emit("flip", np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def index(a: Tensor, key) -> Tensor:
    out = np.array(a.data[key], copy=True)
    src, dt = a.shape, a.dtype

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis or k is None for k in keys)

    def vjp(g):
        full = np.zeros(src, dtype=dt)
        if basic:
            full[key] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, key, g)
        return (full,)

    return _emit("index", out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise InvalidArgumentError("concat of empty list")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# normalisation family (last axis)

def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``logits / temperature`` along the last axis (max-subtracted)."""
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {temperature}")
    t = float(temperature)
    z = logits.data / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / t,)

    return _emit("softmax", y, (logits,), vjp)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalisation over the last axis (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _emit("layer_norm", xhat, (x,), vjp)


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalise along the last axis; zero vectors are rejected."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero-norm vector")
    y = xd / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), vjp)


# ---------------------------------------------------------------------------
# gated linear recurrence

def gated_recurrence(gates: Tensor, drive: Tensor, transition: Tensor) -> Tensor:
    """States of ``h_k = gates_k * (transition @ h_{k-1} + drive_k)`` with ``h_0 = 0``.

    ``gates`` and ``drive`` have shape ``[..., N, d_s]``; the recurrence runs
    along the token axis (second to last). One pass, Θ(N) work.
    """
    _same_shape("gated_recurrence", gates, drive)
    if drive.ndim < 2:
        raise ShapeError(f"recurrence input needs [..., N, d_s], got {drive.shape}")
    n, ds = drive.shape[-2:]
    if n < 1:
        raise InvalidArgumentError("empty token sequence")
    if transition.shape != (ds, ds):
        raise ShapeError(f"transition must be {(ds, ds)}, got {transition.shape}")

    lead = drive.shape[:-2]
    g = gates.data.reshape(-1, n, ds)
    a = drive.data.reshape(-1, n, ds)
    w = transition.data
    wt = w.T
    b = a.shape[0]
    h = np.empty_like(a)
    pre = np.empty_like(a)
    prev = np.zeros((b, ds), dtype=a.dtype)
    for k in range(n):
        p = prev @ wt
        p += a[:, k]
        pre[:, k] = p
        prev = g[:, k] * p
        h[:, k] = prev

    def vjp(gh):
        gh = gh.reshape(b, n, ds)
        d_gate = np.empty_like(g)
        d_drive = np.empty_like(a)
        d_w = np.zeros_like(w)
        carry = np.zeros((b, ds), dtype=a.dtype)
        for k in range(n - 1, -1, -1):
            dh = gh[:, k] + carry
            d_gate[:, k] = dh * pre[:, k]
            dp = dh * g[:, k]
            d_drive[:, k] = dp
            if k > 0:
                d_w += dp.T @ h[:, k - 1]
            carry = dp @ w
        return (d_gate.reshape(gates.shape), d_drive.reshape(drive.shape), d_w)

    return _emit("gated_recurrence", h.reshape(*lead, n, ds), (gates, drive, transition), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` receives the input tensors and must return a scalar tensor. The
    relative error of one element is ``|a - c| / max(|a|, |c|, 1e-12)``.
    """
    if not 0 < eps <= 1e-2:
        raise InvalidArgumentError(f"eps must lie in (0, 1e-2], got {eps}")
    inputs = list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*inputs)
        if out.size != 1:
            raise InvalidArgumentError(f"grad_check needs a scalar function, got shape {out.shape}")
        if out.tape_node is None:
            analytic = [np.zeros_like(t.data) for t in inputs]
        else:
            tape.backward(out)
            analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        worst = 0.0
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = flat[i]
                fp = f(*inputs).item()
                flat[i] = orig - eps
                lo = flat[i]
                fm = f(*inputs).item()
                flat[i] = orig
                cd = (fp - fm) / (hi - lo)  # the step actually represented, not 2 * eps
                denom = max(abs(a_flat[i]), abs(cd), 1e-12)
                worst = max(worst, abs(a_flat[i] - cd) / denom)
        return worst
    finally:
        for t, (rg, gr) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = gr


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
