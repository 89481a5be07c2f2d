"""Dense-matrix reverse-mode automatic differentiation.

Every value is a 2-D float64 array wrapped in a :class:`Tensor`.  Operations
whose inputs require gradients are appended to the active :class:`Tape`;
:func:`backward` walks that tape in reverse creation order, which is a valid
topological order because an op can only consume tensors that already exist.

Operations on tensors that do not require gradients are evaluated eagerly and
never recorded, so frozen models cost nothing on the tape.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParseError

LOG_FLOOR = 1e-12

_local = threading.local()


class Tape:
    """Ordered record of differentiable operations for one training context."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False
        self.generation = 0

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            # a new forward pass starts a fresh generation
            self.reset()
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False
        self.generation += 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def active_tape() -> Tape:
    """Return the tape new operations are recorded on (thread-local)."""
    return _stack()[-1]


class no_grad:
    """Context manager that evaluates operations without recording them."""

    def __enter__(self):
        self.prev = getattr(_local, "no_grad", False)
        _local.no_grad = True
        return self

    def __exit__(self, *exc):
        _local.no_grad = self.prev
        return False


def grad_enabled() -> bool:
    return not getattr(_local, "no_grad", False)


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got {arr.ndim}-D data")
    return arr


class Tensor:
    """A 2-D float64 matrix that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_tape", "_gen")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._tape: Tape | None = None
        self._gen = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _op(name: str, out: np.ndarray, parents: tuple, backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{name}: non-finite output")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    needs = False
    if grad_enabled():
        for p in parents:
            if p.requires_grad:
                needs = True
                break
    t.requires_grad = needs
    if needs:
        t._parents = parents
        t._backward = backward
        tape = active_tape()
        tape.record(t)
        t._tape = tape
        t._gen = tape.generation
    else:
        t._parents = ()
        t._backward = None
        t._tape = None
    return t


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(name, a: np.ndarray, b: np.ndarray):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _op("matmul", ad @ bd, (a, b), back)


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _op("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return _op("add", a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.data.shape, b.data.shape
    return _op("sub", a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _op("mul", ad * bd, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _op("scale", a.data * c, (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = _wrap(a)
    return _op("shift", a.data + c, (a,), lambda g: (g,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> Tensor:
    a = _wrap(a)
    pos = a.data > 0
    return _op("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _op("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    """Natural log with the argument clamped below at ``LOG_FLOOR``."""
    a = _wrap(a)
    x = a.data
    live = x > LOG_FLOOR
    safe = np.where(live, x, LOG_FLOOR)
    return _op("log", np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def absolute(a) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.data)
    return _op("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    inside = (a.data > lo) & (a.data < hi)
    return _op("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = _wrap(a)
    shape = a.data.shape
    return _op("sum", np.array([[a.data.sum()]]), (a,),
               lambda g: (np.full(shape, g[0, 0]),))


def mean(a) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape
    n = a.data.size
    return _op("mean", np.array([[a.data.mean()]]), (a,),
               lambda g: (np.full(shape, g[0, 0] / n),))


def mean_rows(a) -> Tensor:
    """Column-wise mean over rows: (n, c) -> (1, c)."""
    a = _wrap(a)
    n = a.data.shape[0]
    shape = a.data.shape
    return _op("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
               lambda g: (np.broadcast_to(g / n, shape).copy(),))


def concat_cols(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"concat_cols: row counts {a.shape[0]} and {b.shape[0]}")
    k = a.data.shape[1]
    return _op("concat_cols", np.concatenate([a.data, b.data], axis=1), (a, b),
               lambda g: (g[:, :k], g[:, k:]))


def mask(a, m) -> Tensor:
    """Entrywise (or broadcast row/column) multiply by a constant 0/1 mask."""
    a = _wrap(a)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1) if m.shape[0] == a.data.shape[0] else m.reshape(1, -1)
    _check_broadcast("mask", a.data, m)
    shape = a.data.shape
    return _op("mask", a.data * m, (a,), lambda g: (_unbroadcast(g * m, shape),))


def softmax(a) -> Tensor:
    """Row-wise softmax."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _op("softmax", s, (a,), back)


def weighted_bce(p, target, pos_weight: float) -> Tensor:
    """Mean over all entries of ``-(w*t*log p + (1-t)*log(1-p))``.

    ``target`` is a constant matrix; both logs clamp their argument at
    ``LOG_FLOOR``.
    """
    p = _wrap(p)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != p.data.shape:
        raise DimensionError(f"weighted_bce: prediction {p.shape} vs target {t.shape}")
    x = p.data
    q = 1.0 - x
    live_p = x > LOG_FLOOR
    live_q = q > LOG_FLOOR
    sp = np.where(live_p, x, LOG_FLOOR)
    sq = np.where(live_q, q, LOG_FLOOR)
    n = x.size
    val = -(pos_weight * t * np.log(sp) + (1.0 - t) * np.log(sq)).sum() / n

    def back(g):
        d = -pos_weight * t * np.where(live_p, 1.0 / sp, 0.0) \
            + (1.0 - t) * np.where(live_q, 1.0 / sq, 0.0)
        return (g[0, 0] * d / n,)

    return _op("weighted_bce", np.array([[val]]), (p,), back)


def mse(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        d = 2.0 * g[0, 0] * diff / n
        return d, -d

    return _op("mse", np.array([[np.mean(diff * diff)]]), (a, b), back)


def softmax_cross_entropy(logits, target: int | Sequence[int]) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    logits = _wrap(logits)
    rows, classes = logits.data.shape
    idx = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if idx.shape[0] != rows:
        raise DimensionError(f"softmax_cross_entropy: {rows} rows but {idx.shape[0]} targets")
    if (idx < 0).any() or (idx >= classes).any():
        raise ContractError(f"class target out of range [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    r = np.arange(rows)
    val = -logp[r, idx].mean()

    def back(g):
        d = np.exp(logp)
        d[r, idx] -= 1.0
        return (g[0, 0] * d / rows,)

    return _op("softmax_cross_entropy", np.array([[val]]), (logits,), back)


def gcn_norm(w) -> Tensor:
    """``D^-1/2 (W + I) D^-1/2`` with ``D`` the row sums of ``W + I``.

    Differentiable in the (soft) edge weights.  Symmetry is not checked here;
    see :func:`cider.graph.normalize_adjacency` for the validated entry point.
    """
    w = _wrap(w)
    n, m = w.data.shape
    if n != m:
        raise DimensionError(f"gcn_norm needs a square matrix, got {w.shape}")
    mat = w.data + np.eye(n)
    deg = mat.sum(axis=1)
    if (deg <= 0).any():
        raise NumericError("gcn_norm: non-positive degree")
    s = deg ** -0.5
    out = s[:, None] * mat * s[None, :]

    def back(g):
        gm = g * s[:, None] * s[None, :]
        # d/ds_i through both the row and column factor
        gs = (g * mat * s[None, :]).sum(axis=1) + (g * mat * s[:, None]).sum(axis=0)
        gdeg = gs * (-0.5) * deg ** -1.5
        return (gm + gdeg[:, None],)

    return _op("gcn_norm", out, (w,), back)


# ---------------------------------------------------------------------------
# backward / optimizer
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        g = np.ones((1, 1))
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    tape = loss._tape
    if tape.consumed or loss._gen != tape.generation:
        raise ContractError("backward() already ran on this tape; reset it before reuse")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    tape.consumed = True


@dataclass
class Adam:
    """Adam with classic L2 weight decay (``g + weight_decay * theta``)."""

    params: list[Tensor]
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            names = [self.params[i].name or f"#{i}" for i in missing]
            raise ContractError(f"adam_step: no gradient for parameter(s) {names}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("adam_step: parameters do not match optimizer state")
    state.step()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Entrywise ``|a-n| / max(|a|, |n|, floor)``.

    ``floor`` is 1% of the largest gradient magnitude in the block (or 1 when
    everything is zero), so entries far below the gradient's own scale are not
    judged by finite-difference truncation noise alone.
    """
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    floor = 1e-2 * scale_ if scale_ > 0 else 1.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | Mapping[str, Tensor],
               step: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central differences for every parameter entry.

    ``f`` must rebuild the expression from scratch on each call and be
    deterministic (freeze any random draws inside it).
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named}
    for _, p in named:
        p.grad = None

    def value() -> float:
        with Tape():
            return f().item()

    per_param = {}
    for name, p in named:
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + step
            hi = value()
            p.data[idx] = orig - step
            lo = value()
            p.data[idx] = orig
            num[idx] = (hi - lo) / (2.0 * step)
        per_param[name] = float(relative_error(analytic[name], num).max(initial=0.0))
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(max_rel_error=worst, tol=tol, per_param=per_param)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray],
                    descriptor: Mapping | None = None) -> None:
    """Write tensors as JSON; floats use Python's round-trip repr (<= 17 digits)."""
    doc = {"format_version": FORMAT_VERSION, "tensors": {}}
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else _as_array(arr)
        doc["tensors"][name] = {"shape": list(arr.shape),
                                "data": [float(v) for v in arr.ravel()]}
    if descriptor is not None:
        doc["descriptor"] = dict(descriptor)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc
    if not isinstance(doc, dict) or "tensors" not in doc:
        raise ParseError("not a checkpoint document", path=path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    out = {}
    for name, entry in doc["tensors"].items():
        rows, cols = entry["shape"]
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != rows * cols:
            raise ContractError(f"{path}: tensor {name} has {data.size} values for shape {entry['shape']}")
        out[name] = data.reshape(rows, cols)
    return out, doc.get("descriptor")


def parameters_of(objs: Iterable) -> list[Tensor]:
    return [t for t in objs if isinstance(t, Tensor) and t.requires_grad]
