"""Dense float64 tensor substrate with a reverse-mode gradient tape.

Every differentiable primitive the pipeline uses is registered here as a
(forward, backward) pair.  Forward evaluation records a Wengert list on a
``Tape``; replaying the list reproduces the recorded values bitwise, and
``Tape.gradients`` walks it in reverse to accumulate adjoints.  Training
runs in 64-bit floats throughout; checkpoint serialization narrows to
32-bit (see checkpoint module).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericsWarning

NORM_EPS = 1e-12


class ShapeError(DataError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")


class GradientError(DataError):
    """Invalid gradient request (non-scalar loss, foreign node, ...)."""


def _as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


class _Op:
    __slots__ = ("name", "forward", "backward")

    def __init__(self, name, forward, backward):
        self.name = name
        self.forward = forward
        self.backward = backward


_OPS: dict[str, _Op] = {}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    _OPS[name] = _Op(name, forward, backward)


def registered_ops() -> list[str]:
    """Names of all primitives with a recorded adjoint."""
    return sorted(_OPS)


# ---------------------------------------------------------------------------
# primitive definitions
# ---------------------------------------------------------------------------

def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, f"operands {a.shape} vs {b.shape}")


_register(
    "add",
    lambda a, b: a + b,
    lambda g, ins, out, aux: (g, g),
)

_register(
    "sub",
    lambda a, b: a - b,
    lambda g, ins, out, aux: (g, -g),
)

_register(
    "mul",
    lambda a, b: a * b,
    lambda g, ins, out, aux: (g * ins[1], g * ins[0]),
)


def _add_n_fwd(*xs):
    acc = xs[0].copy()
    for x in xs[1:]:
        acc += x
    return acc


_register(
    "add_n",
    _add_n_fwd,
    lambda g, ins, out, aux: tuple(g for _ in ins),
)

# aux = (scale, shift): y = scale * x + shift
_register(
    "affine",
    lambda x, *, aux: aux[0] * x + aux[1],
    lambda g, ins, out, aux: (aux[0] * g,),
)

_register(
    "matmul",
    lambda a, b: a @ b,
    lambda g, ins, out, aux: (g @ ins[1].T, ins[0].T @ g),
)

# x: (n, d) or (d,), b: (d,)
_register(
    "add_bias",
    lambda x, b: x + b,
    lambda g, ins, out, aux: (g, g if g.ndim == 1 else g.sum(axis=0)),
)

# x: (n, d), c: (n,) -> x * c[:, None]
_register(
    "mul_colvec",
    lambda x, c: x * c[:, None],
    lambda g, ins, out, aux: (g * ins[1][:, None], (g * ins[0]).sum(axis=1)),
)

_register(
    "rowsum",
    lambda x: x.sum(axis=1),
    lambda g, ins, out, aux: (np.broadcast_to(g[:, None], ins[0].shape).copy(),),
)

_register(
    "sum_all",
    lambda x: np.asarray(x.sum()),
    lambda g, ins, out, aux: (np.full_like(ins[0], float(g)),),
)

_register(
    "mean_all",
    lambda x: np.asarray(x.mean()),
    lambda g, ins, out, aux: (np.full_like(ins[0], float(g) / ins[0].size),),
)

# mean-pool over rows: (n, d) -> (d,)
_register(
    "mean_rows",
    lambda x: x.mean(axis=0),
    lambda g, ins, out, aux: (np.broadcast_to(g / ins[0].shape[0], ins[0].shape).copy(),),
)


def _softmax_rows_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_bwd(g, ins, out, aux):
    s = out
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


_register("softmax_rows", _softmax_rows_fwd, _softmax_rows_bwd)


def _sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_register(
    "sigmoid",
    _sigmoid_fwd,
    lambda g, ins, out, aux: (g * out * (1.0 - out),),
)

_register(
    "tanh",
    np.tanh,
    lambda g, ins, out, aux: (g * (1.0 - out * out),),
)

_register(
    "exp",
    np.exp,
    lambda g, ins, out, aux: (g * out,),
)

_register(
    "log",
    np.log,
    lambda g, ins, out, aux: (g / ins[0],),
)

# aux = (lo, hi); gradient passes only strictly inside the interval
_register(
    "clip",
    lambda x, *, aux: np.clip(x, aux[0], aux[1]),
    lambda g, ins, out, aux: (g * ((ins[0] > aux[0]) & (ins[0] < aux[1])),),
)


def _l2_normalize_rows_fwd(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        warnings.warn("l2_normalize_rows: zero-norm row", NumericsWarning, stacklevel=2)
    return x / (norms + NORM_EPS)


def _l2_normalize_rows_bwd(g, ins, out, aux):
    x = ins[0]
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    guarded = norms + NORM_EPS
    dot = (g * x).sum(axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    correction = np.where(norms > 0.0, x * dot / (safe * guarded * guarded), 0.0)
    return (g / guarded - correction,)


_register("l2_normalize_rows", _l2_normalize_rows_fwd, _l2_normalize_rows_bwd)


def _cosine_rows_fwd(a, b):
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        warnings.warn("cosine_rows: zero vector, contribution is 0", NumericsWarning, stacklevel=2)
    return (a * b).sum(axis=1) / ((na + NORM_EPS) * (nb + NORM_EPS))


def _cosine_rows_bwd(g, ins, out, aux):
    a, b = ins
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    ga_, gb_ = na + NORM_EPS, nb + NORM_EPS
    dot = (a * b).sum(axis=1, keepdims=True)
    safe_a = np.where(na > 0.0, na, 1.0)
    safe_b = np.where(nb > 0.0, nb, 1.0)
    da = b / (ga_ * gb_) - np.where(na > 0.0, a * dot / (ga_ * ga_ * gb_ * safe_a), 0.0)
    db = a / (ga_ * gb_) - np.where(nb > 0.0, b * dot / (gb_ * gb_ * ga_ * safe_b), 0.0)
    gcol = g[:, None]
    return (np.where(na > 0.0, gcol * da, 0.0), np.where(nb > 0.0, gcol * db, 0.0))


_register("cosine_rows", _cosine_rows_fwd, _cosine_rows_bwd)


def _concat_cols_fwd(*xs):
    return np.concatenate(xs, axis=1)


def _concat_cols_bwd(g, ins, out, aux):
    grads = []
    lo = 0
    for x in ins:
        hi = lo + x.shape[1]
        grads.append(g[:, lo:hi])
        lo = hi
    return tuple(grads)


_register("concat_cols", _concat_cols_fwd, _concat_cols_bwd)


def _slice_cols_bwd(g, ins, out, aux):
    z = np.zeros_like(ins[0])
    z[:, aux[0]:aux[1]] = g
    return (z,)


_register(
    "slice_cols",
    lambda x, *, aux: x[:, aux[0]:aux[1]].copy(),
    _slice_cols_bwd,
)

_register(
    "reshape",
    lambda x, *, aux: x.reshape(aux),
    lambda g, ins, out, aux: (g.reshape(ins[0].shape),),
)


def _gather_rows_bwd(g, ins, out, aux):
    z = np.zeros_like(ins[0])
    np.add.at(z, aux, g)
    return (z,)


_register(
    "gather_rows",
    lambda x, *, aux: x[aux],
    _gather_rows_bwd,
)


def _segment_sum_fwd(x, *, aux):
    seg, nseg = aux
    out = np.zeros((nseg,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, seg, x)
    return out


_register(
    "segment_sum",
    _segment_sum_fwd,
    lambda g, ins, out, aux: (g[aux[0]],),
)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "value", "inputs", "aux")

    def __init__(self, op, value, inputs, aux):
        self.op = op
        self.value = value
        self.inputs = inputs
        self.aux = aux


@dataclass(frozen=True)
class Var:
    """Handle to one tape node."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return self.tape.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.tape.sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return self.tape.mul(self, other)


class Tape:
    """Wengert list of primitive ops with parameter bindings.

    A tape is confined to one logical thread.  Recorded values are
    immutable; ``replay`` re-executes the list and must reproduce every
    value bitwise.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self.bindings: dict[str, int] = {}

    # -- construction -------------------------------------------------

    def _push(self, op: str, value: np.ndarray, inputs: tuple[int, ...], aux=None) -> Var:
        self._nodes.append(_Node(op, value, inputs, aux))
        return Var(self, len(self._nodes) - 1)

    def leaf(self, value) -> Var:
        return self._push("leaf", _as_f64(value), ())

    def param(self, store: "ParamStore", name: str) -> Var:
        """Bind a named parameter; repeated binds return the same node."""
        if name in self.bindings:
            return Var(self, self.bindings[name])
        var = self._push("leaf", store[name], ())
        self.bindings[name] = var.idx
        return var

    def _apply(self, op: str, inputs: Sequence[Var], aux=None) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise GradientError(f"{op}: input belongs to a different tape")
        vals = tuple(self._nodes[v.idx].value for v in inputs)
        fwd = _OPS[op].forward
        out = fwd(*vals, aux=aux) if aux is not None else fwd(*vals)
        return self._push(op, np.asarray(out, dtype=np.float64), tuple(v.idx for v in inputs), aux)

    # -- primitives ----------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        _same_shape("add", a.value, b.value)
        return self._apply("add", (a, b))

    def sub(self, a: Var, b: Var) -> Var:
        _same_shape("sub", a.value, b.value)
        return self._apply("sub", (a, b))

    def mul(self, a: Var, b: Var) -> Var:
        _same_shape("mul", a.value, b.value)
        return self._apply("mul", (a, b))

    def add_n(self, xs: Sequence[Var]) -> Var:
        for x in xs[1:]:
            _same_shape("add_n", xs[0].value, x.value)
        return self._apply("add_n", tuple(xs))

    def affine(self, x: Var, scale: float, shift: float = 0.0) -> Var:
        return self._apply("affine", (x,), aux=(float(scale), float(shift)))

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", f"{av.shape} @ {bv.shape}")
        return self._apply("matmul", (a, b))

    def add_bias(self, x: Var, b: Var) -> Var:
        xv, bv = x.value, b.value
        if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
            raise ShapeError("add_bias", f"{xv.shape} + bias {bv.shape}")
        return self._apply("add_bias", (x, b))

    def mul_colvec(self, x: Var, c: Var) -> Var:
        if x.value.ndim != 2 or c.value.shape != (x.value.shape[0],):
            raise ShapeError("mul_colvec", f"{x.value.shape} * col {c.value.shape}")
        return self._apply("mul_colvec", (x, c))

    def rowsum(self, x: Var) -> Var:
        if x.value.ndim != 2:
            raise ShapeError("rowsum", f"{x.value.shape} is not 2-D")
        return self._apply("rowsum", (x,))

    def sum_all(self, x: Var) -> Var:
        return self._apply("sum_all", (x,))

    def mean_all(self, x: Var) -> Var:
        return self._apply("mean_all", (x,))

    def mean_rows(self, x: Var) -> Var:
        if x.value.ndim != 2:
            raise ShapeError("mean_rows", f"{x.value.shape} is not 2-D")
        return self._apply("mean_rows", (x,))

    def softmax_rows(self, x: Var) -> Var:
        if x.value.ndim != 2:
            raise ShapeError("softmax_rows", f"{x.value.shape} is not 2-D")
        return self._apply("softmax_rows", (x,))

    def sigmoid(self, x: Var) -> Var:
        return self._apply("sigmoid", (x,))

    def tanh(self, x: Var) -> Var:
        return self._apply("tanh", (x,))

    def exp(self, x: Var) -> Var:
        return self._apply("exp", (x,))

    def log(self, x: Var) -> Var:
        return self._apply("log", (x,))

    def clip(self, x: Var, lo: float, hi: float) -> Var:
        return self._apply("clip", (x,), aux=(float(lo), float(hi)))

    def l2_normalize_rows(self, x: Var) -> Var:
        if x.value.ndim != 2:
            raise ShapeError("l2_normalize_rows", f"{x.value.shape} is not 2-D")
        return self._apply("l2_normalize_rows", (x,))

    def cosine_rows(self, a: Var, b: Var) -> Var:
        if a.value.ndim != 2 or a.value.shape != b.value.shape:
            raise ShapeError("cosine_rows", f"{a.value.shape} vs {b.value.shape}")
        return self._apply("cosine_rows", (a, b))

    def concat_cols(self, xs: Sequence[Var]) -> Var:
        rows = {x.value.shape[0] for x in xs}
        if any(x.value.ndim != 2 for x in xs) or len(rows) != 1:
            raise ShapeError("concat_cols", f"{[x.value.shape for x in xs]}")
        return self._apply("concat_cols", tuple(xs))

    def slice_cols(self, x: Var, lo: int, hi: int) -> Var:
        if x.value.ndim != 2 or not (0 <= lo <= hi <= x.value.shape[1]):
            raise ShapeError("slice_cols", f"[{lo}:{hi}] of {x.value.shape}")
        return self._apply("slice_cols", (x,), aux=(lo, hi))

    def reshape(self, x: Var, shape: tuple[int, ...]) -> Var:
        if int(np.prod(shape)) != x.value.size:
            raise ShapeError("reshape", f"{x.value.shape} -> {shape}")
        return self._apply("reshape", (x,), aux=tuple(shape))

    def gather_rows(self, x: Var, idx: np.ndarray) -> Var:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.value.shape[0])):
            raise ShapeError("gather_rows", f"index {idx.shape} into {x.value.shape}")
        return self._apply("gather_rows", (x,), aux=idx)

    def segment_sum(self, x: Var, seg: np.ndarray, nseg: int) -> Var:
        seg = np.asarray(seg, dtype=np.intp)
        if seg.shape != (x.value.shape[0],) or (seg.size and seg.max() >= nseg):
            raise ShapeError("segment_sum", f"segments {seg.shape} for {x.value.shape}")
        return self._apply("segment_sum", (x,), aux=(seg, int(nseg)))

    # -- composites ------------------------------------------------------

    def linear(self, x: Var, w: Var, b: Var | None = None) -> Var:
        """x @ w (+ b); weights use (in, out) layout."""
        out = self.matmul(x, w)
        return self.add_bias(out, b) if b is not None else out

    def mlp2(self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
        """Two-layer perceptron with tanh hidden activation."""
        return self.linear(self.tanh(self.linear(x, w1, b1)), w2, b2)

    # -- evaluation ------------------------------------------------------

    def replay(
        self,
        overrides: dict[str, np.ndarray] | None = None,
        upto: int | None = None,
    ) -> np.ndarray:
        """Re-execute the recorded list; returns the final node's value.

        ``overrides`` substitutes the values of bound parameters before
        replaying (used by the finite-difference checker); ``upto`` picks
        a node other than the last.
        """
        patched: dict[int, np.ndarray] = {}
        if overrides:
            for name, arr in overrides.items():
                if name not in self.bindings:
                    raise GradientError(f"replay override for unbound parameter {name!r}")
                patched[self.bindings[name]] = _as_f64(arr)
        last = upto if upto is not None else len(self._nodes) - 1
        values: list[np.ndarray] = []
        for i, node in enumerate(self._nodes[: last + 1]):
            if node.op == "leaf":
                values.append(patched.get(i, node.value))
                continue
            fwd = _OPS[node.op].forward
            ins = tuple(values[j] for j in node.inputs)
            out = fwd(*ins, aux=node.aux) if node.aux is not None else fwd(*ins)
            values.append(np.asarray(out, dtype=np.float64))
        return values[last]

    def gradients(self, loss: Var) -> dict[str, np.ndarray]:
        """Adjoint of every bound parameter w.r.t. a scalar loss.

        Parameters bound to the tape but not on the loss path get zero
        adjoints.
        """
        if loss.tape is not self:
            raise GradientError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise GradientError(f"loss must be scalar, got shape {loss.value.shape}")
        if not np.isfinite(loss.value).all():
            raise GradientError("loss is not finite")
        adj: list[np.ndarray | None] = [None] * len(self._nodes)
        adj[loss.idx] = np.ones_like(self._nodes[loss.idx].value)
        for i in range(loss.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self._nodes[i]
            if node.op == "leaf":
                continue
            ins = tuple(self._nodes[j].value for j in node.inputs)
            grads = _OPS[node.op].backward(g, ins, node.value, node.aux)
            for j, gj in zip(node.inputs, grads):
                if adj[j] is None:
                    adj[j] = gj.copy()
                else:
                    adj[j] = adj[j] + gj
        out = {}
        for name, idx in self.bindings.items():
            a = adj[idx]
            out[name] = np.zeros_like(self._nodes[idx].value) if a is None else a
        return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float64 tensors with gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise DataError(f"parameter {name!r} already exists")
        self._values[name] = _as_f64(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        self._values[name] = _as_f64(value)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return sorted(self._values)

    def items(self):
        for name in self.names():
            yield name, self._values[name]

    def zero_grads(self) -> None:
        self._grads = {}

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        self._grads = dict(grads)

    def grad(self, name: str) -> np.ndarray:
        return self._grads.get(name, np.zeros_like(self._values[name]))

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self.items():
            other.add(name, value.copy())
        return other


# ---------------------------------------------------------------------------
# plain-array helpers and verification
# ---------------------------------------------------------------------------

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two 1-D vectors with the zero-vector guard."""
    a = _as_f64(a).ravel()
    b = _as_f64(b).ravel()
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine: zero vector, returning 0", NumericsWarning, stacklevel=2)
        return 0.0
    return float((a @ b) / ((na + NORM_EPS) * (nb + NORM_EPS)))


def l2_normalize(a: np.ndarray) -> np.ndarray:
    """Unit-normalize a 1-D vector, guarding the zero vector."""
    a = _as_f64(a).ravel()
    n = float(np.sqrt(a @ a))
    if n == 0.0:
        warnings.warn("l2_normalize: zero vector", NumericsWarning, stacklevel=2)
    return a / (n + NORM_EPS)


def finite_diff_check(
    fn: Callable[[ParamStore], Var],
    store: ParamStore,
    h: float = 1e-5,
    names: Sequence[str] | None = None,
) -> float:
    """Max relative error between tape adjoints and central differences.

    ``fn`` must deterministically build a scalar loss on a fresh tape,
    reading parameters only through ``tape.param``; perturbed values are
    then evaluated by replaying that tape.  Error per coordinate is
    ``|analytic - (fn(p+h)-fn(p-h))/2h| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise DataError("finite_diff_check: h must be positive")
    loss = fn(store)
    if not np.isfinite(loss.value).all():
        raise DataError("finite_diff_check: fn produced a non-finite value")
    tape = loss.tape
    analytic = tape.gradients(loss)
    max_rel = 0.0
    for name in (names if names is not None else sorted(analytic)):
        grad = analytic[name].ravel()
        work = store[name].copy()
        flat = work.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(tape.replay({name: work}, upto=loss.idx))
            flat[j] = orig - h
            fm = float(tape.replay({name: work}, upto=loss.idx))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DataError("finite_diff_check: fn produced a non-finite value")
            fd = (fp - fm) / (2.0 * h)
            rel = abs(grad[j] - fd) / max(1.0, abs(grad[j]))
            if rel > max_rel:
                max_rel = rel
    return max_rel
