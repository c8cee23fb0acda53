"""Tape-based reverse-mode differentiation over numpy float64 arrays.

Only the handful of primitives the score function needs are provided. Every
primitive is a pair of rules in ``FORWARD`` / ``BACKWARD``; a ``Tape`` records
nodes in evaluation order so it can be walked backwards or replayed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


class ContractViolation(ValueError):
    """Inputs do not satisfy an operation's preconditions."""


class InvariantError(AssertionError):
    """A runtime invariant (normalisation, ordering) failed."""


class NumericFault(ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = "non-finite output"):
        super().__init__(f"{op}: {detail}")
        self.op = op


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: np.ndarray
    saved: Any = None
    requires_grad: bool = False
    param: Parameter | None = None


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __neg__(self):
        return mul(self, self.tape.constant(-1.0))

    def __repr__(self) -> str:
        node = self.tape.nodes[self.id]
        return f"Var({node.kind}#{self.id}, shape={node.value.shape})"


class Tape:
    """Append-only record of a forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        arr = np.asarray(value, dtype=np.float64)
        return self._push(Node("const", (), {}, arr))

    def watch(self, param: Parameter, trainable: bool = True) -> Var:
        """Leaf bound to ``param``; gradients land in ``param.grad`` when trainable."""
        return self._push(Node("param", (), {}, param.value, requires_grad=trainable, param=param))

    def record(self, kind: str, inputs: Sequence[Var], **attrs) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ContractViolation(f"{kind}: input belongs to another tape")
        vals = [self.nodes[v.id].value for v in inputs]
        out, saved = FORWARD[kind](vals, attrs)
        if not np.all(np.isfinite(out)):
            raise NumericFault(kind)
        rg = any(self.nodes[v.id].requires_grad for v in inputs)
        return self._push(Node(kind, tuple(v.id for v in inputs), attrs, out, saved, rg))

    def replay(self) -> None:
        """Recompute every derived node from the current leaf values."""
        for node in self.nodes:
            if node.kind == "param":
                node.value = node.param.value
            elif node.kind != "const":
                vals = [self.nodes[i].value for i in node.inputs]
                node.value, node.saved = FORWARD[node.kind](vals, node.attrs)
                if not np.all(np.isfinite(node.value)):
                    raise NumericFault(node.kind)


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Accumulate d(output)/d(leaf) into every trainable Parameter reached.

    Returns the gradient of every node that received one, keyed by node id.
    """
    if output.tape is not tape:
        raise ContractViolation("backward: output belongs to another tape")
    out_node = tape.nodes[output.id]
    if out_node.value.size != 1:
        raise ContractViolation(f"backward: output must be scalar, got shape {out_node.value.shape}")
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(out_node.value)}
    for nid in range(output.id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or not node.requires_grad:
            continue
        if node.kind == "param":
            node.param.grad += g
            continue
        if node.kind == "const":
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        in_grads = BACKWARD[node.kind](g, vals, node.value, node.saved, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return grads


# ---------------------------------------------------------------------------
# primitive rules
# ---------------------------------------------------------------------------

FORWARD: dict[str, Callable] = {}
BACKWARD: dict[str, Callable] = {}


def _rule(kind: str):
    def deco(fn_pair):
        fwd, bwd = fn_pair()
        FORWARD[kind] = fwd
        BACKWARD[kind] = bwd
        return fn_pair
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


@_rule("add")
def _add():
    def fwd(v, a):
        _check_broadcast("add", *v)
        return v[0] + v[1], None

    def bwd(g, v, out, saved, a):
        return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)
    return fwd, bwd


@_rule("sub")
def _sub():
    def fwd(v, a):
        _check_broadcast("sub", *v)
        return v[0] - v[1], None

    def bwd(g, v, out, saved, a):
        return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)
    return fwd, bwd


@_rule("mul")
def _mul():
    def fwd(v, a):
        _check_broadcast("mul", *v)
        return v[0] * v[1], None

    def bwd(g, v, out, saved, a):
        return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)
    return fwd, bwd


@_rule("matmul")
def _matmul():
    def fwd(v, a):
        x, w = v
        if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ContractViolation(f"matmul: cannot multiply {x.shape} by {w.shape}")
        return x @ w, None

    def bwd(g, v, out, saved, a):
        x, w = v
        gx = g @ w.T
        x2 = x.reshape(-1, x.shape[-1])
        gw = x2.T @ g.reshape(-1, w.shape[1])
        return gx, gw
    return fwd, bwd


@_rule("concat")
def _concat():
    def fwd(v, a):
        axis = a["axis"]
        ref = list(v[0].shape)
        for x in v[1:]:
            other = list(x.shape)
            if len(other) != len(ref):
                raise ContractViolation(f"concat: rank mismatch {v[0].shape} vs {x.shape}")
            ax = axis % len(ref)
            if other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
                raise ContractViolation(f"concat: shape mismatch {v[0].shape} vs {x.shape}")
        return np.concatenate(v, axis=axis), [x.shape[axis] for x in v]

    def bwd(g, v, out, sizes, a):
        cuts = np.cumsum(sizes)[:-1]
        return np.split(g, cuts, axis=a["axis"])
    return fwd, bwd


@_rule("tanh")
def _tanh():
    def fwd(v, a):
        return np.tanh(v[0]), None

    def bwd(g, v, out, saved, a):
        return (g * (1.0 - out * out),)
    return fwd, bwd


@_rule("sigmoid")
def _sigmoid():
    def fwd(v, a):
        return 0.5 * (np.tanh(0.5 * v[0]) + 1.0), None

    def bwd(g, v, out, saved, a):
        return (g * out * (1.0 - out),)
    return fwd, bwd


@_rule("leaky_relu")
def _leaky_relu():
    def fwd(v, a):
        x = v[0]
        return np.where(x > 0, x, a["alpha"] * x), None

    def bwd(g, v, out, saved, a):
        return (g * np.where(v[0] > 0, 1.0, a["alpha"]),)
    return fwd, bwd


@_rule("relu")
def _relu():
    def fwd(v, a):
        return np.maximum(v[0], 0.0), None

    def bwd(g, v, out, saved, a):
        return (g * (v[0] > 0),)
    return fwd, bwd


@_rule("log")
def _log():
    def fwd(v, a):
        x = v[0]
        if np.any(x <= 0):
            raise NumericFault("log", "non-positive input")
        return np.log(x), None

    def bwd(g, v, out, saved, a):
        return (g / v[0],)
    return fwd, bwd


@_rule("softmax")
def _softmax():
    def fwd(v, a):
        x = v[0]
        mask = a.get("mask")
        if x.ndim == 0 or x.shape[-1] == 0:
            raise ContractViolation("softmax: input must be a nonempty vector")
        if mask is not None:
            if mask.shape != x.shape:
                raise ContractViolation(f"softmax: mask shape {mask.shape} != {x.shape}")
            if not np.all(mask.any(axis=-1)):
                raise ContractViolation("softmax: a row has no unmasked entries")
            z = np.where(mask, x, -np.inf)
        else:
            z = x
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, v, p, saved, a):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)
    return fwd, bwd


@_rule("conv1d")
def _conv1d():
    # x: (B, L, F), w: (k, F, D) -> (B, L-k+1, D), no padding
    def fwd(v, a):
        x, w = v
        if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
            raise ContractViolation(f"conv1d: bad shapes x{x.shape} w{w.shape}")
        k = w.shape[0]
        B, L, F = x.shape
        if L < k:
            raise ContractViolation(f"conv1d: sequence length {L} shorter than filter width {k}")
        T = L - k + 1
        win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)  # (B, T, F, k)
        cols = win.transpose(0, 1, 3, 2).reshape(B * T, k * F)
        out = (cols @ w.reshape(k * F, -1)).reshape(B, T, -1)
        return out, cols

    def bwd(g, v, out, cols, a):
        x, w = v
        k, F, D = w.shape
        B, T, _ = g.shape
        g2 = g.reshape(B * T, D)
        gw = (cols.T @ g2).reshape(k, F, D)
        gcols = (g2 @ w.reshape(k * F, D).T).reshape(B, T, k, F)
        gx = np.zeros_like(x)
        for j in range(k):
            gx[:, j:j + T, :] += gcols[:, :, j, :]
        return gx, gw
    return fwd, bwd


@_rule("maxpool")
def _maxpool():
    # max over axis 1 of (B, T, D), only the first valid[b] positions count
    def fwd(v, a):
        x = v[0]
        valid = a["valid"]
        if x.ndim != 3 or valid.shape != (x.shape[0],):
            raise ContractViolation(f"maxpool: bad shapes x{x.shape} valid{valid.shape}")
        if np.any(valid < 1) or np.any(valid > x.shape[1]):
            raise ContractViolation("maxpool: valid lengths out of range")
        live = np.arange(x.shape[1])[None, :, None] < valid[:, None, None]
        idx = np.where(live, x, -np.inf).argmax(axis=1)  # (B, D)
        out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
        return out, idx

    def bwd(g, v, out, idx, a):
        gx = np.zeros_like(v[0])
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)
    return fwd, bwd


@_rule("cosine")
def _cosine():
    # row-wise cosine over the last axis; zero-norm rows give 0
    def fwd(v, a):
        x, y = v
        if x.shape != y.shape:
            raise ContractViolation(f"cosine: shape mismatch {x.shape} vs {y.shape}")
        nx = np.sqrt((x * x).sum(axis=-1))
        ny = np.sqrt((y * y).sum(axis=-1))
        denom = nx * ny
        zero = denom == 0
        if np.any(zero):
            log.warning("cosine: %d zero-norm row(s), similarity set to 0", int(zero.sum()))
        safe = np.where(zero, 1.0, denom)
        c = np.where(zero, 0.0, (x * y).sum(axis=-1) / safe)
        return c, (nx, ny, zero)

    def bwd(g, v, c, saved, a):
        x, y = v
        nx, ny, zero = saved
        nxs = np.where(zero, 1.0, nx)[..., None]
        nys = np.where(zero, 1.0, ny)[..., None]
        cc = c[..., None]
        gg = np.where(zero, 0.0, g)[..., None]
        gx = gg * (y / (nxs * nys) - cc * x / (nxs * nxs))
        gy = gg * (x / (nxs * nys) - cc * y / (nys * nys))
        return gx, gy
    return fwd, bwd


@_rule("dropout")
def _dropout():
    def fwd(v, a):
        mask, rate = a["mask"], a["rate"]
        if mask.shape != v[0].shape:
            raise ContractViolation(f"dropout: mask shape {mask.shape} != {v[0].shape}")
        scale = mask / (1.0 - rate)
        return v[0] * scale, scale

    def bwd(g, v, out, scale, a):
        return (g * scale,)
    return fwd, bwd


@_rule("gather")
def _gather():
    def fwd(v, a):
        try:
            return v[0][a["index"]], None
        except IndexError as exc:
            raise ContractViolation(f"gather: {exc}") from None

    def bwd(g, v, out, saved, a):
        gx = np.zeros_like(v[0])
        np.add.at(gx, a["index"], g)
        return (gx,)
    return fwd, bwd


@_rule("reshape")
def _reshape():
    def fwd(v, a):
        try:
            return v[0].reshape(a["shape"]), None
        except ValueError as exc:
            raise ContractViolation(f"reshape: {exc}") from None

    def bwd(g, v, out, saved, a):
        return (g.reshape(v[0].shape),)
    return fwd, bwd


@_rule("sum")
def _sum():
    def fwd(v, a):
        return np.asarray(v[0].sum()), None

    def bwd(g, v, out, saved, a):
        return (np.broadcast_to(g, v[0].shape).copy(),)
    return fwd, bwd


@_rule("mean")
def _mean():
    def fwd(v, a):
        if v[0].size == 0:
            raise ContractViolation("mean: empty input")
        return np.asarray(v[0].mean()), None

    def bwd(g, v, out, saved, a):
        return (np.full(v[0].shape, float(g) / v[0].size),)
    return fwd, bwd


# ---------------------------------------------------------------------------
# op functions
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    return a.tape.record("add", [a, b])


def sub(a: Var, b: Var) -> Var:
    return a.tape.record("sub", [a, b])


def mul(a: Var, b: Var) -> Var:
    return a.tape.record("mul", [a, b])


def matmul(x: Var, w: Var) -> Var:
    return x.tape.record("matmul", [x, w])


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    if not xs:
        raise ContractViolation("concat: no inputs")
    return xs[0].tape.record("concat", list(xs), axis=axis)


def tanh(x: Var) -> Var:
    return x.tape.record("tanh", [x])


def sigmoid(x: Var) -> Var:
    return x.tape.record("sigmoid", [x])


def leaky_relu(x: Var, alpha: float = LEAKY_SLOPE) -> Var:
    return x.tape.record("leaky_relu", [x], alpha=alpha)


def relu(x: Var) -> Var:
    return x.tape.record("relu", [x])


def log_(x: Var) -> Var:
    return x.tape.record("log", [x])


def softmax(x: Var, mask: np.ndarray | None = None) -> Var:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
    return x.tape.record("softmax", [x], mask=None if mask is None else np.asarray(mask, dtype=bool))


def conv1d(x: Var, w: Var) -> Var:
    return x.tape.record("conv1d", [x, w])


def maxpool(x: Var, valid: np.ndarray) -> Var:
    return x.tape.record("maxpool", [x], valid=np.asarray(valid, dtype=np.int64))


def cosine(x: Var, y: Var) -> Var:
    return x.tape.record("cosine", [x, y])


def dropout(x: Var, mask: np.ndarray, rate: float) -> Var:
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout: rate {rate} outside [0, 1)")
    return x.tape.record("dropout", [x], mask=np.asarray(mask, dtype=np.float64), rate=rate)


def gather(x: Var, index) -> Var:
    """``x[index]`` with numpy indexing semantics; repeated indices accumulate."""
    return x.tape.record("gather", [x], index=index)


def reshape(x: Var, shape) -> Var:
    return x.tape.record("reshape", [x], shape=tuple(shape))


def sum_(x: Var) -> Var:
    return x.tape.record("sum", [x])


def mean(x: Var) -> Var:
    return x.tape.record("mean", [x])


# ---------------------------------------------------------------------------
# optimisation and checking
# ---------------------------------------------------------------------------

def global_grad_norm(params: Sequence[Parameter]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def sgd_step(params: Sequence[Parameter], lr: float, clip: float) -> float:
    """Clip the global gradient norm to ``clip``, take one SGD step, zero grads.

    Returns the gradient norm measured before clipping. Non-finite gradients
    abort the step: values are left untouched, grads are zeroed, and
    ``NumericFault`` is raised.
    """
    if lr <= 0 or clip <= 0:
        raise ContractViolation(f"sgd_step: lr and clip must be positive (lr={lr}, clip={clip})")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            for q in params:
                q.zero_grad()
            raise NumericFault("sgd_step", f"non-finite gradient in {p.name}")
    norm = global_grad_norm(params)
    scale = clip / norm if norm > clip else 1.0
    for p in params:
        p.value -= lr * scale * p.grad
        p.zero_grad()
    return norm


def check_gradients(
    fn: Callable[..., Var],
    point: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Largest relative error between taped and central-difference gradients.

    ``fn(tape, *vars)`` must return a scalar Var. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``; any non-finite value makes
    the result ``inf``.
    """
    if eps <= 0:
        raise ContractViolation("check_gradients: eps must be positive")
    params = [Parameter(f"x{i}", np.array(p, dtype=np.float64, copy=True)) for i, p in enumerate(point)]

    def evaluate() -> float:
        tape = Tape()
        out = fn(tape, *[tape.watch(p) for p in params])
        return float(out.value)

    tape = Tape()
    out = fn(tape, *[tape.watch(p) for p in params])
    backward(tape, out)

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        p.zero_grad()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                hi = evaluate()
                flat[i] = orig - eps
                lo = evaluate()
            except NumericFault:
                return float("inf")
            finally:
                flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                return float("inf")
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
