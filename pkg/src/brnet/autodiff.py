"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside a
tape, ops evaluate eagerly and nothing is retained, which is what inference
uses.  Broadcasting is limited to a 0-d operand in the arithmetic ops.

    >>> x = Tensor(2.0, requires_grad=True)
    >>> y = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     z = x * y
    >>> [float(g) for g in backward(tape, z, [x, y])]
    [3.0, 2.0]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractViolation, NonFiniteError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], tuple]

_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass(eq=False)
class Tape:
    """Ordered record of executed primitive ops.

    Nodes are appended as ops run, so every node's inputs are produced by an
    earlier node or are leaves.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd: BackwardFn) -> Tensor:
    result = Tensor(out)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(op, inputs, result, bwd))
    return result


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: Tape, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``output`` with respect to each tensor in ``wrt``.

    Nodes are visited once each in reverse tape order, and contributions to a
    shared input are summed in that order, so results are deterministic.
    Tensors the output does not depend on receive zero gradients.
    """
    if output.size != 1:
        raise ContractViolation(f"backward seed must be scalar, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# arithmetic


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _t(a), _t(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y, lambda g: (_fit(g * y, a.shape), _fit(g * x, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    x, y = a.data, b.data
    out = x / y
    return _emit(
        "div", (a, b), out,
        lambda g: (_fit(g / y, a.shape), _fit(-g * out / y, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    d = x.data
    return _emit("square", (x,), d * d, lambda g: (2.0 * d * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", (x,), out, lambda g: (g / (2.0 * out),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(
        "mean", (x,), np.asarray(x.data.mean()),
        lambda g: (np.full(shape, float(g) / n),),
    )


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor, as a 1-D tensor."""
    if x.data.ndim != 2 or not 0 <= j < x.shape[1]:
        raise ContractViolation(f"column {j} of tensor with shape {x.shape}")
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _emit("column", (x,), x.data[:, j].copy(), bwd)


def take_rows(x: Tensor, idx) -> Tensor:
    """Rows ``idx`` of a tensor along axis 0; repeats are allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ContractViolation(f"row indices out of range for shape {x.shape}")
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", (x,), x.data[idx], bwd)


# ---------------------------------------------------------------------------
# network primitives


def conv2x2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-size 2x2 convolution (cross-correlation).

    The input is replicate-padded by one row at the bottom and one column at
    the right, so output[i, j] reads input rows i, i+1 and columns j, j+1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ContractViolation("conv2x2 expects input [B,C,H,W], kernel [O,C,2,2], bias [O]")
    B, C, H, W = x.shape
    O = kernel.shape[0]
    if kernel.shape != (O, C, 2, 2) or bias.shape != (O,):
        raise ContractViolation(
            f"conv2x2: kernel {kernel.shape} / bias {bias.shape} incompatible with input {x.shape}"
        )
    if H < 2 or W < 2:
        raise ContractViolation(f"conv2x2 needs H, W >= 2, got {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
    # cols[b, q*C + c, h*W + w] = xp[b, c, h+di, w+dj] with q = 2*di + dj
    cols = np.stack(
        [xp[:, :, 0:H, 0:W], xp[:, :, 0:H, 1:], xp[:, :, 1:, 0:W], xp[:, :, 1:, 1:]], axis=1
    ).reshape(B, 4 * C, H * W)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(O, 4 * C)
    out = np.matmul(kmat, cols) + bias.data[None, :, None]

    def bwd(g):
        g = g.reshape(B, O, H * W)
        gk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
        gk = gk.reshape(O, 2, 2, C).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2))
        if not x.requires_grad:
            return None, gk, gb
        gcols = np.matmul(kmat.T, g).reshape(B, 4, C, H, W)
        gxp = np.zeros((B, C, H + 1, W + 1))
        gxp[:, :, 0:H, 0:W] += gcols[:, 0]
        gxp[:, :, 0:H, 1:] += gcols[:, 1]
        gxp[:, :, 1:, 0:W] += gcols[:, 2]
        gxp[:, :, 1:, 1:] += gcols[:, 3]
        gx = gxp[:, :, :H, :W].copy()
        gx[:, :, H - 1, :] += gxp[:, :, H, :W]
        gx[:, :, :, W - 1] += gxp[:, :, :H, W]
        gx[:, :, H - 1, W - 1] += gxp[:, :, H, W]
        return gx, gk, gb

    return _emit("conv2x2", (x, kernel, bias), out.reshape(B, O, H, W), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling.

    Gradient goes to the first maximal cell of each window in row-major order.
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"maxpool2x2 expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ContractViolation(f"maxpool2x2 needs even H and W, got {H}x{W}")
    d = x.data
    cells = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for cell in cells:
        m = (cell == out) & ~taken
        taken |= m
        masks.append(m)

    def bwd(g):
        gx = np.zeros((B, C, H, W))
        gx[:, :, 0::2, 0::2] = g * masks[0]
        gx[:, :, 0::2, 1::2] = g * masks[1]
        gx[:, :, 1::2, 0::2] = g * masks[2]
        gx[:, :, 1::2, 1::2] = g * masks[3]
        return (gx,)

    return _emit("maxpool2x2", (x,), out, bwd)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ContractViolation("dense expects input [B,D], weight [D',D], bias [D']")
    if weight.shape[1] != x.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ContractViolation(
            f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape} do not agree"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data
    return _emit(
        "dense", (x, weight, bias), out,
        lambda g: (g @ wd if x.requires_grad else None, g.T @ xd, g.sum(axis=0)),
    )


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{op}: non-finite input")


def relu(x: Tensor) -> Tensor:
    _check_finite(x, "relu")
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    _check_finite(x, "tanh")
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    _check_finite(x, "sigmoid")
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(x: Tensor, fn: str) -> Tensor:
    try:
        return ACTIVATIONS[fn](x)
    except KeyError:
        raise ContractViolation(f"unknown activation {fn!r}") from None


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractViolation(f"global_avg_pool expects [B,C,H,W] with H,W >= 1, got {x.shape}")
    B, C, H, W = x.shape
    return _emit(
        "global_avg_pool", (x,), x.data.mean(axis=(2, 3)),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),),
    )


def _std(x: Tensor, eps: float) -> Tensor:
    d = x.data
    c = d - d.mean()
    out = np.sqrt(np.mean(c * c) + eps)
    n = d.shape[0]
    return _emit("std", (x,), np.asarray(out), lambda g: (float(g) * c / (n * out),))


def batch_stats(x: Tensor, eps_std: float = 0.0) -> tuple[Tensor, Tensor]:
    """Population mean and ``sqrt(var + eps_std)`` of a 1-D batch."""
    if x.data.ndim != 1 or x.shape[0] < 2:
        raise ContractViolation(f"batch_stats needs a 1-D batch of size >= 2, got {x.shape}")
    return mean_all(x), _std(x, eps_std)


def softmax_cross_entropy(logits: Tensor, onehot: Tensor, reduction: str = "sum") -> Tensor:
    """Cross-entropy of softmax(logits) against target distributions.

    ``reduction="sum"`` adds over samples; ``"mean"`` averages.
    """
    if logits.data.ndim != 2 or logits.shape != onehot.shape:
        raise ContractViolation(f"logits {logits.shape} and targets {onehot.shape} must be [B,M]")
    if logits.shape[1] < 2:
        raise ContractViolation("softmax_cross_entropy needs M >= 2 classes")
    if reduction not in ("sum", "mean"):
        raise ContractViolation(f"unknown reduction {reduction!r}")
    y = onehot.data
    if np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ContractViolation("target rows must be probability distributions")
    _check_finite(logits, "softmax_cross_entropy")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    per_row = -(y * logp).sum(axis=1)
    scale = 1.0 if reduction == "sum" else 1.0 / z.shape[0]
    probs = np.exp(logp)
    return _emit(
        "softmax_cross_entropy", (logits, onehot), np.asarray(per_row.sum() * scale),
        lambda g: (float(g) * scale * (probs - y), None),
    )


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    """Adam optimizer state for one named parameter set.

    ``step`` updates the parameter arrays in place.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if params.keys() != grads.keys():
            raise ContractViolation("adam_step: parameter and gradient names differ")
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ContractViolation(
                    f"adam_step: gradient for {name} has shape {g.shape}, expected {params[name].shape}"
                )
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f`` w.r.t. each array (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(
    f: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
    seed: Optional[int] = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    A non-scalar ``f`` is reduced to a scalar with a fixed random projection.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = f(*[Tensor(a) for a in arrays])
    proj = None
    if probe.size != 1:
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*ts: Tensor) -> Tensor:
        out = f(*ts)
        return out if proj is None else sum_all(mul(out, Tensor(proj)))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = scalar(*leaves)
    analytic = backward(tape, out, leaves)
    numeric = numerical_gradient(scalar, arrays, h)
    return max(max_relative_error(a, n, floor) for a, n in zip(analytic, numeric))
