"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its inputs and a closure mapping the output gradient to
input gradients. ``backward`` walks the tape once in reverse topological
order. Ops whose inputs do not require gradients record nothing, so frozen
parameters cost no backward work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

BackwardFn = Callable[[np.ndarray], Tuple[np.ndarray, ...]]


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; all route through the module-level ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _node(out: np.ndarray, parents: Sequence[Tensor], op: str, fn: BackwardFn) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _node(A @ B, (a, b), "matmul", back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _node(A * B, (a, b), "mul", lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C bias along axis 1 of an (N, C, ...) tensor."""
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def back(g):
        return g, g.sum(axis=axes)

    return _node(x.data + bias.data.reshape(view), (x, bias), "add_bias", back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _node(out, (a,), "reshape", lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), "permute", lambda g: (g.transpose(inverse),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"labels shape {y.shape} does not match logits {logits.shape}")
    if n and (y.min() < 0 or y.max() >= c):
        raise ValidationError(f"label index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, y])

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _node(np.array(loss), (logits,), "xent", back)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def im2col(x: Tensor, k: int, pad: int = 0) -> Tensor:
    """Unfold (N, I, H, W) into rows of (I*k*k) patches, one per output pixel.

    Row order is (n, y, x); column order is (i, k1, k2).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"im2col expects N x I x H x W, got {x.shape}")
    n, ch, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho, wo = hp - k + 1, wp - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((n, ho, wo, ch, k, k))
    for k1 in range(k):
        for k2 in range(k):
            cols[:, :, :, :, k1, k2] = xp[:, :, k1:k1 + ho, k2:k2 + wo].transpose(0, 2, 3, 1)
    cols = cols.reshape(n * ho * wo, ch * k * k)

    def back(g):
        g6 = g.reshape(n, ho, wo, ch, k, k)
        gx = np.zeros((n, ch, hp, wp))
        for k1 in range(k):
            for k2 in range(k):
                gx[:, :, k1:k1 + ho, k2:k2 + wo] += g6[:, :, :, :, k1, k2].transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + w]
        return (gx,)

    return _node(cols, (x,), "im2col", back)


def conv2d_im2col(x: Tensor, kernel: Tensor, pad: int = 0) -> Tensor:
    """Stride-1 cross-correlation; ``kernel`` is laid out I x O x K x K."""
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be I x O x K x K, got {kernel.shape}")
    if x.data.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    n, ch, h, w = x.shape
    _, out_ch, k, _ = kernel.shape
    cols = im2col(x, k, pad)
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    wmat = reshape(permute(kernel, (0, 2, 3, 1)), (ch * k * k, out_ch))
    out = matmul(cols, wmat)
    return permute(reshape(out, (n, ho, wo, out_ch)), (0, 3, 1, 2))


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2 expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"input {h}x{w} too small for 2x2 pooling")
    win = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :2 * h2, :2 * w2] = gw
        return (gx,)

    return _node(out, (x,), "max_pool2", back)


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf that requires grad.

    Leaves with ``requires_grad=False`` (frozen parameters) get no entry.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], cfg: SgdConfig | float) -> None:
    """Plain SGD, ``p <- p - lr * g``, applied in place to each parameter.

    ``cfg`` may be a bare float so a zero learning rate (a no-op step) is
    expressible; ``SgdConfig`` itself insists on a positive rate.
    """
    lr = cfg.learning_rate if isinstance(cfg, SgdConfig) else float(cfg)
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ContractError(f"grad shape {np.shape(g)} does not match param {p.shape}")
        p.data = p.data - lr * g


def collect_grads(params: Iterable[Tensor], grad_map: Dict[Tensor, np.ndarray]):
    """Align a gradient map with ``params``; params absent from the map are skipped."""
    ps, gs = [], []
    for p in params:
        g = grad_map.get(p)
        if g is not None:
            ps.append(p)
            gs.append(g)
    return ps, gs
