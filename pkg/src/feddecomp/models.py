"""Reference architectures built from additively decomposed weights.

Each weight is held as ``sigma + B @ A``: ``sigma`` is the full-rank shared
matrix, ``B @ A`` the low-rank personalized correction. Convolution kernels
(I x O x K x K) carry factors of shape (I*K) x r and r x (O*K); the product
is folded back into a kernel with entry (i*K + k1, o*K + k2) landing at
kernel index (i, o, k1, k2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

FC = "fc"
CONV = "conv"

PHASES = ("tau", "sigma", "joint", "frozen")


def rank_for(kind: str, in_dim: int, out_dim: int, kernel: int, ratio: float) -> int:
    if not (0.0 < ratio <= 1.0):
        raise ValidationError(f"rank ratio must lie in (0, 1], got {ratio}")
    if in_dim < 1 or out_dim < 1 or kernel < 1:
        raise ValidationError(f"layer dimensions must be >= 1, got I={in_dim} O={out_dim} K={kernel}")
    base = min(in_dim, out_dim)
    if kind == CONV:
        base *= kernel
    elif kind != FC:
        raise ValidationError(f"unknown layer kind {kind!r}")
    # guard floor against 0.6*5 = 2.9999999999999996 style representation error
    return max(1, math.floor(ratio * base + 1e-9))


@dataclass
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    kernel: int = 1
    decompose: bool = True

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == CONV:
            return (self.in_dim, self.out_dim, self.kernel, self.kernel)
        return (self.in_dim, self.out_dim)


@dataclass
class ModelSpec:
    arch: str
    input_shape: Tuple[int, ...]
    num_classes: int
    layers: List[LayerSpec]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if not self.layers:
            raise ValidationError("model needs at least one layer")
        if self.layers[-1].out_dim != self.num_classes:
            raise DimensionError(
                f"last layer emits {self.layers[-1].out_dim} outputs for {self.num_classes} classes")
        if self.arch == "mlp":
            if self.layers[0].in_dim != int(np.prod(self.input_shape)):
                raise DimensionError("first layer width does not match input size")
            for a, b in zip(self.layers, self.layers[1:]):
                if a.out_dim != b.in_dim:
                    raise DimensionError(f"layer widths disagree: {a.out_dim} -> {b.in_dim}")


def mlp_spec(in_dim: int, num_classes: int, hidden: Sequence[int] = (64, 32)) -> ModelSpec:
    dims = [in_dim, *hidden, num_classes]
    layers = [LayerSpec(FC, i, o) for i, o in zip(dims, dims[1:])]
    return ModelSpec("mlp", (in_dim,), num_classes, layers)


def cnn_spec(input_shape: Tuple[int, int, int], num_classes: int) -> ModelSpec:
    """conv(C->8) relu pool, conv(8->16) relu pool, fc(->classes); 3x3 kernels, pad 1."""
    ch, h, w = input_shape
    if h < 4 or w < 4:
        raise DimensionError(f"cnn needs at least 4x4 inputs, got {h}x{w}")
    flat = 16 * (h // 2 // 2) * (w // 2 // 2)
    layers = [LayerSpec(CONV, ch, 8, 3), LayerSpec(CONV, 8, 16, 3), LayerSpec(FC, flat, num_classes)]
    return ModelSpec("cnn", tuple(input_shape), num_classes, layers)


@dataclass
class DecomposedParam:
    sigma: Tensor
    factor_b: Tensor
    factor_a: Tensor
    inner_rank: int
    kind: str = FC

    @property
    def kernel(self) -> int:
        return self.sigma.shape[2] if self.kind == CONV else 1


@dataclass
class ModelParams:
    weights: List[DecomposedParam]
    biases: List[Tensor] = field(default_factory=list)

    def tensors(self) -> List[Tensor]:
        """Every parameter tensor in canonical order."""
        out = []
        for w in self.weights:
            out += [w.sigma, w.factor_b, w.factor_a]
        return out + list(self.biases)

    def get(self, key: Tuple[str, int]) -> Tensor:
        name, k = key
        if name == "bias":
            return self.biases[k]
        return getattr(self.weights[k], name)

    def copy(self) -> "ModelParams":
        ws = [DecomposedParam(w.sigma.detach(), w.factor_b.detach(), w.factor_a.detach(),
                              w.inner_rank, w.kind) for w in self.weights]
        return ModelParams(ws, [b.detach() for b in self.biases])


def init_decomposed(spec: ModelSpec, r_l: float, r_c: float, rng: np.random.Generator) -> ModelParams:
    weights, biases = [], []
    for layer in spec.layers:
        k = layer.kernel
        ratio = r_c if layer.kind == CONV else r_l
        r = rank_for(layer.kind, layer.in_dim, layer.out_dim, k, ratio)
        fan_in = layer.in_dim * k * k
        bound = math.sqrt(6.0 / fan_in)
        sigma = rng.uniform(-bound, bound, size=layer.weight_shape)
        a_cols = layer.out_dim * k
        b_rows = layer.in_dim * k
        factor_a = rng.standard_normal((r, a_cols)) / math.sqrt(r)
        weights.append(DecomposedParam(Tensor(sigma), Tensor(np.zeros((b_rows, r))),
                                       Tensor(factor_a), r, layer.kind))
        biases.append(Tensor(np.zeros(layer.out_dim)))
    return ModelParams(weights, biases)


def fold_conv(tau_star: Tensor, in_dim: int, out_dim: int, k: int) -> Tensor:
    """(I*K) x (O*K) -> I x O x K x K, row (i*K+k1), col (o*K+k2) -> [i, o, k1, k2]."""
    return T.permute(T.reshape(tau_star, (in_dim, k, out_dim, k)), (0, 2, 1, 3))


def tau(p: DecomposedParam) -> Tensor:
    prod = T.matmul(p.factor_b, p.factor_a)
    if p.kind == CONV:
        i, o, k, _ = p.sigma.shape
        return fold_conv(prod, i, o, k)
    return prod


def effective_weight(p: DecomposedParam) -> Tensor:
    return T.add(p.sigma, tau(p))


def set_phase(params: ModelParams, phase: str) -> None:
    """Choose which tensors receive gradients.

    tau: only B and A; sigma: sigma and biases; joint: everything;
    frozen: nothing (evaluation).
    """
    if phase not in PHASES:
        raise ValidationError(f"unknown phase {phase!r}")
    train_sigma = phase in ("sigma", "joint")
    train_tau = phase in ("tau", "joint")
    for w in params.weights:
        w.sigma.requires_grad = train_sigma
        w.factor_b.requires_grad = train_tau
        w.factor_a.requires_grad = train_tau
    for b in params.biases:
        b.requires_grad = train_sigma


def trainable(params: ModelParams) -> List[Tensor]:
    return [t for t in params.tensors() if t.requires_grad]


def forward(spec: ModelSpec, params: ModelParams, x) -> Tensor:
    x = T.as_tensor(x)
    expected = tuple(spec.input_shape)
    if x.shape[1:] != expected:
        raise DimensionError(f"batch shape {x.shape} does not match model input {expected}")
    if spec.arch == "mlp":
        h = x
        last = len(spec.layers) - 1
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = T.add_bias(T.matmul(h, effective_weight(w)), b)
            if k < last:
                h = T.relu(h)
        return h
    if spec.arch == "cnn":
        h = x
        for w, b in zip(params.weights[:-1], params.biases[:-1]):
            h = T.add_bias(T.conv2d_im2col(h, effective_weight(w), pad=1), b)
            h = T.max_pool2(T.relu(h))
        h = T.reshape(h, (h.shape[0], -1))
        return T.add_bias(T.matmul(h, effective_weight(params.weights[-1])), params.biases[-1])
    raise ValidationError(f"unknown architecture {spec.arch!r}")


def loss(logits: Tensor, labels) -> Tensor:
    return T.softmax_cross_entropy(logits, labels)


def flatten_sigma(params: ModelParams) -> np.ndarray:
    """Shared weight matrices concatenated in layer order (biases excluded)."""
    return np.concatenate([w.sigma.data.ravel() for w in params.weights])


def flatten_tau(params: ModelParams) -> np.ndarray:
    """Materialized ``B @ A`` per layer, folded to weight shape, concatenated."""
    return np.concatenate([tau(w).data.ravel() for w in params.weights])


def unflatten_sigma(params: ModelParams, flat: np.ndarray) -> List[np.ndarray]:
    need = sum(w.sigma.size for w in params.weights)
    if flat.size != need:
        raise DimensionError(f"flat vector has {flat.size} entries, model needs {need}")
    out, pos = [], 0
    for w in params.weights:
        n = w.sigma.size
        out.append(flat[pos:pos + n].reshape(w.sigma.shape))
        pos += n
    return out


def count_params(tensors: Sequence[Tensor]) -> int:
    return int(sum(t.size for t in tensors))
