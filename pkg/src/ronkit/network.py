"""Layer intermediate representation and forward propagation.

Feature maps are vectorized channel-major, then row-major over the spatial
grid: flat index = (c * height + row) * width + col, i.e. the C-order flatten
of a (channels, height, width) array.  Every activation batch is an
N x features float64 array with one sample per row, so forward passes are
permutation-equivariant over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MemoryGuardError, ShapeError

# Largest number of entries a lowered convolution matrix may occupy.
DEFAULT_LOWERING_CAP = 2**26

__all__ = [
    "ActivationKind",
    "Dense",
    "Conv2d",
    "BatchNorm",
    "MaxPool",
    "Activation",
    "Residual",
    "TeacherNetwork",
    "StudentStage",
    "StudentNetwork",
    "forward_teacher",
    "forward_student",
    "conv_to_dense",
    "fold_batchnorm",
    "layer_output_shape",
    "flat_size",
]


def _vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size and not np.all(np.isfinite(x)):
        raise ShapeError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class ActivationKind:
    """Element-wise, non-decreasing activation function.

    Supported names: relu, leaky_relu (param = slope), elu (param = alpha),
    identity.  Non-negative parameters keep every variant non-decreasing,
    which is what lets row sampling and the activation commute.
    """

    name: str
    param: float = 0.0

    _VALID = ("relu", "leaky_relu", "elu", "identity")

    def __post_init__(self):
        if self.name not in self._VALID:
            raise ShapeError(f"unknown activation '{self.name}'")
        if self.name in ("leaky_relu", "elu") and self.param < 0.0:
            raise ShapeError(f"{self.name} parameter must be >= 0 to stay monotone")

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def leaky_relu(cls, slope: float = 0.01):
        return cls("leaky_relu", slope)

    @classmethod
    def elu(cls, alpha: float = 1.0):
        return cls("elu", alpha)

    @classmethod
    def identity(cls):
        return cls("identity")

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.name == "relu":
            return np.maximum(x, 0.0)
        if self.name == "leaky_relu":
            return np.where(x >= 0.0, x, self.param * x)
        if self.name == "elu":
            return np.where(x >= 0.0, x, self.param * np.expm1(np.minimum(x, 0.0)))
        return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Dense:
    """Affine layer y = W x + b with W of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got ndim={w.ndim}")
        if not np.all(np.isfinite(w)):
            raise ShapeError("dense weight contains non-finite entries")
        b = (
            np.zeros(w.shape[0])
            if self.bias is None
            else _vector(self.bias, "dense bias")
        )
        if b.size != w.shape[0]:
            raise ShapeError(f"dense bias length {b.size} != output dim {w.shape[0]}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class Conv2d:
    """2-D convolution with kernel (c_out, c_in, k_h, k_w), zero padding."""

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got ndim={k.ndim}")
        if not np.all(np.isfinite(k)):
            raise ShapeError("conv kernel contains non-finite entries")
        if self.stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ShapeError("conv padding must be >= 0")
        b = (
            np.zeros(k.shape[0])
            if self.bias is None
            else _vector(self.bias, "conv bias")
        )
        if b.size != k.shape[0]:
            raise ShapeError(f"conv bias length {b.size} != out channels {k.shape[0]}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class BatchNorm:
    """Inference-mode batch normalization with per-channel statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        g = _vector(self.gamma, "gamma")
        b = _vector(self.beta, "beta")
        m = _vector(self.mean, "mean")
        v = _vector(self.var, "var")
        if not (g.size == b.size == m.size == v.size):
            raise ShapeError("batch-norm parameter vectors must share one length")
        if np.any(v < 0.0):
            raise ShapeError("batch-norm variance must be non-negative")
        if self.eps <= 0.0:
            raise ShapeError("batch-norm eps must be positive")
        for name, val in (("gamma", g), ("beta", b), ("mean", m), ("var", v)):
            object.__setattr__(self, name, val)

    @property
    def channels(self) -> int:
        return int(self.gamma.size)


@dataclass(frozen=True)
class MaxPool:
    """2x2 max pooling with stride 2; requires even spatial dims."""

    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window != 2 or self.stride != 2:
            raise ShapeError("only 2x2/2 max pooling is supported")


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind


@dataclass(frozen=True)
class Residual:
    """Parallel branches whose outputs are summed; empty branch = shortcut."""

    branches: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "branches", tuple(tuple(b) for b in self.branches)
        )
        if not self.branches:
            raise ShapeError("residual block needs at least one branch")


def flat_size(shape) -> int:
    if isinstance(shape, (int, np.integer)):
        return int(shape)
    c, h, w = shape
    return int(c) * int(h) * int(w)


def _spatial(shape, what: str):
    if isinstance(shape, (int, np.integer)):
        raise ShapeError(f"{what} needs a (channels, height, width) input, got flat {shape}")
    return tuple(int(v) for v in shape)


def layer_output_shape(layer, in_shape):
    """Output shape of one layer; raises ShapeError on inconsistency."""
    if isinstance(layer, Dense):
        if flat_size(in_shape) != layer.weight.shape[1]:
            raise ShapeError(
                f"dense expects {layer.weight.shape[1]} inputs, got {flat_size(in_shape)}"
            )
        return int(layer.weight.shape[0])
    if isinstance(layer, Conv2d):
        c, h, w = _spatial(in_shape, "conv")
        cout, cin, kh, kw = layer.kernel.shape
        if c != cin:
            raise ShapeError(f"conv expects {cin} channels, got {c}")
        hout = (h + 2 * layer.padding - kh) // layer.stride + 1
        wout = (w + 2 * layer.padding - kw) // layer.stride + 1
        if hout < 1 or wout < 1:
            raise ShapeError(f"conv output collapses on {h}x{w} input")
        return (cout, hout, wout)
    if isinstance(layer, BatchNorm):
        if isinstance(in_shape, (int, np.integer)):
            if int(in_shape) != layer.channels:
                raise ShapeError(
                    f"batch norm has {layer.channels} channels, input dim {in_shape}"
                )
            return int(in_shape)
        c, h, w = _spatial(in_shape, "batch norm")
        if c != layer.channels:
            raise ShapeError(f"batch norm has {layer.channels} channels, input has {c}")
        return (c, h, w)
    if isinstance(layer, MaxPool):
        c, h, w = _spatial(in_shape, "max pool")
        if h % 2 or w % 2:
            raise ShapeError(
                f"max pool needs even spatial dims, got {h}x{w}"
            )
        return (c, h // 2, w // 2)
    if isinstance(layer, Activation):
        return in_shape
    if isinstance(layer, Residual):
        outs = []
        for branch in layer.branches:
            shape = in_shape
            for sub in branch:
                shape = layer_output_shape(sub, shape)
            outs.append(shape)
        first = outs[0]
        if any(flat_size(o) != flat_size(first) or o != first for o in outs):
            raise ShapeError(f"residual branch outputs disagree: {outs}")
        return first
    raise ShapeError(f"unknown layer type {type(layer).__name__}")


def _chain_shapes(layers, in_shape, where: str = "layer"):
    shapes = [in_shape]
    for i, layer in enumerate(layers):
        try:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        except ShapeError as exc:
            raise ShapeError(f"{where} {i}: {exc}") from exc
    return shapes


@dataclass
class TeacherNetwork:
    """Ordered layer list with a validated shape chain."""

    input_shape: object
    layers: list
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.input_shape, (int, np.integer)):
            self.input_shape = tuple(int(v) for v in self.input_shape)
        else:
            self.input_shape = int(self.input_shape)
        self.layers = list(self.layers)
        self.shapes = _chain_shapes(self.layers, self.input_shape)

    @property
    def input_dim(self) -> int:
        return flat_size(self.input_shape)

    @property
    def output_dim(self) -> int:
        return flat_size(self.shapes[-1])


def _conv_forward(x: np.ndarray, shape, layer: Conv2d) -> np.ndarray:
    c, h, w = shape
    n = x.shape[0]
    cout, cin, kh, kw = layer.kernel.shape
    p, s = layer.padding, layer.stride
    hout = (h + 2 * p - kh) // s + 1
    wout = (w + 2 * p - kw) // s + 1
    x4 = x.reshape(n, c, h, w)
    if p:
        x4 = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x4, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :hout, :wout]
    out = np.einsum("nchwab,ocab->nohw", win, layer.kernel, optimize=True)
    out += layer.bias[None, :, None, None]
    return out.reshape(n, cout * hout * wout)


def _maxpool_forward(x: np.ndarray, shape) -> np.ndarray:
    c, h, w = shape
    n = x.shape[0]
    x6 = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return x6.max(axis=(3, 5)).reshape(n, c * (h // 2) * (w // 2))


def _batchnorm_forward(x: np.ndarray, shape, layer: BatchNorm) -> np.ndarray:
    scale = layer.gamma / np.sqrt(layer.var + layer.eps)
    shift = layer.beta - scale * layer.mean
    if isinstance(shape, (int, np.integer)):
        return x * scale + shift
    c, h, w = shape
    reps = h * w
    return x * np.repeat(scale, reps) + np.repeat(shift, reps)


def _apply_layer(layer, x: np.ndarray, in_shape):
    if isinstance(layer, Dense):
        return x @ layer.weight.T + layer.bias
    if isinstance(layer, Conv2d):
        return _conv_forward(x, in_shape, layer)
    if isinstance(layer, BatchNorm):
        return _batchnorm_forward(x, in_shape, layer)
    if isinstance(layer, MaxPool):
        return _maxpool_forward(x, in_shape)
    if isinstance(layer, Activation):
        return layer.kind.apply(x)
    if isinstance(layer, Residual):
        total = None
        for branch in layer.branches:
            y, shape = x, in_shape
            for sub in branch:
                y = _apply_layer(sub, y, shape)
                shape = layer_output_shape(sub, shape)
            total = y if total is None else total + y
        return total
    raise ShapeError(f"unknown layer type {type(layer).__name__}")


def _as_batch(batch, dim: int) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D (samples x features), got ndim={x.ndim}")
    if x.shape[1] != dim:
        raise ShapeError(f"batch has {x.shape[1]} features, network expects {dim}")
    if x.size and not np.all(np.isfinite(x)):
        raise ShapeError("batch contains non-finite entries")
    return x


def forward_teacher(net: TeacherNetwork, batch, upto: int | None = None) -> np.ndarray:
    """Propagate a batch through layers 0..upto (inclusive; default all).

    Returns the vectorized outputs of the designated layer for every sample.
    """
    x = _as_batch(batch, net.input_dim)
    if upto is None:
        upto = len(net.layers) - 1
    if not -1 <= upto < len(net.layers):
        raise ShapeError(f"layer index {upto} out of range for {len(net.layers)} layers")
    for i in range(upto + 1):
        x = _apply_layer(net.layers[i], x, net.shapes[i])
    return x


def conv_to_dense(layer: Conv2d, in_shape, cap: int = DEFAULT_LOWERING_CAP) -> Dense:
    """Lower a convolution to an explicit Dense layer on vectorized maps.

    The returned matrix M satisfies M @ vec(x) = vec(conv(x)) for every input,
    using the channel-major vectorization order fixed by this module.  Zero
    padding contributes nothing, so padded columns are simply dropped.
    """
    c, h, w = _spatial(in_shape, "conv lowering")
    cout, cin, kh, kw = layer.kernel.shape
    if c != cin:
        raise ShapeError(f"conv expects {cin} channels, got {c}")
    p, s = layer.padding, layer.stride
    hp, wp = h + 2 * p, w + 2 * p
    hout = (hp - kh) // s + 1
    wout = (wp - kw) // s + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv output collapses on {h}x{w} input")
    dout = cout * hout * wout
    entries = dout * cin * hp * wp
    if entries > cap:
        raise MemoryGuardError(
            f"lowered conv matrix would hold {entries} entries (cap {cap})"
        )
    m = np.zeros((cout, hout, wout, cin, hp, wp))
    for i in range(hout):
        for j in range(wout):
            m[:, i, j, :, i * s : i * s + kh, j * s : j * s + kw] = layer.kernel
    if p:
        m = m[:, :, :, :, p : p + h, p : p + w]
    weight = np.ascontiguousarray(m.reshape(dout, cin * h * w))
    bias = np.repeat(layer.bias, hout * wout)
    return Dense(weight, bias)


def fold_batchnorm(dense: Dense, bn: BatchNorm) -> Dense:
    """Absorb an inference batch norm into the preceding affine layer.

    W' = diag(scale) W and b' = scale*(b - mean) + beta with
    scale = gamma / sqrt(var + eps), broadcast per spatial position when the
    affine layer is a lowered convolution (rows grouped channel-major).
    """
    dout = dense.weight.shape[0]
    c = bn.channels
    if dout % c:
        raise ShapeError(
            f"batch norm channels {c} do not divide affine output dim {dout}"
        )
    reps = dout // c
    scale = np.repeat(bn.gamma / np.sqrt(bn.var + bn.eps), reps)
    shift = np.repeat(bn.beta - bn.gamma * bn.mean / np.sqrt(bn.var + bn.eps), reps)
    return Dense(dense.weight * scale[:, None], dense.bias * scale + shift)


@dataclass(frozen=True)
class StudentStage:
    """One dense student stage: affine map, activation, optional pooled groups.

    When ``pool_group`` is g > 1, the affine output holds g gathered pre-pool
    coordinates per retained unit, laid out contiguously; the stage reduces
    them with a max after the activation.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: ActivationKind
    pool_group: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = _vector(self.bias, "stage bias")
        if w.ndim != 2 or b.size != w.shape[0]:
            raise ShapeError("stage weight/bias shapes are inconsistent")
        if self.pool_group < 1 or w.shape[0] % self.pool_group:
            raise ShapeError(
                f"pool group {self.pool_group} does not divide {w.shape[0]} rows"
            )
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def units(self) -> int:
        return self.weight.shape[0] // self.pool_group


@dataclass
class StudentNetwork:
    """Uncompressed prefix layers followed by dense stages and a lifting map."""

    input_shape: object
    prefix: list
    stages: list
    lift: np.ndarray

    def __post_init__(self):
        if not isinstance(self.input_shape, (int, np.integer)):
            self.input_shape = tuple(int(v) for v in self.input_shape)
        else:
            self.input_shape = int(self.input_shape)
        self.prefix = list(self.prefix)
        self.stages = list(self.stages)
        self.lift = np.asarray(self.lift, dtype=np.float64)
        if not self.stages:
            raise ShapeError("student needs at least one stage")
        pre_shapes = _chain_shapes(self.prefix, self.input_shape, "prefix layer")
        dim = flat_size(pre_shapes[-1])
        for i, stage in enumerate(self.stages):
            if stage.weight.shape[1] != dim:
                raise ShapeError(
                    f"stage {i} expects {stage.weight.shape[1]} inputs, gets {dim}"
                )
            dim = stage.units
        if self.lift.ndim != 2 or self.lift.shape[1] != dim:
            raise ShapeError(
                f"lift expects {dim} inputs, has shape {self.lift.shape}"
            )

    @property
    def input_dim(self) -> int:
        return flat_size(self.input_shape)

    @property
    def output_dim(self) -> int:
        return int(self.lift.shape[0])


def forward_student(student: StudentNetwork, batch) -> np.ndarray:
    """Run the student: prefix layers, sampled dense stages, lifting map."""
    x = _as_batch(batch, student.input_dim)
    shapes = _chain_shapes(student.prefix, student.input_shape, "prefix layer")
    for layer, shape in zip(student.prefix, shapes):
        x = _apply_layer(layer, x, shape)
    for stage in student.stages:
        x = stage.activation.apply(x @ stage.weight.T + stage.bias)
        if stage.pool_group > 1:
            x = x.reshape(x.shape[0], stage.units, stage.pool_group).max(axis=2)
    return x @ student.lift.T
