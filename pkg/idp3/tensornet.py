"""
Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new `Tensor` remembering its inputs and a
vector-Jacobian product. `backward(loss)` walks the recorded graph in reverse
topological order and accumulates gradients into the `Param` leaves, which
`adamw_step()` then consumes.

Arrays are plain `numpy.ndarray` objects; nothing here broadcasts beyond
the bias additions each operation documents.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from pathlib import Path
import struct
from typing import (
    Callable, Iterable, Iterator, Mapping, Optional, Sequence, TypeAlias, Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .utils import BinaryReader, FloatArray, IntArray


logger = logging.getLogger(__name__)

VectorJacobian: TypeAlias = Callable[[FloatArray], Sequence[Optional[FloatArray]]]
ArrayLike: TypeAlias = Union[FloatArray, Sequence[float], float]

LAYER_NORM_EPSILON = 1e-5
CHECKPOINT_MAGIC = b'IDP3CKPT'
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    """
    Array plus the bookkeeping needed to differentiate through it.
    """
    def __init__(
        self,
        data: ArrayLike,
        parents: tuple[Tensor, ...] = (),
        vjp: Optional[VectorJacobian] = None,
        op: str = 'constant',
    ):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError(f"non-finite value produced by {op}")
        self.data: FloatArray = array
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.consumed = False

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}: {self.op} {self.shape}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def requires_grad(self) -> bool:
        return bool(self.parents)

    def numpy(self) -> FloatArray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError('item() needs a single-element tensor')
        return float(self.data.reshape(-1)[0])


class Param(Tensor):
    """
    Trainable leaf holding its gradient and AdamW moment estimates.
    """
    def __init__(self, data: ArrayLike):
        super().__init__(data, op='param')
        self.grad: FloatArray = np.zeros_like(self.data)
        self.first_moment: FloatArray = np.zeros_like(self.data)
        self.second_moment: FloatArray = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def requires_grad(self) -> bool:
        return True

    @classmethod
    def uniform(cls, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Param:
        """
        Uniform in ±1/√fan_in, the usual default for dense and conv layers.
        """
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        return cls(rng.uniform(-bound, bound, size=shape))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Graph:
    """
    Operations reachable from one output, inputs before outputs.
    """
    nodes: list[Tensor]

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, params: Optional[Iterable[Param]] = None) -> None:
    """
    Accumulate d(loss)/d(param) into every reachable `Param.grad`.

    When `params` is given their gradients are reset first, so any of them
    the loss does not depend on end up holding zeros.
    """
    if loss.size != 1:
        raise ShapeError('backward() needs a scalar loss')
    if loss.consumed:
        raise GraphError('backward() already called for this loss; rerun the forward pass')
    loss.consumed = True

    if params is not None:
        for param in params:
            param.zero_grad()

    graph = Graph.trace(loss)
    grads: dict[int, FloatArray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if isinstance(node, Param):
            node.grad = node.grad + grad
        if node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)


# Operations ###################################################################

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    `x·W + b` for x of shape (B, I), W (I, O), b (O).
    """
    _expect(x.data.ndim == 2 and w.data.ndim == 2, 'linear expects 2-D input and weight')
    _expect(x.shape[1] == w.shape[0], f"linear: input {x.shape} vs weight {w.shape}")
    _expect(b.shape == (w.shape[1],), f"linear: bias {b.shape} vs weight {w.shape}")

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    return Tensor(x.data @ w.data + b.data, (x, w, b), vjp, 'linear')


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """
    Kernel-size-one convolution over the point axis.

    x has shape (B, C_in, N), W (C_out, C_in) and b (C_out,); every point
    shares the same channel mixing.
    """
    _expect(x.data.ndim == 3 and w.data.ndim == 2, 'pointwise_conv expects (B, C, N) input')
    _expect(x.shape[1] == w.shape[1], f"pointwise_conv: input {x.shape} vs weight {w.shape}")
    _expect(b.shape == (w.shape[0],), f"pointwise_conv: bias {b.shape} vs weight {w.shape}")

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        grad_x = np.matmul(w.data.T, g)
        grad_w = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
        return (grad_x, grad_w, g.sum(axis=(0, 2)))

    out = np.matmul(w.data, x.data) + b.data[None, :, None]
    return Tensor(out, (x, w, b), vjp, 'pointwise_conv')


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """
    Valid (unpadded) 2-D convolution.

    x has shape (B, C_in, H, W), W (C_out, C_in, k, k), b (C_out,).
    """
    _expect(x.data.ndim == 4 and w.data.ndim == 4, 'conv2d expects 4-D input and weight')
    _expect(x.shape[1] == w.shape[1], f"conv2d: input {x.shape} vs weight {w.shape}")
    _expect(b.shape == (w.shape[0],), f"conv2d: bias {b.shape} vs weight {w.shape}")
    k = w.shape[2]
    _expect(w.shape[3] == k, 'conv2d expects square kernels')
    _expect(stride >= 1, 'conv2d stride must be positive')
    _expect(x.shape[2] >= k and x.shape[3] >= k, 'conv2d input smaller than kernel')

    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_windows = np.tensordot(g, w.data, axes=([1], [0]))     # B, H', W', C, k, k
        grad_x = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                grad_x[
                    :, :,
                    i:i + stride * (out_h - 1) + 1:stride,
                    j:j + stride * (out_w - 1) + 1:stride,
                ] += grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (grad_x, grad_w, g.sum(axis=(0, 2, 3)))

    return Tensor(out, (x, w, b), vjp, 'conv2d')


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g * mask,)

    return Tensor(np.where(mask, x.data, 0.0), (x,), vjp, 'relu')


def mish(x: Tensor) -> Tensor:
    """
    `x · tanh(softplus(x))`.
    """
    softplus = np.logaddexp(0.0, x.data)
    tanh_sp = np.tanh(softplus)
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g * (tanh_sp + x.data * (1.0 - tanh_sp ** 2) * sigmoid),)

    return Tensor(x.data * tanh_sp, (x,), vjp, 'mish')


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    'relu': relu,
    'mish': mish,
}


def activation(x: Tensor, name: str) -> Tensor:
    try:
        function = ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation: {name!r}") from None
    return function(x)


def max_pool_points(x: Tensor) -> tuple[Tensor, IntArray]:
    """
    Per-channel maximum over the point axis of a (B, C, N) tensor.

    Returns the pooled (B, C) tensor and the winning point indices; ties go
    to the lowest index and only the winner receives gradient.
    """
    _expect(x.data.ndim == 3, 'max_pool_points expects (B, C, N) input')
    _expect(x.shape[2] >= 1, 'max_pool_points needs at least one point')
    index = np.argmax(x.data, axis=2).astype(np.int64)
    pooled = np.take_along_axis(x.data, index[:, :, None], axis=2)[:, :, 0]

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, index[:, :, None], g[:, :, None], axis=2)
        return (grad,)

    return Tensor(pooled, (x,), vjp, 'max_pool_points'), index


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """
    Normalize over the last axis, then scale and shift.
    """
    channels = x.shape[-1]
    _expect(channels >= 1, 'layer_norm needs at least one channel')
    _expect(gamma.shape == (channels,) and beta.shape == (channels,),
            f"layer_norm: gamma/beta must have shape ({channels},)")

    mean = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mean
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + LAYER_NORM_EPSILON)
    normalized = centred * inv_std

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        grad_norm = g * gamma.data
        grad_x = inv_std * (
            grad_norm
            - grad_norm.mean(axis=-1, keepdims=True)
            - normalized * (grad_norm * normalized).mean(axis=-1, keepdims=True)
        )
        leading = tuple(range(x.data.ndim - 1))
        return (grad_x, (g * normalized).sum(axis=leading), g.sum(axis=leading))

    out = normalized * gamma.data + beta.data
    return Tensor(out, (x, gamma, beta), vjp, 'layer_norm')


def mse_loss(pred: Tensor, target: Union[Tensor, FloatArray]) -> Tensor:
    target = as_tensor(target)
    _expect(pred.shape == target.shape, f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        grad = 2.0 * diff / diff.size * g
        return (grad, -grad)

    return Tensor(np.mean(diff ** 2), (pred, target), vjp, 'mse_loss')


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    _expect(len(tensors) >= 1, 'concat needs at least one tensor')
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return tuple(np.split(g, bounds, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    return Tensor(out, tuple(tensors), vjp, 'concat')


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g.reshape(original),)

    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    return Tensor(out, (x,), vjp, 'reshape')


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g.transpose(inverse),)

    return Tensor(x.data.transpose(axes), (x,), vjp, 'transpose')


def add(a: Tensor, b: Tensor) -> Tensor:
    _expect(a.shape == b.shape, f"add: {a.shape} vs {b.shape}")

    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g, g)

    return Tensor(a.data + b.data, (a, b), vjp, 'add')


def scale(x: Tensor, factor: float) -> Tensor:
    def vjp(g: FloatArray) -> Sequence[Optional[FloatArray]]:
        return (g * factor,)

    return Tensor(x.data * factor, (x,), vjp, 'scale')


# Layers #######################################################################

class Module:
    """
    Container of `Param` attributes and child modules.

    Parameters are named by attribute path, e.g. `stages.0.weight`, in the
    order the attributes were assigned.
    """
    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Param]]:
        for name, value in vars(self).items():
            yield from _named(value, f"{prefix}{name}")

    def parameters(self) -> list[Param]:
        return [param for _, param in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(param.size for param in self.parameters())

    def state_dict(self) -> dict[str, FloatArray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, FloatArray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch, missing {missing}, unexpected {unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError(f"{name}: expected {param.shape}, got {value.shape}")
            param.data = value.copy()


def _named(value: object, path: str) -> Iterator[tuple[str, Param]]:
    if isinstance(value, Param):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{path}.")
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _named(item, f"{path}.{index}")


class Dense(Module):
    def __init__(self, inputs: int, outputs: int, rng: np.random.Generator):
        self.weight = Param.uniform((inputs, outputs), inputs, rng)
        self.bias = Param.uniform((outputs,), inputs, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class PointwiseConv(Module):
    def __init__(self, inputs: int, outputs: int, rng: np.random.Generator):
        self.weight = Param.uniform((outputs, inputs), inputs, rng)
        self.bias = Param.uniform((outputs,), inputs, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return pointwise_conv(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self, inputs: int, outputs: int, kernel: int, stride: int, rng: np.random.Generator,
    ):
        fan_in = inputs * kernel * kernel
        self.stride = stride
        self.weight = Param.uniform((outputs, inputs, kernel, kernel), fan_in, rng)
        self.bias = Param.uniform((outputs,), fan_in, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


# Optimizer ####################################################################

@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6


def adamw_step(
    params: Iterable[Param],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-6,
) -> None:
    """
    One AdamW update with decoupled weight decay, then zero the gradients.
    """
    for param in params:
        param.step_count += 1
        grad = param.grad
        param.first_moment = beta1 * param.first_moment + (1.0 - beta1) * grad
        param.second_moment = beta2 * param.second_moment + (1.0 - beta2) * grad * grad
        m_hat = param.first_moment / (1.0 - beta1 ** param.step_count)
        v_hat = param.second_moment / (1.0 - beta2 ** param.step_count)
        value = param.data * (1.0 - lr * weight_decay)
        param.data = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        param.zero_grad()


def zero_grad(params: Iterable[Param]) -> None:
    for param in params:
        param.zero_grad()


# Verification #################################################################

@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Union[Sequence[Param], Mapping[str, Param]],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> FiniteDiffReport:
    """
    Compare backward gradients with central differences, element by element.

    `f` must rebuild the scalar loss from the current parameter values on
    every call. Relative error is `|a - n| / max(|a|, |n|, floor)`.
    """
    named = dict(params) if isinstance(params, Mapping) else {
        str(index): param for index, param in enumerate(params)
    }
    for param in named.values():
        param.zero_grad()
    backward(f(), named.values())
    analytic = {name: param.grad.copy() for name, param in named.items()}

    worst_rel, worst_abs, worst, checked = 0.0, 0.0, '', 0
    for name, param in named.items():
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = f().item()
            flat[i] = original - h
            lower = f().item()
            flat[i] = original
            numeric = (upper - lower) / (2 * h)
            exact = float(analytic[name].reshape(-1)[i])
            abs_error = abs(exact - numeric)
            rel_error = abs_error / max(abs(exact), abs(numeric), floor)
            checked += 1
            worst_abs = max(worst_abs, abs_error)
            if rel_error > worst_rel:
                worst_rel, worst = rel_error, f"{name}[{i}]"
    for param in named.values():
        param.zero_grad()

    report = FiniteDiffReport(worst_rel, worst_abs, checked, tolerance, worst)
    logger.debug(
        f"Finite differences: {checked} entries, max rel error "
        f"{worst_rel:.2e} at {worst or '-'}"
    )
    return report


# Checkpoints ##################################################################

def save_checkpoint(path: Path, params: Mapping[str, FloatArray], metadata: str = '') -> None:
    """
    Versioned binary file: header, metadata text, then every named array.

    All integers and floats are little-endian; arrays are float64, row-major.
    """
    meta = metadata.encode('utf-8')
    chunks = [
        struct.pack('<8sII', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)),
        meta,
        struct.pack('<I', len(params)),
    ]
    for name, array in params.items():
        array = np.asarray(array, dtype=np.float64)
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.astype('<f8').tobytes())
    path.write_bytes(b''.join(chunks))
    logger.debug("Wrote checkpoint with %d arrays: %s", len(params), path)


def load_checkpoint(path: Path) -> tuple[str, dict[str, FloatArray]]:
    """
    Read a file written by `save_checkpoint()`.

    Returns:
        Metadata text and the named arrays, in file order.
    """
    reader = BinaryReader(path.read_bytes())
    try:
        magic, version, meta_length = reader.unpack('<8sII')
    except ValueError:
        raise CheckpointError(f"truncated checkpoint: {path}") from None
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}: {path}")
    arrays: dict[str, FloatArray] = {}
    try:
        metadata = reader.take(meta_length).decode('utf-8')
        (count,) = reader.unpack('<I')
        for _ in range(count):
            (name_length,) = reader.unpack('<H')
            name = reader.take(name_length).decode('utf-8')
            (ndim,) = reader.unpack('<B')
            shape = reader.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = reader.floats(size).reshape(shape)
    except ValueError:
        raise CheckpointError(f"truncated checkpoint: {path}") from None
    if not reader.exhausted:
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    return metadata, arrays

