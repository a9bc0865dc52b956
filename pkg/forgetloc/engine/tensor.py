"""
Tensor Module

Dense float64 tensors and tape-based reverse-mode differentiation, covering the
operations the reference CNN needs: matmul, bias add, same-padded strided
conv2d, relu, dropout, reshape and softmax cross-entropy.

Usage:
    theta = Tensor([1.0, -2.0], name="theta", requires_grad=True)
    with GradientTape() as tape:
        loss = tensor_sum(mul(theta, theta))
    grads = backward(tape, loss, [theta])   # {"theta": array([2., -4.])}
"""

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from forgetloc.models.schemas import Mode
from forgetloc.utils.exceptions import DimensionError, InvalidInputError, UsageError

DTYPE = np.float64

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Shape-tagged float64 array; named tensors with requires_grad are differentiation sources"""

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VJP


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("forgetloc_active_tape", default=None)


class GradientTape:
    """Ordered record of the primitive operations run while the tape is active"""

    def __init__(self):
        self._records: List[_Record] = []
        self._produced: Dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "GradientTape":
        if self._token is not None:
            raise UsageError("tape is already recording")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> None:
        self._records.append(_Record(output, inputs, vjp))
        self._produced[id(output)] = output

    def produced(self, tensor: Tensor) -> bool:
        return self._produced.get(id(tensor)) is tensor

    def records(self) -> List[_Record]:
        return list(self._records)


def _record(output: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(output, inputs, vjp)
    return output


def backward(tape: GradientTape, loss: Tensor,
             sources: Optional[Sequence[Tensor]] = None) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to named source tensors.

    Without explicit sources, every named leaf seen by the tape is returned.
    Sources that the loss does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise UsageError("loss was not recorded on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for record in reversed(tape._records):
        for operand in record.inputs:
            if operand.requires_grad and not tape.produced(operand):
                leaves[id(operand)] = operand
        upstream = grads.pop(id(record.output), None)
        if upstream is None:
            continue
        for operand, grad in zip(record.inputs, record.vjp(upstream)):
            if grad is None or not operand.requires_grad:
                continue
            key = id(operand)
            grads[key] = grads[key] + grad if key in grads else grad

    if sources is None:
        sources = [leaf for leaf in leaves.values() if leaf.name is not None]
    result = {}
    for source in sources:
        if source.name is None:
            raise UsageError("gradient sources must be named tensors")
        grad = grads.get(id(source))
        result[source.name] = np.zeros_like(source.data) if grad is None else grad
    return result

# ============================================================================
# PRIMITIVE OPERATIONS
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias shape {bias.shape} does not fit input shape {x.shape}")
    out = Tensor(x.data + bias.data)
    axes = tuple(range(x.data.ndim - 1))

    def vjp(g):
        return g, g.sum(axis=axes)

    return _record(out, (x, bias), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)

    def vjp(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), vjp)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(tuple(shape)))

    def vjp(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def vjp(g):
        return (g * mask,)

    return _record(out, (x,), vjp)


def same_padding(extent: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """Output extent and (before, after) padding so that out = ceil(extent / stride)"""
    if stride < 1:
        raise InvalidInputError(f"stride must be >= 1, got {stride}")
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Same-padded cross-correlation over NHWC input (a single HWC image is accepted too)"""
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and KhKwCinCout kernels, got {x.shape} and {kernels.shape}")
    batch, height, width, channels = x.shape
    kh, kw, cin, cout = kernels.shape
    if channels != cin:
        raise DimensionError(f"input has {channels} channels but kernels {kernels.shape} expect {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")

    out_h, top, bottom = same_padding(height, kh, stride)
    out_w, left, right = same_padding(width, kw, stride)
    padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    span_h = (out_h - 1) * stride + 1
    span_w = (out_w - 1) * stride + 1

    result = np.zeros((batch, out_h, out_w, cout), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            window = padded[:, i:i + span_h:stride, j:j + span_w:stride, :]
            result += window @ kernels.data[i, j]
    result += bias.data
    out = Tensor(result)

    def vjp(g):
        grad_padded = np.zeros_like(padded)
        grad_kernels = np.zeros_like(kernels.data)
        for i in range(kh):
            for j in range(kw):
                window = padded[:, i:i + span_h:stride, j:j + span_w:stride, :]
                grad_kernels[i, j] = np.tensordot(window, g, axes=([0, 1, 2], [0, 1, 2]))
                grad_padded[:, i:i + span_h:stride, j:j + span_w:stride, :] += g @ kernels.data[i, j].T
        grad_x = grad_padded[:, top:top + height, left:left + width, :]
        return grad_x, grad_kernels, g.sum(axis=(0, 1, 2))

    out = _record(out, (x, kernels, bias), vjp)
    if single:
        out = reshape(out, out.shape[1:])
    return out


def dropout(x: Tensor, rate: float, mode: Mode, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) in train mode, identity in eval mode"""
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
    if Mode(mode) is Mode.EVAL or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs a random generator")
    scale = 1.0 / (1.0 - rate)
    keep = (rng.random(x.shape) >= rate) * scale
    out = Tensor(x.data * keep)

    def vjp(g):
        return (g * keep,)

    return _record(out, (x,), vjp)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]"""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    batch, classes = logits.shape
    if batch < 1:
        raise InvalidInputError("softmax_cross_entropy needs at least one example")
    if labels.shape != (batch,):
        raise DimensionError(f"{labels.shape} labels for {batch} logit rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= classes:
        raise InvalidInputError(f"labels must be integers in [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    out = Tensor(np.mean(log_norm - shifted[rows, labels]))

    def vjp(g):
        grad = softmax(logits.data)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _record(out, (logits,), vjp)
