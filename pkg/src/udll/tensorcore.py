"""Dense tensor kernels for the convolutional autoencoder.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Image batches use the NHWC layout ``[batch, height, width, channels]`` and
convolution kernels are stored as ``[s, s, in_channels, out_channels]``.

Every forward op has a matching backward that returns exact analytic
gradients; :func:`finite_diff_grad` is the oracle used to test them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DivergenceError, ShapeError

__all__ = [
    "Parameter",
    "AdamState",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_transpose_forward",
    "conv2d_transpose_backward",
    "relu",
    "relu_backward",
    "matmul",
    "frobenius_sq",
    "adam_step",
    "finite_diff_grad",
    "glorot_uniform",
]


@dataclass
class Parameter:
    """A trainable tensor together with its gradient buffer."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(
                f"gradient shape {self.grad.shape} != value shape {self.value.shape} "
                f"for parameter {self.name!r}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameter(cls, param: Parameter, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        return cls(
            np.zeros_like(param.value),
            np.zeros_like(param.value),
            learning_rate=learning_rate,
            **kwargs,
        )


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for "same" padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check_conv_args(x, kernels, stride):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-d NHWC input, got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"expected kernels of shape [s, s, cin, cout], got {kernels.shape}")
    if kernels.shape[0] < 1:
        raise ShapeError("kernel spatial size must be >= 1")


def _geometry(h, w, s, stride):
    oh, pt, pb = _same_pad(h, s, stride)
    ow, pl, pr = _same_pad(w, s, stride)
    return oh, ow, (pt, pb), (pl, pr)


def _patches(x, s, stride):
    """Strided patch view ``[batch, oh, ow, cin, s, s]`` of the padded input."""
    _, h, w, _ = x.shape
    oh, ow, ph, pw = _geometry(h, w, s, stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (s, s), axis=(1, 2))
    return win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _col2im(cols, h, w, stride):
    """Scatter-add patch gradients ``[batch, oh, ow, s, s, c]`` back to ``[batch, h, w, c]``.

    Offsets are accumulated in a fixed (row, column) order.
    """
    b, oh, ow, s, _, c = cols.shape
    _, _, ph, pw = _geometry(h, w, s, stride)
    out = np.zeros((b, h + sum(ph), w + sum(pw), c))
    for di in range(s):
        for dj in range(s):
            out[:, di : di + (oh - 1) * stride + 1 : stride, dj : dj + (ow - 1) * stride + 1 : stride] += cols[
                :, :, :, di, dj, :
            ]
    return out[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w]


def conv2d_forward(x, kernels, bias, stride=1):
    """Cross-correlation with "same" zero padding.

    Output spatial size is ``ceil(input / stride)``.
    """
    _check_conv_args(x, kernels, stride)
    s, _, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels but kernels expect {cin} (kernels {kernels.shape})")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    cols = _patches(x, s, stride)
    out = np.tensordot(cols, kernels.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out + bias


def conv2d_backward(grad_out, x, kernels, stride=1):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias."""
    _check_conv_args(x, kernels, stride)
    s, _, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels but kernels expect {cin}")
    oh, ow, _, _ = _geometry(x.shape[1], x.shape[2], s, stride)
    expected = (x.shape[0], oh, ow, cout)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    cols = _patches(x, s, stride)
    grad_kernels = np.tensordot(cols, grad_out, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    grad_cols = np.tensordot(grad_out, kernels, axes=([3], [3]))
    grad_input = _col2im(grad_cols, x.shape[1], x.shape[2], stride)
    return grad_input, np.ascontiguousarray(grad_kernels), grad_bias


def _transpose_out_hw(y, stride, output_hw):
    if output_hw is None:
        return y.shape[1] * stride, y.shape[2] * stride
    h, w = output_hw
    if -(-h // stride) != y.shape[1] or -(-w // stride) != y.shape[2]:
        raise ShapeError(
            f"output size {(h, w)} is incompatible with input {y.shape[1:3]} at stride {stride}"
        )
    return h, w


def conv2d_transpose_forward(y, kernels, bias, stride=1, output_hw=None):
    """Adjoint of :func:`conv2d_forward` plus a bias.

    ``kernels`` has the geometry of the convolution being inverted,
    ``[s, s, out_channels, in_channels]`` seen from this layer, so that
    ``<conv(x, K), y> == <x, conv_transpose(y, K)>`` at zero bias.
    ``output_hw`` defaults to ``stride * input`` spatial size.
    """
    _check_conv_args(y, kernels, stride)
    s, _, cout, cin = kernels.shape
    if y.shape[3] != cin:
        raise ShapeError(f"input has {y.shape[3]} channels but transpose kernels expect {cin} (kernels {kernels.shape})")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    h, w = _transpose_out_hw(y, stride, output_hw)
    cols = np.tensordot(y, kernels, axes=([3], [3]))
    return _col2im(cols, h, w, stride) + bias


def conv2d_transpose_backward(grad_out, y, kernels, stride=1):
    """Gradients of :func:`conv2d_transpose_forward` w.r.t. input, kernels and bias."""
    _check_conv_args(y, kernels, stride)
    s, _, cout, cin = kernels.shape
    if grad_out.ndim != 4 or grad_out.shape[0] != y.shape[0] or grad_out.shape[3] != cout:
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with input {y.shape} and kernels {kernels.shape}")
    _transpose_out_hw(y, stride, grad_out.shape[1:3])
    cols = _patches(grad_out, s, stride)
    grad_input = np.tensordot(cols, kernels.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    grad_kernels = np.tensordot(cols, y, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    return grad_input, np.ascontiguousarray(grad_kernels), grad_bias


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0.0)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_sq(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.dot(t.ravel(), t.ravel()))


def adam_step(param: Parameter, state: AdamState) -> tuple[Parameter, AdamState]:
    """Apply one bias-corrected Adam update in place and return both objects."""
    g = param.grad
    if g.shape != state.first_moment.shape or g.shape != param.value.shape:
        raise ShapeError(f"optimizer state shape {state.first_moment.shape} != parameter {param.value.shape}")
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient in parameter {param.name!r}")
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    param.value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param, state


def finite_diff_grad(loss_fn, x, h=1e-5):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn(x)
        flat[i] = orig - h
        fm = loss_fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def glorot_uniform(shape, fan_in, fan_out, rng):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)
