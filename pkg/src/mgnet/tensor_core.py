"""Dense tensors and the convolution / activation / loss primitives.

Conventions used throughout the package:

* A tensor is a float64 ``numpy.ndarray`` of shape ``(height, width,
  channels)``.  Row index = vertical position, column index = horizontal
  position, third axis = channel.  Batched code may prepend a leading batch
  axis; every function here accepts ``(h, w, c)`` or ``(batch, h, w, c)``.
* A convolution kernel of half-width ``k`` has weights of shape
  ``(2k+1, 2k+1, out_channels, in_channels)``.  ``weights[k+p, k+q, t, i]``
  multiplies the input sample at vertical offset ``p`` and horizontal offset
  ``q`` from the output position, input channel ``i``, output channel ``t``.
  All other modules reuse this orientation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used by constructors (float32 mode for experiments).

    Existing arrays are untouched; computations preserve their input dtype.
    """
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


class PaddingMode(enum.Enum):
    ZERO = "zero"
    PERIODIC = "periodic"
    REFLECTED = "reflected"


def as_tensor(values, dtype=None) -> Tensor:
    """Coerce to a rank-3 (h, w, c) float array; 2-D input gets one channel."""
    a = np.asarray(values, dtype=dtype or DEFAULT_DTYPE)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ContractViolation(f"expected 2-D or 3-D values, got shape {a.shape}")
    if a.size == 0:
        raise ContractViolation("empty tensor")
    return a


@dataclass
class ConvKernel:
    """Multichannel convolution kernel with a per-output-channel bias.

    ``weights`` and ``bias`` may be plain arrays or autodiff parameters;
    only their shapes are inspected here.
    """

    weights: np.ndarray  # (2k+1, 2k+1, out_channels, in_channels)
    bias: np.ndarray     # (out_channels,)

    def __post_init__(self):
        ws = self.weights.shape
        if len(ws) != 4 or ws[0] != ws[1] or ws[0] % 2 != 1:
            raise ContractViolation(f"kernel weights must be (2k+1, 2k+1, out, in), got {ws}")
        if self.bias.shape != (ws[2],):
            raise ContractViolation(f"bias shape {self.bias.shape} does not match {ws[2]} output channels")

    @property
    def k(self) -> int:
        return (self.weights.shape[0] - 1) // 2

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[3]

    @classmethod
    def zeros(cls, k: int, in_channels: int, out_channels: int) -> "ConvKernel":
        n = 2 * k + 1
        return cls(np.zeros((n, n, out_channels, in_channels), dtype=DEFAULT_DTYPE),
                   np.zeros(out_channels, dtype=DEFAULT_DTYPE))

    @classmethod
    def identity(cls, channels: int, k: int = 1) -> "ConvKernel":
        """Center-tap kernel mapping each channel to itself."""
        kern = cls.zeros(k, channels, channels)
        for c in range(channels):
            kern.weights[k, k, c, c] = 1.0
        return kern

    @classmethod
    def from_matrix(cls, matrix, channels: int = 1) -> "ConvKernel":
        """Single 2-D stencil applied to each of `channels` channels independently."""
        m = np.asarray(matrix, dtype=DEFAULT_DTYPE)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2 != 1:
            raise ContractViolation(f"stencil must be odd square, got {m.shape}")
        k = (m.shape[0] - 1) // 2
        kern = cls.zeros(k, channels, channels)
        for c in range(channels):
            kern.weights[:, :, c, c] = m
        return kern


# ---------------------------------------------------------------------------
# index maps for the three padding modes
# ---------------------------------------------------------------------------

def _reflect_indices(pos: np.ndarray, n: int) -> np.ndarray:
    # mirror about the first/last sample without repeating the edge
    if n == 1:
        return np.zeros_like(pos)
    period = 2 * n - 2
    r = np.mod(pos, period)
    return np.where(r < n, r, period - r)


@lru_cache(maxsize=256)
def _axis_indices(n_in: int, k: int, stride: int, mode: PaddingMode):
    """Sample indices (n_out, 2k+1) along one axis plus an in-range mask."""
    n_out = -(-n_in // stride)
    pos = stride * np.arange(n_out)[:, None] + np.arange(-k, k + 1)[None, :]
    if mode is PaddingMode.ZERO:
        valid = (pos >= 0) & (pos < n_in)
        idx = np.clip(pos, 0, n_in - 1)
    elif mode is PaddingMode.PERIODIC:
        valid = np.ones_like(pos, dtype=bool)
        idx = np.mod(pos, n_in)
    else:
        valid = np.ones_like(pos, dtype=bool)
        idx = _reflect_indices(pos, n_in)
    idx.setflags(write=False)
    valid.setflags(write=False)
    return idx, valid


def _gather_patches(x: np.ndarray, k: int, stride: int, mode: PaddingMode) -> np.ndarray:
    """(b, h, w, c) -> (b, h_out, w_out, 2k+1, 2k+1, c) window gather.

    Out-of-range samples are resolved per padding mode (zeros for ZERO).
    """
    _, m, n, _ = x.shape
    rows, rvalid = _axis_indices(m, k, stride, mode)
    cols, cvalid = _axis_indices(n, k, stride, mode)
    patches = x[:, rows[:, None, :, None], cols[None, :, None, :], :]
    if mode is PaddingMode.ZERO:
        mask = rvalid[:, None, :, None] & cvalid[None, :, None, :]
        if not mask.all():
            patches = patches * mask[None, :, :, :, :, None]
    return patches


def _conv_forward(x: np.ndarray, weights: np.ndarray, bias, stride: int,
                  mode: PaddingMode) -> np.ndarray:
    k = (weights.shape[0] - 1) // 2
    patches = _gather_patches(x, k, stride, mode)
    out = np.einsum("bijpqc,pqoc->bijo", patches, weights, optimize=True)
    if bias is not None:
        out = out + bias
    return out


def _conv_grad_weights(x: np.ndarray, grad_out: np.ndarray, k: int, stride: int,
                       mode: PaddingMode) -> np.ndarray:
    patches = _gather_patches(x, k, stride, mode)
    return np.einsum("bijpqc,bijo->pqoc", patches, grad_out, optimize=True)


def _conv_grad_input(grad_out: np.ndarray, weights: np.ndarray, in_shape, stride: int,
                     mode: PaddingMode) -> np.ndarray:
    """Scatter-add the adjoint of the patch gather; exact for every mode."""
    b, m, n, cin = in_shape
    k = (weights.shape[0] - 1) // 2
    rows, rvalid = _axis_indices(m, k, stride, mode)
    cols, cvalid = _axis_indices(n, k, stride, mode)
    dpatch = np.einsum("bijo,pqoc->bijpqc", grad_out, weights, optimize=True)
    if mode is PaddingMode.ZERO:
        mask = rvalid[:, None, :, None] & cvalid[None, :, None, :]
        dpatch = dpatch * mask[None, :, :, :, :, None]
    # linearize (row, col) then sum with bincount; trailing (b, c) handled by
    # expanding the linear index, which keeps the accumulation deterministic
    lin = rows[:, None, :, None] * n + cols[None, :, None, :]
    tail = b * cin
    full = lin[:, :, :, :, None, None] * tail + np.arange(tail).reshape(b, cin)
    dp = np.moveaxis(dpatch, 0, 4)  # (i, j, p, q, b, c)
    flat = np.bincount(full.ravel(), weights=dp.ravel(), minlength=m * n * tail)
    return np.moveaxis(flat.reshape(m, n, b, cin), 2, 0)


def _with_batch(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"expected (h, w, c) or (batch, h, w, c), got shape {x.shape}")


def conv2d(input: Tensor, kernel: ConvKernel, stride: int = 1,
           padding: PaddingMode = PaddingMode.ZERO) -> Tensor:
    """Multichannel convolution with stride and the three padding modes.

    Output channel ``t`` is ``sum_i K[i,t] * input[i] + bias[t]``; the output
    is ``ceil(h/stride) x ceil(w/stride) x out_channels``.
    """
    x, squeeze = _with_batch(np.asarray(input))
    if x.size == 0:
        raise ContractViolation("empty input tensor")
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    if x.shape[-1] != kernel.in_channels:
        raise ContractViolation(
            f"input has {x.shape[-1]} channels but kernel expects {kernel.in_channels}")
    out = _conv_forward(x, np.asarray(kernel.weights), np.asarray(kernel.bias),
                        stride, padding)
    return out[0] if squeeze else out


def relu(input: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(input), 0.0)


def softmax(logits) -> np.ndarray:
    """Exponential normalization with max-shift for overflow safety."""
    z = np.asarray(logits, dtype=DEFAULT_DTYPE)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(prediction, label, clamp: float = 1e-12) -> float:
    """-sum_i label_i * log(prediction_i) with predictions clamped at `clamp`."""
    p = np.asarray(prediction, dtype=DEFAULT_DTYPE)
    y = np.asarray(label, dtype=DEFAULT_DTYPE)
    if p.shape != y.shape:
        raise ContractViolation(f"prediction shape {p.shape} != label shape {y.shape}")
    return float(-(y * np.log(np.maximum(p, clamp))).sum()) + 0.0
