"""Shared test helpers: independent brute-force references.

The reference convolution below is a literal transcription of the sliding
window sum with explicit boundary handling, kept loop-based on purpose so it
stays independent of the vectorized implementation it checks.
"""

import numpy as np
import pytest

from mgnet.tensor_core import ConvKernel, PaddingMode


def reference_conv2d(x, kernel: ConvKernel, stride: int, mode: PaddingMode):
    m, n, cin = x.shape
    weights = np.asarray(kernel.weights)
    bias = np.asarray(kernel.bias)
    k = kernel.k
    h_out, w_out = -(-m // stride), -(-n // stride)
    out = np.zeros((h_out, w_out, kernel.out_channels))

    def fold(d, size):
        if 0 <= d < size:
            return d
        if mode is PaddingMode.ZERO:
            return None
        if mode is PaddingMode.PERIODIC:
            return d % size
        period = 2 * size - 2 if size > 1 else 1
        r = d % period
        return r if r < size else period - r

    for t in range(kernel.out_channels):
        for i in range(h_out):
            for j in range(w_out):
                acc = bias[t]
                for p in range(-k, k + 1):
                    for q in range(-k, k + 1):
                        ii = fold(stride * i + p, m)
                        jj = fold(stride * j + q, n)
                        if ii is None or jj is None:
                            continue
                        for c in range(cin):
                            acc += weights[k + p, k + q, t, c] * x[ii, jj, c]
                out[i, j, t] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
