"""Minimal neural-network layers on numpy, with hand-derived gradients.

Everything runs in float64: the training problem is small and exact
gradients matter more than speed here. Layers cache what their backward
pass needs; call forward, then backward with the upstream gradient, and
read parameter gradients from .grads. Correctness is pinned by central
finite differences in the tests, not by construction.

Array layout is NCHW for convolutional tensors.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}


class Conv2d(Layer):
    """3x3-style convolution via im2col; stride 1 or 2, 'same' padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        self.weight = _he_init(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.bias = np.zeros(out_ch)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def _im2col(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        sn, sc, sh, sw = padded.strides
        windows = np.lib.stride_tricks.as_strided(
            padded,
            shape=(n, c, oh, ow, k, k),
            strides=(sn, sc, sh * s, sw * s, sh, sw),
            writeable=False,
        )
        # (n, oh, ow, c, k, k) -> rows of receptive fields
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        return np.ascontiguousarray(cols), (n, c, h, w, oh, ow)

    def forward(self, x: np.ndarray) -> np.ndarray:
        cols, dims = self._im2col(x)
        n, c, h, w, oh, ow = dims
        out = cols @ self.weight.reshape(self.out_ch, -1).T + self.bias
        self._cache = (cols, dims)
        return out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        cols, (n, c, h, w, oh, ow) = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        grad_rows = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_ch)
        self.grad_weight = (grad_rows.T @ cols).reshape(self.weight.shape)
        self.grad_bias = grad_rows.sum(axis=0)
        grad_cols = grad_rows @ self.weight.reshape(self.out_ch, -1)
        grad_cols = grad_cols.reshape(n, oh, ow, c, k, k)
        grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p))
        # Scatter receptive-field gradients back; loop over the k*k offsets
        # instead of per-pixel indexing.
        for ky in range(k):
            for kx in range(k):
                grad_padded[:, :, ky:ky + s * oh:s, kx:kx + s * ow:s] += \
                    grad_cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        return grad_padded[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class Dense(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = _he_init(rng, (d_in, d_out), d_in)
        self.bias = np.zeros(d_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grad_weight = self._x.T @ grad_out
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weight.T


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C)."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        return np.broadcast_to(grad_out[:, :, None, None], self._shape) / (h * w)


class Adam:
    """Standard Adam over a dict of named parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def collect_params(layers: dict[str, Layer]) -> dict[str, np.ndarray]:
    out = {}
    for lname, layer in layers.items():
        for pname, array in layer.params().items():
            out[f"{lname}.{pname}"] = array
    return out


def collect_grads(layers: dict[str, Layer]) -> dict[str, np.ndarray]:
    out = {}
    for lname, layer in layers.items():
        for pname, array in layer.grads().items():
            out[f"{lname}.{pname}"] = array
    return out


def parameter_digest(params: dict[str, np.ndarray]) -> str:
    """Order-independent-of-insertion digest of all parameter tensors."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()
