"""Layers with hand-written forward and backward passes.

Every parametric layer accumulates into its gradient buffers on
``backward``; call ``zero_grad`` between steps. Inputs are NCHW for
spatial layers and [N, features] for dense layers.
"""

from __future__ import annotations

import numpy as np

from .errors import LabelError, ShapeError, StateError
from .tensor_core import Rng, Tensor, TRAIN_DTYPE, he_init


class Layer:
    """Parameter-free layer base."""

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad_out: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, Tensor, Tensor]]:
        """(name, value, grad) triples; value/grad are the live buffers."""
        return []

    def zero_grad(self) -> None:
        for _, _, g in self.parameters():
            g.fill(0)

    def clear_cache(self) -> None:
        pass

    def astype(self, dtype) -> "Layer":
        return self


class Conv2d(Layer):
    """Stride-1 cross-correlation via im2col.

    ``padding="same"`` zero-pads by (k-1)//2 and requires odd kernels.
    Set ``input_grad=False`` on a first layer to skip computing dL/dx.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: Rng | None = None,
        padding: str = "same",
        dtype=TRAIN_DTYPE,
        input_grad: bool = True,
    ):
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {padding!r}")
        if padding == "same" and kernel % 2 == 0:
            raise ShapeError("same padding needs an odd kernel size")
        shape = (out_ch, in_ch, kernel, kernel)
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = he_init(shape, in_ch * kernel * kernel, rng, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.padding = padding
        self.input_grad = input_grad
        self._cols: Tensor | None = None
        self._in_shape: tuple[int, ...] | None = None

    @property
    def pad(self) -> int:
        return (self.weight.shape[2] - 1) // 2 if self.padding == "same" else 0

    def parameters(self):
        return [("weight", self.weight, self.grad_weight),
                ("bias", self.bias, self.grad_bias)]

    def forward(self, x: Tensor) -> Tensor:
        out_ch, in_ch, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[1] != in_ch:
            raise ShapeError(f"conv expects [N,{in_ch},H,W], got {list(x.shape)}")
        p = self.pad
        n, _, h, w = x.shape
        ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        # im2col in C,N,H,W order keeps every copied span contiguous
        xc = x.transpose(1, 0, 2, 3)
        if p:
            xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((in_ch, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xc[:, :, i:i + ho, j:j + wo]
        cols = cols.reshape(in_ch * kh * kw, n * ho * wo)
        out = self.weight.reshape(out_ch, -1) @ cols
        out += self.bias[:, None]
        self._cols = cols
        self._in_shape = (n, in_ch, h, w)
        return np.ascontiguousarray(out.reshape(out_ch, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, grad_out: Tensor) -> Tensor | None:
        if self._cols is None:
            raise StateError("conv backward called before forward")
        out_ch, in_ch, kh, kw = self.weight.shape
        n, _, h, w = self._in_shape
        ho, wo = grad_out.shape[2], grad_out.shape[3]
        if grad_out.shape[:2] != (n, out_ch) or self._cols.shape[1] != n * ho * wo:
            raise ShapeError("grad_out does not match the forward output shape")
        g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(out_ch, -1)
        self.grad_weight += (g @ self._cols.T).reshape(self.weight.shape)
        self.grad_bias += g.sum(axis=1)
        if not self.input_grad:
            return None
        dcols = (self.weight.reshape(out_ch, -1).T @ g).reshape(in_ch, kh, kw, n, ho, wo)
        p = self.pad
        dx = np.zeros((in_ch, n, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))

    def clear_cache(self):
        self._cols = None

    def astype(self, dtype):
        for name in ("weight", "bias", "grad_weight", "grad_bias"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self


def _quadrants(x: Tensor, ho: int, wo: int):
    return [x[:, :, r:2 * ho:2, c:2 * wo:2] for r in (0, 1) for c in (0, 1)]


def maxpool2x2_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    """2x2/stride-2 max pool. Returns (out, argmax) where argmax holds the
    winning position inside each window as row*2+col (first max wins)."""
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool needs [N,C,H>=2,W>=2], got {list(x.shape)}")
    ho, wo = x.shape[2] // 2, x.shape[3] // 2
    q = _quadrants(x, ho, wo)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    argmax = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        argmax[q[k] == out] = k
    return out, argmax


def maxpool2x2_backward(grad_out: Tensor, argmax: Tensor, in_shape) -> Tensor:
    ho, wo = in_shape[2] // 2, in_shape[3] // 2
    dx = np.zeros(in_shape, dtype=grad_out.dtype)
    for k, view in enumerate(_quadrants(dx, ho, wo)):
        view[...] = np.where(argmax == k, grad_out, 0)
    return dx


class MaxPool2x2(Layer):
    def __init__(self):
        self._argmax = None
        self._in_shape = None

    def forward(self, x):
        out, self._argmax = maxpool2x2_forward(x)
        self._in_shape = x.shape
        return out

    def backward(self, grad_out):
        if self._argmax is None:
            raise StateError("maxpool backward called before forward")
        return maxpool2x2_backward(grad_out, self._argmax, self._in_shape)

    def clear_cache(self):
        self._argmax = None


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("relu backward called before forward")
        # subgradient 0 at exactly 0
        return grad_out * self._mask

    def clear_cache(self):
        self._mask = None


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Dense(Layer):
    """y = x W^T + b with W of shape [out, in]."""

    def __init__(self, n_in: int, n_out: int, rng: Rng | None = None, dtype=TRAIN_DTYPE):
        if rng is None:
            self.weight = np.zeros((n_out, n_in), dtype=dtype)
        else:
            self.weight = he_init((n_out, n_in), n_in, rng, dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def parameters(self):
        return [("weight", self.weight, self.grad_weight),
                ("bias", self.bias, self.grad_bias)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"dense expects [N,{self.weight.shape[1]}], got {list(x.shape)}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("dense backward called before forward")
        self.grad_weight += grad_out.T @ self._x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def clear_cache(self):
        self._x = None

    def astype(self, dtype):
        for name in ("weight", "bias", "grad_weight", "grad_bias"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self


def grl_forward(x: Tensor, lam: float) -> Tensor:
    return x


def grl_backward(grad_out: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return (-lam) * grad_out


class GradientReversal(Layer):
    """Identity forward; multiplies the backward gradient by -lambda."""

    def __init__(self, lam: float = 0.0):
        self.lam = lam

    def forward(self, x):
        return grl_forward(x, self.lam)

    def backward(self, grad_out):
        return grl_backward(grad_out, self.lam)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self):
        return [(f"{i}.{name}", v, g)
                for i, layer in enumerate(self.layers)
                for name, v, g in layer.parameters()]

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


def softmax_xent(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / N."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_probs = z[rows, labels] - np.log(s[:, 0])
    loss = float(-np.mean(log_probs, dtype=np.float64))
    grad = ez / s
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
