"""Minimal dense/convolutional network engine: forward/backward passes and ADAM.

Layers are a fixed chain (conv 3x3 / ReLU / maxpool 2x2 / dense), so
each layer implements its own explicit backward pass instead of going
through a general autodiff graph. Convolutions dispatch by shape:
spatially large layers run hand-written direct kernels JIT-compiled
with numba (im2col would multiply their memory traffic ninefold), while
channel-heavy layers with small feature maps run as im2col matrix
products where BLAS is faster. Both paths are bit-deterministic: thread
partitions write disjoint outputs and reduction orders are fixed.
Compute dtype follows the parameter dtype: float32 for training,
float64 for gradient-check tests.
"""

from __future__ import annotations

import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    from numba import njit, prange
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

# direct kernels win while feature maps are at least this wide
_DIRECT_MIN_WIDTH = 32


class Param:
    """A learnable array with its gradient buffer and trainability flag."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = None
        self.trainable = trainable


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _direct_conv3x3(xp, wgt, bias, out):  # pragma: no cover - exercised via wrapper
        batch, cin, hp, wp = xp.shape
        cout = wgt.shape[0]
        h, w = hp - 2, wp - 2
        for bh in prange(batch * h):
            b = bh // h
            y = bh % h
            for o in range(cout):
                orow = out[b, o, y]
                for x in range(w):
                    orow[x] = bias[o]
                for c in range(cin):
                    for ky in range(3):
                        xrow = xp[b, c, y + ky]
                        w0 = wgt[o, c, ky, 0]
                        w1 = wgt[o, c, ky, 1]
                        w2 = wgt[o, c, ky, 2]
                        for x in range(w):
                            orow[x] += w0 * xrow[x] + w1 * xrow[x + 1] + w2 * xrow[x + 2]

    @njit(parallel=True, cache=True)
    def _pool2x2_fwd(x, y, idx):  # pragma: no cover - exercised via wrapper
        batch, ch, h, w = x.shape
        for bc in prange(batch * ch):
            b = bc // ch
            c = bc % ch
            for i in range(h // 2):
                r0 = x[b, c, 2 * i]
                r1 = x[b, c, 2 * i + 1]
                yo = y[b, c, i]
                io = idx[b, c, i]
                for j in range(w // 2):
                    best = r0[2 * j]
                    k = 0
                    if r0[2 * j + 1] > best:
                        best = r0[2 * j + 1]
                        k = 1
                    if r1[2 * j] > best:
                        best = r1[2 * j]
                        k = 2
                    if r1[2 * j + 1] > best:
                        best = r1[2 * j + 1]
                        k = 3
                    yo[j] = best
                    io[j] = k

    @njit(parallel=True, cache=True)
    def _pool2x2_bwd(idx, grad, gx):  # pragma: no cover - exercised via wrapper
        batch, ch, h2, w2 = grad.shape
        for bc in prange(batch * ch):
            b = bc // ch
            c = bc % ch
            for i in range(h2):
                gi = grad[b, c, i]
                ii = idx[b, c, i]
                r0 = gx[b, c, 2 * i]
                r1 = gx[b, c, 2 * i + 1]
                for j in range(w2):
                    k = ii[j]
                    if k == 0:
                        r0[2 * j] = gi[j]
                    elif k == 1:
                        r0[2 * j + 1] = gi[j]
                    elif k == 2:
                        r1[2 * j] = gi[j]
                    else:
                        r1[2 * j + 1] = gi[j]

    @njit(parallel=True, cache=True)
    def _direct_conv3x3_dw(xp, grad, gw):  # pragma: no cover - exercised via wrapper
        batch, cin, hp, wp = xp.shape
        cout = grad.shape[1]
        h, w = hp - 2, wp - 2
        for o in prange(cout):
            # per-lane accumulators; a single store stream per pass keeps
            # the loop vectorizable without reassociation
            acc = np.zeros((cin, 3, 3, w), dtype=xp.dtype)
            for b in range(batch):
                for y in range(h):
                    grow = grad[b, o, y]
                    for c in range(cin):
                        for ky in range(3):
                            xrow = xp[b, c, y + ky]
                            for kx in range(3):
                                a = acc[c, ky, kx]
                                for x in range(w):
                                    a[x] += grow[x] * xrow[x + kx]
            for c in range(cin):
                for ky in range(3):
                    for kx in range(3):
                        total = acc[c, ky, kx, 0] * 0.0
                        for x in range(w):
                            total += acc[c, ky, kx, x]
                        gw[o, c, ky, kx] = total


def _use_direct(width: int) -> bool:
    return _HAVE_NUMBA and width >= _DIRECT_MIN_WIDTH


def _patches3x3(x_padded: np.ndarray) -> np.ndarray:
    """im2col for 3x3 kernels: (B,C,H+2,W+2) -> (B, C*9, H*W).

    Built from nine contiguous slice copies so the gather stays
    cache-friendly; the result reshapes into batched GEMM operands
    without further copies.
    """
    b, c, hp, wp = x_padded.shape
    h, w = hp - 2, wp - 2
    cols = np.empty((b, c, 9, h, w), dtype=x_padded.dtype)
    for k in range(9):
        ky, kx = divmod(k, 3)
        cols[:, :, k] = x_padded[:, :, ky : ky + h, kx : kx + w]
    return cols.reshape(b, c * 9, h * w)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _conv3x3_forward_padded(xp, weight, bias):
    b, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    o = weight.shape[0]
    if _use_direct(w):
        out = np.empty((b, o, h, w), dtype=xp.dtype)
        _direct_conv3x3(xp, np.ascontiguousarray(weight), bias, out)
        return out
    y = weight.reshape(o, c * 9) @ _patches3x3(xp)
    y += bias[:, None]
    return y.reshape(b, o, h, w)


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation, 3x3 kernel, stride 1, zero padding 1.

    x: (B,C,H,W), weight: (O,C,3,3), bias: (O,) -> (B,O,H,W)
    """
    b, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c, 3, 3):
        raise ValueError(f"weight shape {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")
    return _conv3x3_forward_padded(_pad1(x), weight, bias)


def _conv3x3_backward_padded(xp, weight, grad_out, need_input_grad, need_param_grads):
    b, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    o = weight.shape[0]
    gw = gb = gx = None
    direct = _use_direct(w)
    if need_param_grads:
        gb = grad_out.sum(axis=(0, 2, 3))
        if direct:
            gw = np.empty((o, c, 3, 3), dtype=xp.dtype)
            _direct_conv3x3_dw(xp, np.ascontiguousarray(grad_out), gw)
        else:
            cols = _patches3x3(xp)
            g2 = grad_out.reshape(b, o, h * w)
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 3, 3)
    if need_input_grad:
        if direct:
            # input grad is a conv of the padded upstream grad with the
            # channel-transposed, spatially flipped kernel
            wt = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = np.empty((b, c, h, w), dtype=xp.dtype)
            _direct_conv3x3(_pad1(grad_out), wt, np.zeros(c, dtype=xp.dtype), gx)
        else:
            g2 = grad_out.reshape(b, o, h * w)
            gcols = np.matmul(weight.reshape(o, c * 9).T, g2).reshape(b, c, 9, h, w)
            gxp = np.zeros((b, c, h + 2, w + 2), dtype=xp.dtype)
            for k in range(9):
                ky, kx = divmod(k, 3)
                gxp[:, :, ky : ky + h, kx : kx + w] += gcols[:, :, k]
            gx = gxp[:, :, 1 : 1 + h, 1 : 1 + w]
    return gx, gw, gb


def conv3x3_backward(
    x: np.ndarray,
    weight: np.ndarray,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
    need_param_grads: bool = True,
):
    """Gradients of conv3x3_forward; unneeded outputs are skipped and None."""
    return _conv3x3_backward_padded(
        _pad1(x), weight, grad_out, need_input_grad, need_param_grads
    )


def maxpool2x2_forward(x: np.ndarray):
    """2x2/stride-2 max pooling. Returns (pooled, argmax) with argmax in 0..3.

    Window cells are ordered row-major; ties resolve to the first
    (row-major) maximal index.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    if _HAVE_NUMBA:
        y = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
        idx = np.empty((b, c, h // 2, w // 2), dtype=np.int8)
        _pool2x2_fwd(np.ascontiguousarray(x), y, idx)
        return y, idx
    v = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = v.argmax(axis=4)
    y = np.take_along_axis(v, idx[..., None], axis=4)[..., 0]
    return y, idx.astype(np.int8)


def maxpool2x2_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route gradients to the recorded argmax cell of each 2x2 window."""
    b, c, h2, w2 = grad_out.shape
    if _HAVE_NUMBA:
        gx = np.zeros((b, c, 2 * h2, 2 * w2), dtype=grad_out.dtype)
        _pool2x2_bwd(argmax, np.ascontiguousarray(grad_out), gx)
        return gx
    gv = np.zeros((b, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(gv, argmax[..., None].astype(np.int64), grad_out[..., None], axis=4)
    return (
        gv.reshape(b, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, 2 * h2, 2 * w2)
    )


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x: (B,D), weight: (K,D), bias: (K,) -> (B,K) via x.Wt + b."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    return x @ weight.T + bias


def dense_backward(
    x: np.ndarray,
    weight: np.ndarray,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
    need_param_grads: bool = True,
):
    gw = gb = gx = None
    if need_param_grads:
        gw = grad_out.T @ x
        gb = grad_out.sum(axis=0)
    if need_input_grad:
        gx = grad_out @ weight
    return gx, gw, gb


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    grad = (softmax - onehot) / B, ready to feed straight into backward.
    """
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= b
    return float(loss), grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv3x3:
    def __init__(self, name, in_channels, out_channels, rng=None, dtype=np.float32):
        if rng is None:
            w = np.zeros((out_channels, in_channels, 3, 3), dtype=dtype)
        else:
            w = kaiming_uniform(
                rng, (out_channels, in_channels, 3, 3), in_channels * 9, dtype
            )
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_channels, dtype=dtype))
        self._xp = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, cache=False):
        w = self.weight.value
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"input shape {x.shape} incompatible with weight {w.shape}")
        xp = _pad1(x)
        if cache:
            self._xp = xp
        return _conv3x3_forward_padded(xp, w, self.bias.value)

    def backward(self, grad_out, need_input_grad=True, need_param_grads=True):
        if self._xp is None:
            raise RuntimeError("no saved activations; run forward with cache=True")
        gx, gw, gb = _conv3x3_backward_padded(
            self._xp, self.weight.value, grad_out, need_input_grad, need_param_grads
        )
        if need_param_grads:
            self.weight.grad = gw
            self.bias.grad = gb
        return gx


class ReLU:
    def __init__(self):
        self._x = None

    def params(self):
        return []

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        return relu_forward(x)

    def backward(self, grad_out, need_input_grad=True, need_param_grads=True):
        if not need_input_grad:
            return None
        if self._x is None:
            raise RuntimeError("no saved activations; run forward with cache=True")
        return relu_backward(self._x, grad_out)


class MaxPool2x2:
    def __init__(self):
        self._argmax = None

    def params(self):
        return []

    def forward(self, x, cache=False):
        y, argmax = maxpool2x2_forward(x)
        if cache:
            self._argmax = argmax
        return y

    def backward(self, grad_out, need_input_grad=True, need_param_grads=True):
        if not need_input_grad:
            return None
        if self._argmax is None:
            raise RuntimeError("no saved activations; run forward with cache=True")
        return maxpool2x2_backward(self._argmax, grad_out)


class Flatten:
    def __init__(self):
        self._shape = None

    def params(self):
        return []

    def forward(self, x, cache=False):
        if cache:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, need_input_grad=True, need_param_grads=True):
        if not need_input_grad:
            return None
        if self._shape is None:
            raise RuntimeError("no saved activations; run forward with cache=True")
        return grad_out.reshape(self._shape)


class Dense:
    def __init__(self, name, in_dim, out_dim, rng=None, dtype=np.float32):
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        return dense_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out, need_input_grad=True, need_param_grads=True):
        if self._x is None:
            raise RuntimeError("no saved activations; run forward with cache=True")
        gx, gw, gb = dense_backward(
            self._x, self.weight.value, grad_out, need_input_grad, need_param_grads
        )
        if need_param_grads:
            self.weight.grad = gw
            self.bias.grad = gb
        return gx


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """ADAM with bias correction. Frozen or gradient-less parameters are skipped."""

    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [None] * len(self.params)
        self._v = [None] * len(self.params)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            if g.shape != p.value.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {p.value.shape} "
                    f"for {p.name}"
                )
            if self._m[i] is None:
                self._m[i] = np.zeros_like(p.value)
                self._v[i] = np.zeros_like(p.value)
            m, v = self._m[i], self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.value.dtype, copy=False
            )
