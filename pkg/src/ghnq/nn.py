"""CNN forward operators and the Adam update, built on the tensor tape.

Convolution uses cross-correlation semantics with an im2col lowering; the
spatial output extent follows ``floor((H + 2p - d*(k-1) - 1)/s) + 1``.
BatchNorm uses per-batch statistics with biased (population) variance; no
running averages are kept.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _record


def conv_output_extent(size: int, kernel: int, stride: int, padding: int,
                       dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :,
                                  i * dilation: i * dilation + oh * stride: stride,
                                  j * dilation: j * dilation + ow * stride: stride]
    return cols


def _col2im_add(grad_xp: np.ndarray, grad_cols: np.ndarray, kh: int, kw: int,
                stride: int, dilation: int, oh: int, ow: int) -> None:
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :,
                    i * dilation: i * dilation + oh * stride: stride,
                    j * dilation: j * dilation + ow * stride: stride] += grad_cols[:, :, i, j]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-D convolution over [N, Cin, H, W] with a [Cout, Cin/groups, kh, kw] kernel.

    ``groups == Cin`` with ``Cout == Cin`` gives depthwise behaviour.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ShapeError("conv2d requires stride, dilation >= 1 and padding >= 0")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups != 0:
        raise ShapeError(f"input channels {cin} (dim 1) not divisible by groups={groups}")
    if cout % groups != 0:
        raise ShapeError(f"output channels {cout} (weight dim 0) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight dim 1 is {cin_g}, expected {cin // groups} "
            f"(input channels {cin} / groups {groups})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},) (weight dim 0)")
    oh = conv_output_extent(h, kh, stride, padding, dilation)
    ow = conv_output_extent(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"non-positive conv output extent {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}, dilation {dilation}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    k = cin_g * kh * kw
    # [N, G, K, OH*OW] x [G, Cout/g, K] -> [N, G, Cout/g, OH*OW]
    cols_g = cols.reshape(n, groups, k, oh * ow)
    w_g = weight.data.reshape(groups, cout // groups, k)
    out = np.matmul(w_g, cols_g).reshape(n, cout, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gg = g.reshape(n, groups, cout // groups, oh * ow)
        grad_w = np.matmul(gg, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        grad_w = grad_w.reshape(weight.shape)
        grad_cols = np.matmul(w_g.transpose(0, 2, 1), gg)
        grad_cols = grad_cols.reshape(n, cin, kh, kw, oh, ow)
        grad_xp = np.zeros_like(xp)
        _col2im_add(grad_xp, grad_cols, kh, kw, stride, dilation, oh, ow)
        if padding:
            grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
        else:
            grad_x = grad_xp
        if bias is not None:
            return grad_x, grad_w, g.sum(axis=(0, 2, 3))
        return grad_x, grad_w

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, grad_fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                eps: float = 1e-5) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel batch normalization over (N, H, W).

    Returns ``(output, batch_var, batch_mean)``. Variance is biased
    (divide by count). The statistics tensors are detached; they exist so
    downstream code can fold them into convolution weights.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},) to match input channels, "
            f"got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ShapeError("batchnorm2d requires eps > 0")
    count = n * h * w
    if count < 2:
        raise ShapeError(f"batchnorm2d needs N*H*W >= 2 for batch statistics, got {count}")

    mean64 = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
    var64 = np.square(x.data.astype(np.float64) - mean64[None, :, None, None]).mean(axis=(0, 2, 3))
    mean = mean64.astype(x.dtype)
    var = var64.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var64 + eps)).astype(x.dtype)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def grad_fn(g):
        grad_gamma = np.sum(g * x_hat, axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        grad_beta = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        gm = g.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        gxm = (g * x_hat).mean(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        coef = (gamma.data * inv_std)[None, :, None, None]
        grad_x = coef * (g - gm[None, :, None, None] - x_hat * gxm[None, :, None, None])
        return grad_x, grad_gamma, grad_beta

    y = _record((x, gamma, beta), out, grad_fn)
    return y, Tensor(var, dtype=x.dtype), Tensor(mean, dtype=x.dtype)


def _pool_prepare(x: Tensor, kernel: int, stride: int, padding: int, pad_value: float):
    if x.ndim != 4:
        raise ShapeError(f"pooling input must be 4-D, got {x.shape}")
    if padding > kernel // 2:
        raise ShapeError(f"pool padding {padding} exceeds kernel//2 for kernel {kernel}")
    n, c, h, w = x.shape
    oh = conv_output_extent(h, kernel, stride, padding)
    ow = conv_output_extent(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive pool output extent {oh}x{ow} for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=pad_value)
    cols = _im2col(xp, kernel, kernel, stride, 1, oh, ow)
    return xp.shape, cols.reshape(n, c, kernel * kernel, oh, ow), oh, ow


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None,
               padding: int = 0) -> Tensor:
    stride = stride or kernel
    pad_shape, cols, oh, ow = _pool_prepare(x, kernel, stride, padding, -np.inf)
    argmax = cols.argmax(axis=2)
    out = np.take_along_axis(cols, argmax[:, :, None], axis=2)[:, :, 0]

    def grad_fn(g):
        grad_xp = np.zeros(pad_shape, dtype=x.dtype)
        for t in range(kernel * kernel):
            sel = g * (argmax == t)
            i, j = divmod(t, kernel)
            grad_xp[:, :, i: i + oh * stride: stride,
                    j: j + ow * stride: stride] += sel
        if padding:
            return (grad_xp[:, :, padding:-padding, padding:-padding],)
        return (grad_xp,)

    return _record((x,), out, grad_fn)


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None,
               padding: int = 0) -> Tensor:
    """Average pooling; padded cells count toward the divisor."""
    stride = stride or kernel
    pad_shape, cols, oh, ow = _pool_prepare(x, kernel, stride, padding, 0.0)
    out = (cols.sum(axis=2, dtype=np.float64) / (kernel * kernel)).astype(x.dtype)

    def grad_fn(g):
        share = g / (kernel * kernel)
        grad_xp = np.zeros(pad_shape, dtype=x.dtype)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            grad_xp[:, :, i: i + oh * stride: stride,
                    j: j + ow * stride: stride] += share
        if padding:
            return (grad_xp[:, :, padding:-padding, padding:-padding],)
        return (grad_xp,)

    return _record((x,), out, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=False),)

    return _record((x,), out, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map [N, Fin] -> [N, Fout] with weight [Fout, Fin]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear input features {x.shape[1]} (dim 1) != weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data[None, :]

    def grad_fn(g):
        if bias is not None:
            return g @ weight.data, g.T @ x.data, g.sum(axis=0)
        return g @ weight.data, g.T @ x.data

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, grad_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between logits [N, K] and integer labels [N]."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D [N, K], got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} != ({n},)")
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(f"labels out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True, dtype=np.float64)
    log_probs = z - np.log(denom).astype(z.dtype)
    loss = np.asarray(-log_probs[np.arange(n), y].mean(dtype=np.float64), dtype=logits.dtype)
    probs = (ez / denom).astype(z.dtype)

    def grad_fn(g):
        grad = probs.copy()
        grad[np.arange(n), y] -= 1.0
        return (grad * (np.asarray(g) / n),)

    return _record((logits,), loss, grad_fn)


def accuracy(logits: Tensor, labels) -> float:
    """Top-1 accuracy in [0, 1]."""
    pred = logits.data.argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, *, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, weight_decay: float = 0.0,
              eps: float = 1e-8) -> None:
    """One Adam update in place, with decoupled weight decay.

    A ``None`` grad leaves that parameter and its moments untouched.
    With ``lr == 0`` parameters stay bit-identical.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


class Adam:
    """Adam over parameter groups; each group may opt out of weight decay."""

    def __init__(self, groups: Sequence[dict], *, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.groups = [
            {"params": list(g["params"]),
             "weight_decay": float(g.get("weight_decay", 0.0)),
             "state": AdamState(g["params"])}
            for g in groups
        ]

    def step(self) -> None:
        for group in self.groups:
            params = group["params"]
            adam_step(params, [p.grad for p in params], group["state"],
                      lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                      weight_decay=group["weight_decay"], eps=self.eps)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group["params"]:
                p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flat view of moment buffers and step counters, for checkpointing."""
        blobs: dict[str, np.ndarray] = {}
        for gi, group in enumerate(self.groups):
            state = group["state"]
            blobs[f"opt.g{gi}.t"] = np.asarray([state.t], dtype=np.float64)
            for pi in range(len(group["params"])):
                blobs[f"opt.g{gi}.m{pi}"] = state.m[pi]
                blobs[f"opt.g{gi}.v{pi}"] = state.v[pi]
        return blobs

    def load_state_tensors(self, blobs: dict[str, np.ndarray]) -> None:
        for gi, group in enumerate(self.groups):
            state = group["state"]
            state.t = int(blobs[f"opt.g{gi}.t"][0])
            for pi in range(len(group["params"])):
                state.m[pi] = np.array(blobs[f"opt.g{gi}.m{pi}"], dtype=state.m[pi].dtype)
                state.v[pi] = np.array(blobs[f"opt.g{gi}.v{pi}"], dtype=state.v[pi].dtype)
