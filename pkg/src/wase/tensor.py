"""Minimal reverse-mode differentiable arrays.

Only the operations the WASE network needs are provided. Everything is
double precision. Gradients accumulate additively into ``.grad`` of leaf
tensors (and of interior tensors marked with ``retain_grad``); call
``zero_grad`` between steps.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

BCE_EPS = 1e-7
_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self._retain = False
        self.name = name

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.ravel()

    @property
    def is_leaf(self) -> bool:
        return self._parents is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; record the backward closure only if gradients are needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents or ():
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of everything ``loss`` depends on.

    Repeated calls without zeroing add up (twice means doubled gradients).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None or node._retain:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
        if node._parents is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise arithmetic with numpy broadcasting


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tsum(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D tensor, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def crop(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` entries along the last axis."""
    full = x.shape[-1]
    if length > full:
        raise ValueError(f"crop: length {length} exceeds {full}")

    def bw(g):
        out = np.zeros(x.shape)
        out[..., :length] = g
        return (out,)

    return _node(x.data[..., :length].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x >= 0, slope * x otherwise; ``slope`` is a single learnable value."""
    if slope.data.size != 1:
        raise ValueError(f"prelu: slope must hold one value, got shape {slope.shape}")
    a = float(slope.data.reshape(-1)[0])
    neg_part = np.minimum(x.data, 0.0)
    y = np.maximum(x.data, 0.0)
    y += a * neg_part

    def bw(g):
        gx = np.where(x.data < 0, a * g, g)
        gs = np.array(np.vdot(g, neg_part)).reshape(slope.shape)
        return gx, gs

    return _node(y, (x, slope), bw)


# ---------------------------------------------------------------------------
# convolutions


def _frames(x: np.ndarray, kernel: int, step: int, n_out: int, dilation: int = 1) -> np.ndarray:
    """Read-only strided view of shape (C, kernel, n_out): x[c, k*dilation + step*l]."""
    x = np.ascontiguousarray(x)
    sc, sl = x.strides
    return as_strided(x, (x.shape[0], kernel, n_out), (sc, sl * dilation, sl * step), writeable=False)


def _corr(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    c_out, c_in, k = w.shape
    n_out = (x.shape[1] - k) // stride + 1
    cols = _frames(x, k, stride, n_out).reshape(c_in * k, n_out)
    return w.reshape(c_out, c_in * k) @ cols


def _corr_adjoint(g: np.ndarray, w: np.ndarray, stride: int, length: int | None = None) -> np.ndarray:
    """Adjoint of ``_corr`` with respect to its input; also the transposed convolution."""
    c_out, c_in, k = w.shape
    n = g.shape[1]
    full = (n - 1) * stride + k
    cols = (w.reshape(c_out, c_in * k).T @ g).reshape(c_in, k, n)
    out = np.zeros((c_in, max(full, length or 0)))
    span = stride * (n - 1) + 1
    for j in range(k):
        out[:, j:j + span:stride] += cols[:, j, :]
    return out if length is None else out[:, :length]


def _corr_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, k: int) -> np.ndarray:
    """d/dw of <g, _corr(x, w)>, shaped (g channels, x channels, k)."""
    c_in = x.shape[0]
    n = g.shape[1]
    cols = _frames(x, k, stride, n).reshape(c_in * k, n)
    return (g @ cols.T).reshape(g.shape[0], c_in, k)


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of a (C_in, L_in) signal with a (C_out, C_in, K) kernel."""
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if x.data.ndim != 2 or kernel.data.ndim != 3 or kernel.shape[1] != x.shape[0]:
        raise _shape_error("conv1d", x.shape, kernel.shape)
    k = kernel.shape[2]
    if x.shape[1] < k:
        raise ValueError(f"conv1d: input length {x.shape[1]} shorter than kernel {k}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise _shape_error("conv1d", kernel.shape, bias.shape)
    y = _corr(x.data, kernel.data, stride)
    if bias is not None:
        y += bias.data[:, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = _corr_adjoint(g, kernel.data, stride, x.shape[1]) if x.requires_grad else None
        gk = _corr_kernel_grad(x.data, g, stride, k) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=1)

    return _node(y, parents, bw)


def conv1d_transpose(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution, (C_in, L) -> (C_out, (L-1)*stride + K). No bias by design."""
    if stride < 1:
        raise ValueError(f"conv1d_transpose: stride must be >= 1, got {stride}")
    if x.data.ndim != 2 or kernel.data.ndim != 3 or kernel.shape[0] != x.shape[0]:
        raise _shape_error("conv1d_transpose", x.shape, kernel.shape)
    k = kernel.shape[2]
    y = _corr_adjoint(x.data, kernel.data, stride)

    def bw(g):
        gx = _corr(g, kernel.data, stride) if x.requires_grad else None
        gk = _corr_kernel_grad(g, x.data, stride, k) if kernel.requires_grad else None
        return gx, gk

    return _node(y, (x, kernel), bw)


def depthwise_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, bias: Tensor | None = None) -> Tensor:
    """Per-channel dilated convolution, zero padded so the length is unchanged."""
    if dilation < 1:
        raise ValueError(f"depthwise_conv1d: dilation must be >= 1, got {dilation}")
    if x.data.ndim != 2 or kernel.data.ndim != 2 or kernel.shape[0] != x.shape[0]:
        raise _shape_error("depthwise_conv1d", x.shape, kernel.shape)
    c, n = x.shape
    k = kernel.shape[1]
    total = (k - 1) * dilation
    left = total // 2
    xp = np.zeros((c, n + total))
    xp[:, left:left + n] = x.data
    w = kernel.data
    y = np.zeros((c, n)) if bias is None else np.repeat(bias.data[:, None], n, axis=1)
    for j in range(k):
        y += w[:, j:j + 1] * xp[:, j * dilation:j * dilation + n]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[:, j * dilation:j * dilation + n] += w[:, j:j + 1] * g
            gx = gp[:, left:left + n]
        gk = np.stack([(g * xp[:, j * dilation:j * dilation + n]).sum(axis=1) for j in range(k)], axis=1)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=1)

    return _node(y, parents, bw)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-frame linear map: (C_out, C_in) weight applied to a (C_in, L) signal."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise _shape_error("pointwise_conv", x.shape, weight.shape)
    y = weight.data @ x.data
    if bias is not None:
        y += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = weight.data.T @ g if x.requires_grad else None
        gw = g @ x.data.T
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    return _node(y, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map of a (L, D_in) sequence with a (D_out, D_in) weight."""
    if x.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    y = x.data @ weight.data.T
    if bias is not None:
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _node(y, parents, bw)


# ---------------------------------------------------------------------------
# normalisation and pooling


def global_layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise with statistics over every entry, then scale and shift per channel."""
    if eps <= 0:
        raise ValueError("global_layer_norm: eps must be positive")
    n = x.data.size
    xc = x.data - x.data.mean()
    inv = 1.0 / np.sqrt(np.vdot(xc, xc) / n + eps)
    xhat = xc
    xhat *= inv
    y = gain.data[:, None] * xhat
    y += shift.data[:, None]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data[:, None]
            gx = gh - (gh.sum() / n)
            gx -= xhat * (np.vdot(gh, xhat) / n)
            gx *= inv
        return gx, np.einsum("cl,cl->c", g, xhat), g.sum(axis=1)

    return _node(y, (x, gain, shift), bw)


def mean_pool_time(x: Tensor) -> Tensor:
    """Average a (L, D) sequence over time."""
    n = x.shape[0]
    if n < 1:
        raise ValueError("mean_pool_time: empty sequence")
    return _node(x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# recurrence


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over a (L, D) sequence; gate order i, f, g, o.

    Fused forward and backpropagation through time.
    """
    X = x.data
    Wi, Wh, b = w_ih.data, w_hh.data, bias.data
    hid = Wh.shape[1]
    n = X.shape[0]
    if Wi.shape != (4 * hid, X.shape[1]) or b.shape != (4 * hid,):
        raise _shape_error("lstm", x.shape, w_ih.shape, w_hh.shape)
    order = np.arange(n)[::-1] if reverse else np.arange(n)
    xp = X @ Wi.T + b
    hs = np.zeros((n + 1, hid))
    cs = np.zeros((n + 1, hid))
    acts = np.empty((n, 4 * hid))
    for step, t in enumerate(order):
        z = xp[t] + hs[step] @ Wh.T
        i = expit(z[:hid])
        f = expit(z[hid:2 * hid])
        gg = np.tanh(z[2 * hid:3 * hid])
        o = expit(z[3 * hid:])
        c = f * cs[step] + i * gg
        cs[step + 1] = c
        hs[step + 1] = o * np.tanh(c)
        acts[step, :hid], acts[step, hid:2 * hid] = i, f
        acts[step, 2 * hid:3 * hid], acts[step, 3 * hid:] = gg, o
    y = np.empty((n, hid))
    y[order] = hs[1:]

    def bw(gy):
        gy_steps = gy[order]
        dz = np.empty((n, 4 * hid))
        dh_next = np.zeros(hid)
        dc_next = np.zeros(hid)
        for step in range(n - 1, -1, -1):
            i, f = acts[step, :hid], acts[step, hid:2 * hid]
            gg, o = acts[step, 2 * hid:3 * hid], acts[step, 3 * hid:]
            tc = np.tanh(cs[step + 1])
            dh = gy_steps[step] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz[step, :hid] = dc * gg * i * (1.0 - i)
            dz[step, hid:2 * hid] = dc * cs[step] * f * (1.0 - f)
            dz[step, 2 * hid:3 * hid] = dc * i * (1.0 - gg * gg)
            dz[step, 3 * hid:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz[step] @ Wh
        dxp = np.empty_like(dz)
        dxp[order] = dz
        gx = dxp @ Wi if x.requires_grad else None
        return gx, dxp.T @ X, dz.T @ hs[:-1], dxp.sum(axis=0)

    return _node(y, (x, w_ih, w_hh, bias), bw)


def bilstm(x: Tensor, params: Sequence[dict[str, Tensor]]) -> Tensor:
    """Stacked bidirectional LSTM; ``params`` holds one dict per layer.

    Each dict carries ``fwd_w_ih, fwd_w_hh, fwd_b, bwd_w_ih, bwd_w_hh, bwd_b``.
    Output is (L, 2H) with forward and backward states concatenated per frame.
    """
    h = x
    for layer in params:
        fwd = lstm(h, layer["fwd_w_ih"], layer["fwd_w_hh"], layer["fwd_b"])
        bwd = lstm(h, layer["bwd_w_ih"], layer["bwd_w_hh"], layer["bwd_b"], reverse=True)
        h = concat([fwd, bwd], axis=1)
    return h


# ---------------------------------------------------------------------------
# losses


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise _shape_error("binary_cross_entropy", pred.shape, t.shape)
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def bw(g):
        return (float(g) / n * (p - t) / (p * (1.0 - p)) * inside,)

    return _node(np.array(loss), (pred,), bw)


def si_snr(estimate: Tensor, reference, eps: float = 1e-12) -> Tensor:
    """Differentiable scale-invariant SNR in dB of a 1-D estimate (both mean-centred)."""
    s = reference.data if isinstance(reference, Tensor) else np.asarray(reference, dtype=np.float64)
    est = estimate.data.reshape(-1)
    s = s.reshape(-1)
    if est.shape != s.shape:
        raise _shape_error("si_snr", estimate.shape, s.shape)
    s = s - s.mean()
    e_c = est - est.mean()
    ss = s @ s
    if ss <= 1e-12:
        raise ValueError("si_snr: reference has no energy")
    target = (e_c @ s) / ss * s
    noise = e_c - target
    pt = target @ target
    pn = noise @ noise + eps
    value = 10.0 * np.log10(pt / pn)

    def bw(g):
        gc = (10.0 / np.log(10.0)) * (2.0 * target / pt - 2.0 * noise / pn)
        return ((float(g) * (gc - gc.mean())).reshape(estimate.shape),)

    return _node(np.array(value), (estimate,), bw)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None, frozen: Iterable[str] = ()) -> None:
        lr = self.lr if lr is None else lr
        frozen = set(frozen)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if name in frozen or p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], float], x: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central differences of a scalar function with respect to every entry of ``x``."""
    data = x.data
    out = np.zeros(data.shape)
    for idx in np.ndindex(data.shape):
        orig = data[idx]
        data[idx] = orig + step
        hi = fn()
        data[idx] = orig - step
        lo = fn()
        data[idx] = orig
        out[idx] = (hi - lo) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
